use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// He-style normal initialisation with the given fan-in.
    pub fn push_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f32,
        rng: &mut Rng,
    ) -> ParamId {
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let t = Tensor::randn(shape, rng).scale(std);
        self.push(name, t)
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace all tensors, keeping names; shapes must match one-to-one.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(TensorError::InvalidArgument(format!(
                "assign: {} tensors for {} parameters",
                tensors.len(),
                self.tensors.len()
            )));
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            crate::error::check_shape("assign", old.shape(), new.shape())?;
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Put every parameter on `tape`. With `trainable == false` they are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParamSet`], aligned by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with the parameter order; unreachable ones are zero.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }

    /// Like [`collect_grads`](Self::collect_grads) but `None` where no gradient reached.
    pub fn reached(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}
