//! AdamW with decoupled weight decay, and EMA weight tracking.

use crate::error::{check_shape, Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment accumulators and step count for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first_moment: params.tensors().iter().map(zeros).collect(),
            second_moment: params.tensors().iter().map(zeros).collect(),
        }
    }

    /// One AdamW update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adamw: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.first_moment.len(),
                params.len()
            )));
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.first_moment) {
            check_shape("adamw grad", p.shape(), g.shape())?;
            check_shape("adamw moment", p.shape(), m.shape())?;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pi, &gi), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(md.iter_mut())
                .zip(vd.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *pi = *pi * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * param`, elementwise.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, decay: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(TensorError::InvalidArgument(format!(
            "ema decay {decay} outside [0, 1]"
        )));
    }
    if ema.len() != params.len() {
        return Err(TensorError::InvalidArgument(format!(
            "ema: {} slots for {} parameters",
            ema.len(),
            params.len()
        )));
    }
    for (e, p) in ema.tensors().iter().zip(params.tensors()) {
        check_shape("ema", e.shape(), p.shape())?;
    }
    let keep = 1.0 - decay;
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
            *ei = decay * *ei + keep * pi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = single(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        st.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].data(), &[0.37]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamWConfig::default().lr, 1e-5);
        assert_eq!(AdamWConfig::default().beta1, 0.9);
        assert_eq!(AdamWConfig::default().beta2, 0.999);
    }

    #[test]
    fn one_step_on_square_decreases_it() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(
            AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            &p,
        );
        let w = p.tensors()[0].data()[0];
        st.step(&mut p, &[Tensor::scalar(2.0 * w)]).unwrap();
        let w2 = p.tensors()[0].data()[0];
        assert!(w2 * w2 < w * w);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn ema_edge_decays() {
        let params = single(0.0);
        let mut ema = single(1.0);
        ema_update(&mut ema, &params, 1.0).unwrap();
        assert_eq!(ema.tensors()[0].data(), &[1.0]);
        ema_update(&mut ema, &params, 0.9999).unwrap();
        assert!((ema.tensors()[0].data()[0] - 0.9999).abs() < 1e-7);
        ema_update(&mut ema, &params, 0.0).unwrap();
        assert_eq!(ema.tensors()[0].data(), &[0.0]);
        assert!(ema_update(&mut ema, &params, 1.5).is_err());
        assert!(ema_update(&mut ema, &params, -0.1).is_err());
    }
}
