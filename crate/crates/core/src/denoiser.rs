//! The dynamic-noise and mask networks and the condition handling around them.
//!
//! Each head is a small convolutional U-Net. Reference frames enter through
//! an adapter that adds one feature map per trunk stage; anchor, prompt,
//! timestep and augmentation level are folded into a conditioning vector
//! that modulates every stage with a per-channel scale and shift.

use std::sync::atomic::{AtomicU64, Ordering};

use mdm_tensor::{BoundParams, ParamId, ParamSet, Rng, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::schedule::{noise_to, NoiseSchedule};
use crate::toyworld::TOKENS;

/// Channel count and spatial size of one latent frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn of(model: &ModelConfig) -> Self {
        Self::new(model.channels, model.height, model.width)
    }

    pub fn check(&self, frame: &Tensor, what: &str) -> Result<()> {
        if frame.shape() != self.dims() {
            return Err(invalid(format!(
                "{what}: expected {:?}, got {:?}",
                self.dims(),
                frame.shape()
            )));
        }
        Ok(())
    }
}

/// A `C x H x W` latent frame.
pub type LatentFrame = Tensor;

/// Conditions for one frame. `None` marks a dropped slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub ref_prev: Option<LatentFrame>,
    pub ref_prev2: Option<LatentFrame>,
    pub anchor: Option<LatentFrame>,
    pub prompt: Option<Vec<usize>>,
    pub aug_level: usize,
}

impl ConditionSet {
    pub fn full(
        ref_prev: LatentFrame,
        ref_prev2: LatentFrame,
        anchor: LatentFrame,
        prompt: Vec<usize>,
    ) -> Self {
        Self {
            ref_prev: Some(ref_prev),
            ref_prev2: Some(ref_prev2),
            anchor: Some(anchor),
            prompt: Some(prompt),
            aug_level: 0,
        }
    }

    /// Everything dropped.
    pub fn empty() -> Self {
        Self {
            ref_prev: None,
            ref_prev2: None,
            anchor: None,
            prompt: None,
            aug_level: 0,
        }
    }

    pub fn without_refs(&self) -> Self {
        Self {
            ref_prev: None,
            ref_prev2: None,
            ..self.clone()
        }
    }

    pub fn without_anchor(&self) -> Self {
        Self {
            anchor: None,
            ..self.clone()
        }
    }

    pub fn without_prompt(&self) -> Self {
        Self {
            prompt: None,
            ..self.clone()
        }
    }

    /// `[refs, anchor, prompt]`, true where the slot is dropped.
    pub fn null_flags(&self) -> [bool; 3] {
        [
            self.ref_prev.is_none() || self.ref_prev2.is_none(),
            self.anchor.is_none(),
            self.prompt.is_none(),
        ]
    }

    fn validate(&self, shape: LatentShape, t_bound: usize) -> Result<()> {
        for (f, name) in [
            (&self.ref_prev, "ref_prev"),
            (&self.ref_prev2, "ref_prev2"),
            (&self.anchor, "anchor"),
        ] {
            if let Some(f) = f {
                shape.check(f, name)?;
                if !f.is_finite() {
                    return Err(Error::Diverged(format!("{name} is not finite")));
                }
            }
        }
        if let Some(p) = &self.prompt {
            if let Some(&bad) = p.iter().find(|&&i| i >= TOKENS.len()) {
                return Err(Error::UnknownToken(format!("id {bad}")));
            }
        }
        if self.aug_level > t_bound {
            return Err(invalid(format!(
                "aug level {} exceeds {t_bound}",
                self.aug_level
            )));
        }
        Ok(())
    }
}

/// Conditions as the network consumes them: dropped frames are zeros and the
/// drop is carried by an explicit flag.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedConditions {
    pub ref_prev: Tensor,
    pub ref_prev2: Tensor,
    pub anchor: Tensor,
    pub prompt: Vec<usize>,
    pub flags: [bool; 3],
    pub aug_level: usize,
}

impl RenderedConditions {
    pub fn render(cond: &ConditionSet, shape: LatentShape) -> Self {
        let zero = || Tensor::zeros(&shape.dims());
        let flags = cond.null_flags();
        let (r1, r2) = if flags[0] {
            (zero(), zero())
        } else {
            (
                cond.ref_prev.clone().unwrap(),
                cond.ref_prev2.clone().unwrap(),
            )
        };
        Self {
            ref_prev: r1,
            ref_prev2: r2,
            anchor: cond.anchor.clone().unwrap_or_else(zero),
            prompt: cond.prompt.clone().unwrap_or_default(),
            flags,
            aug_level: cond.aug_level,
        }
    }
}

/// Per-frame network outputs. `mask` is absent for the single-head variant.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub dynamic: Tensor,
    pub mask: Option<Tensor>,
}

/// Sinusoidal embedding of `t` plus that of `aug_level`, `dim` wide.
pub fn embed_step(t: usize, aug_level: usize, dim: usize, max_step: usize) -> Result<Vec<f32>> {
    if t > max_step || aug_level > max_step {
        return Err(invalid(format!(
            "step ({t}, {aug_level}) outside 0..={max_step}"
        )));
    }
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "embedding width must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for v in [t, aug_level] {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = v as f64 * freq;
            out[k] += a.sin() as f32;
            out[half + k] += a.cos() as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Stage {
    adapter: Conv,
    adapter_out: Conv,
    down: Option<Conv>,
    body: Conv,
    film_scale: Dense,
    film_shift: Dense,
    up: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Head {
    time: Dense,
    anchor_a: Conv,
    anchor_b: Conv,
    anchor_proj: Dense,
    prompt_table: ParamId,
    null_proj: Dense,
    input: Conv,
    stages: Vec<Stage>,
    output: Conv,
    embed_dim: usize,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut Rng,
    prefix: &'a str,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Conv {
        let w = self.params.push_normal(
            format!("{}.{name}.w", self.prefix),
            &[cout, cin, k, k],
            cin * k * k,
            gain,
            self.rng,
        );
        let b = self
            .params
            .push_zeros(format!("{}.{name}.b", self.prefix), &[cout]);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, gain: f32, bias: bool) -> Dense {
        let w = self.params.push_normal(
            format!("{}.{name}.w", self.prefix),
            &[dout, din],
            din,
            gain,
            self.rng,
        );
        let b = bias.then(|| {
            self.params
                .push_zeros(format!("{}.{name}.b", self.prefix), &[dout])
        });
        Dense { w, b }
    }
}

const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

impl Head {
    #[allow(clippy::too_many_arguments)]
    fn build(
        params: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
        shape: LatentShape,
        width: usize,
        adapter_width: usize,
        embed_dim: usize,
        stages: usize,
        out_channels: usize,
    ) -> Self {
        let mut b = Builder {
            params,
            rng,
            prefix,
        };
        let c = shape.channels;
        let ch = |s: usize| width << s;
        let time = b.dense("time", embed_dim, embed_dim, 1.0, true);
        let anchor_a = b.conv("anchor.a", c, adapter_width, 3, 2, RELU_GAIN);
        let anchor_b = b.conv(
            "anchor.b",
            adapter_width,
            2 * adapter_width,
            3,
            2,
            RELU_GAIN,
        );
        let anchor_proj = b.dense("anchor.proj", 2 * adapter_width, embed_dim, 1.0, true);
        let prompt_table = b.params.push_normal(
            format!("{prefix}.prompt.table"),
            &[TOKENS.len(), embed_dim],
            1,
            1.0,
            b.rng,
        );
        let null_proj = b.dense("null", 3, embed_dim, 1.0, false);
        let input = b.conv("in", c, ch(0), 3, 1, 1.0);
        let mut st = Vec::with_capacity(stages);
        for s in 0..stages {
            let adapter_in = if s == 0 { 2 * c } else { adapter_width };
            let stride = if s == 0 { 1 } else { 2 };
            st.push(Stage {
                adapter: b.conv(
                    &format!("s{s}.adapter"),
                    adapter_in,
                    adapter_width,
                    3,
                    stride,
                    RELU_GAIN,
                ),
                adapter_out: b.conv(
                    &format!("s{s}.adapter_out"),
                    adapter_width,
                    ch(s),
                    1,
                    1,
                    1.0,
                ),
                down: (s > 0)
                    .then(|| b.conv(&format!("s{s}.down"), ch(s - 1), ch(s), 3, 2, RELU_GAIN)),
                body: b.conv(&format!("s{s}.body"), ch(s), ch(s), 3, 1, RELU_GAIN),
                film_scale: b.dense(&format!("s{s}.film_scale"), embed_dim, ch(s), 0.1, true),
                film_shift: b.dense(&format!("s{s}.film_shift"), embed_dim, ch(s), 0.1, true),
                up: (s + 1 < stages).then(|| {
                    b.conv(
                        &format!("s{s}.up"),
                        ch(s + 1) + ch(s),
                        ch(s),
                        3,
                        1,
                        RELU_GAIN,
                    )
                }),
            });
        }
        let output = b.conv("out", ch(0), out_channels, 3, 1, 0.5);
        Head {
            time,
            anchor_a,
            anchor_b,
            anchor_proj,
            prompt_table,
            null_proj,
            input,
            stages: st,
            output,
            embed_dim,
        }
    }
}

fn conv(tape: &mut Tape, p: &BoundParams, c: Conv, x: Var) -> Result<Var> {
    Ok(tape.conv2d(x, p.var(c.w), Some(p.var(c.b)), c.stride, c.pad)?)
}

fn dense(tape: &mut Tape, p: &BoundParams, d: Dense, x: Var) -> Result<Var> {
    Ok(tape.linear(x, p.var(d.w), d.b.map(|b| p.var(b)))?)
}

/// Network inputs for a batch, already rendered and stacked.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub y_t: Tensor,
    pub t: Vec<usize>,
    pub refs: Tensor,
    pub anchor: Tensor,
    pub prompts: Vec<Vec<usize>>,
    pub flags: Tensor,
    pub steps: Tensor,
}

impl BatchInputs {
    pub fn new(
        y_t: &[Tensor],
        t: &[usize],
        conds: &[RenderedConditions],
        embed_dim: usize,
        max_step: usize,
    ) -> Result<Self> {
        let n = y_t.len();
        if n == 0 || t.len() != n || conds.len() != n {
            return Err(invalid(
                "batch: y_t, t and conditions must have the same non-zero length",
            ));
        }
        let mut refs = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n * embed_dim);
        let mut flags = Vec::with_capacity(n * 3);
        for (c, &ti) in conds.iter().zip(t) {
            let s = c.ref_prev.shape();
            let pair = Tensor::stack(&[c.ref_prev.clone(), c.ref_prev2.clone()])?;
            refs.push(pair.reshape(&[2 * s[0], s[1], s[2]])?);
            steps.extend(embed_step(ti, c.aug_level, embed_dim, max_step)?);
            flags.extend(c.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        }
        Ok(Self {
            y_t: Tensor::stack(y_t)?,
            t: t.to_vec(),
            refs: Tensor::stack(&refs)?,
            anchor: Tensor::stack(&conds.iter().map(|c| c.anchor.clone()).collect::<Vec<_>>())?,
            prompts: conds.iter().map(|c| c.prompt.clone()).collect(),
            flags: Tensor::from_vec(&[n, 3], flags)?,
            steps: Tensor::from_vec(&[n, embed_dim], steps)?,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Tape handles for the constant inputs of a batch, shared by both heads.
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub y_t: Var,
    pub refs: Var,
    pub anchor: Var,
    pub flags: Var,
    pub steps: Var,
}

impl InputVars {
    pub fn bind(tape: &mut Tape, b: &BatchInputs) -> Self {
        Self {
            y_t: tape.constant(b.y_t.clone()),
            refs: tape.constant(b.refs.clone()),
            anchor: tape.constant(b.anchor.clone()),
            flags: tape.constant(b.flags.clone()),
            steps: tape.constant(b.steps.clone()),
        }
    }
}

impl Head {
    fn conditioning(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        v: &InputVars,
        prompts: &[Vec<usize>],
    ) -> Result<Var> {
        let e = dense(tape, p, self.time, v.steps)?;
        let e = tape.silu(e);
        let a = conv(tape, p, self.anchor_a, v.anchor)?;
        let a = tape.silu(a);
        let a = conv(tape, p, self.anchor_b, a)?;
        let a = tape.silu(a);
        let a = tape.mean_spatial(a)?;
        let a = dense(tape, p, self.anchor_proj, a)?;
        let txt = tape.embed_mean(p.var(self.prompt_table), prompts.to_vec())?;
        let nul = dense(tape, p, self.null_proj, v.flags)?;
        let c = tape.add(e, a)?;
        let c = tape.add(c, txt)?;
        let c = tape.add(c, nul)?;
        Ok(tape.silu(c))
    }

    fn adapter(&self, tape: &mut Tape, p: &BoundParams, refs: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = refs;
        for st in &self.stages {
            h = conv(tape, p, st.adapter, h)?;
            h = tape.silu(h);
            feats.push(conv(tape, p, st.adapter_out, h)?);
        }
        Ok(feats)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        v: &InputVars,
        prompts: &[Vec<usize>],
    ) -> Result<Var> {
        let c = self.conditioning(tape, p, v, prompts)?;
        let feats = self.adapter(tape, p, v.refs)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = conv(tape, p, self.input, v.y_t)?;
        for (st, f) in self.stages.iter().zip(&feats) {
            if let Some(d) = st.down {
                h = conv(tape, p, d, h)?;
            }
            h = tape.add(h, *f)?;
            let sc = dense(tape, p, st.film_scale, c)?;
            let sh = dense(tape, p, st.film_shift, c)?;
            h = tape.film(h, sc, sh)?;
            h = tape.silu(h);
            h = conv(tape, p, st.body, h)?;
            h = tape.silu(h);
            skips.push(h);
        }
        for (s, st) in self.stages.iter().enumerate().rev() {
            if let Some(up) = st.up {
                let u = tape.upsample2x(h)?;
                let cat = tape.concat_channels(u, skips[s])?;
                h = conv(tape, p, up, cat)?;
                h = tape.silu(h);
            }
        }
        conv(tape, p, self.output, h)
    }
}

/// Tape outputs of one forward pass: `[n, C, H, W]` noise and `[n, 1, H, W]` mask.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub dynamic: Var,
    pub mask: Option<Var>,
}

const MASK_EPS: f32 = 1e-6;

/// The two-head masked denoiser, or its single-head ablation.
#[derive(Debug)]
pub struct MaskedDenoiser {
    arch: ModelConfig,
    max_step: usize,
    dynamic: Head,
    mask: Option<Head>,
    params: ParamSet,
    dynamic_evals: AtomicU64,
    mask_evals: AtomicU64,
}

impl Clone for MaskedDenoiser {
    fn clone(&self) -> Self {
        self.with_params(self.params.clone()).expect("same layout")
    }
}

impl MaskedDenoiser {
    pub fn new(arch: &ModelConfig, max_step: usize, rng: &mut Rng) -> Result<Self> {
        let shape = LatentShape::of(arch);
        if !arch.base_width.is_multiple_of(2) {
            return Err(Error::Config("model.base_width must be even".into()));
        }
        let mut params = ParamSet::new();
        let dynamic = Head::build(
            &mut params,
            rng,
            "dynamic",
            shape,
            arch.base_width,
            arch.adapter_width,
            arch.base_width,
            arch.stages,
            shape.channels,
        );
        let mask = arch.use_mask.then(|| {
            Head::build(
                &mut params,
                rng,
                "mask",
                shape,
                arch.mask_width,
                arch.adapter_width,
                arch.base_width,
                arch.stages,
                1,
            )
        });
        Ok(Self {
            arch: arch.clone(),
            max_step,
            dynamic,
            mask,
            params,
            dynamic_evals: AtomicU64::new(0),
            mask_evals: AtomicU64::new(0),
        })
    }

    /// Same layout, different weights (for example the EMA copy). Counters start at zero.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if params.names() != self.params.names() {
            return Err(invalid("parameter layout does not match this model"));
        }
        let mut check = self.params.clone();
        check.assign(params.tensors().to_vec())?;
        Ok(Self {
            arch: self.arch.clone(),
            max_step: self.max_step,
            dynamic: self.dynamic.clone(),
            mask: self.mask.clone(),
            params,
            dynamic_evals: AtomicU64::new(0),
            mask_evals: AtomicU64::new(0),
        })
    }

    pub fn arch(&self) -> &ModelConfig {
        &self.arch
    }

    pub fn shape(&self) -> LatentShape {
        LatentShape::of(&self.arch)
    }

    pub fn max_step(&self) -> usize {
        self.max_step
    }

    pub fn embed_dim(&self) -> usize {
        self.dynamic.embed_dim
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Per-sample evaluations of `(dynamic, mask)` since construction or the last reset.
    pub fn evaluations(&self) -> (u64, u64) {
        (
            self.dynamic_evals.load(Ordering::Relaxed),
            self.mask_evals.load(Ordering::Relaxed),
        )
    }

    pub fn reset_evaluations(&self) {
        self.dynamic_evals.store(0, Ordering::Relaxed);
        self.mask_evals.store(0, Ordering::Relaxed);
    }

    /// Names of the parameters belonging to each head.
    pub fn head_of(&self, index: usize) -> &'static str {
        if self.params.names()[index].starts_with("mask.") {
            "mask"
        } else {
            "dynamic"
        }
    }

    pub fn render(&self, cond: &ConditionSet) -> Result<RenderedConditions> {
        cond.validate(self.shape(), self.max_step)?;
        Ok(RenderedConditions::render(cond, self.shape()))
    }

    pub fn batch(
        &self,
        y_t: &[Tensor],
        t: &[usize],
        conds: &[RenderedConditions],
    ) -> Result<BatchInputs> {
        for y in y_t {
            self.shape().check(y, "y_t")?;
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > self.max_step) {
            return Err(invalid(format!(
                "timestep {bad} outside 1..={}",
                self.max_step
            )));
        }
        BatchInputs::new(y_t, t, conds, self.embed_dim(), self.max_step)
    }

    /// Record both heads on `tape` using the bound parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        b: &BatchInputs,
        v: &InputVars,
    ) -> Result<HeadVars> {
        let n = b.len() as u64;
        let dynamic = self.dynamic.forward(tape, p, v, &b.prompts)?;
        self.dynamic_evals.fetch_add(n, Ordering::Relaxed);
        let mask = match &self.mask {
            Some(h) => {
                let logits = h.forward(tape, p, v, &b.prompts)?;
                self.mask_evals.fetch_add(n, Ordering::Relaxed);
                let s = tape.sigmoid(logits);
                let s = tape.mul_scalar(s, 1.0 - 2.0 * MASK_EPS);
                Some(tape.add_scalar(s, MASK_EPS))
            }
            None => None,
        };
        Ok(HeadVars { dynamic, mask })
    }

    /// Inference on pre-rendered conditions.
    pub fn predict_rendered(
        &self,
        y_t: &[Tensor],
        t: &[usize],
        conds: &[RenderedConditions],
    ) -> Result<Vec<DenoiserOutput>> {
        let b = self.batch(y_t, t, conds)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let v = InputVars::bind(&mut tape, &b);
        let out = self.forward(&mut tape, &p, &b, &v)?;
        let dynamic = tape.value(out.dynamic).clone();
        let mask = out.mask.map(|m| tape.value(m).clone());
        if !dynamic.is_finite() || mask.as_ref().is_some_and(|m| !m.is_finite()) {
            return Err(Error::Diverged("non-finite network output".into()));
        }
        (0..b.len())
            .map(|i| {
                Ok(DenoiserOutput {
                    dynamic: dynamic.index(i)?,
                    mask: mask.as_ref().map(|m| m.index(i)).transpose()?,
                })
            })
            .collect()
    }

    /// Inference for a batch of `(condition, y_t, t)` triples.
    pub fn predict_batch(
        &self,
        conds: &[ConditionSet],
        y_t: &[Tensor],
        t: &[usize],
    ) -> Result<Vec<DenoiserOutput>> {
        let rendered = conds
            .iter()
            .map(|c| self.render(c))
            .collect::<Result<Vec<_>>>()?;
        self.predict_rendered(y_t, t, &rendered)
    }

    pub fn predict(&self, cond: &ConditionSet, y_t: &Tensor, t: usize) -> Result<DenoiserOutput> {
        Ok(self
            .predict_batch(std::slice::from_ref(cond), std::slice::from_ref(y_t), &[t])?
            .remove(0))
    }

    /// Adapter outputs of the dynamic head, one map per trunk stage.
    pub fn adapter_features(&self, ref_prev: &Tensor, ref_prev2: &Tensor) -> Result<Vec<Tensor>> {
        let shape = self.shape();
        shape.check(ref_prev, "ref_prev")?;
        shape.check(ref_prev2, "ref_prev2")?;
        let pair = Tensor::stack(&[ref_prev.clone(), ref_prev2.clone()])?.reshape(&[
            1,
            2 * shape.channels,
            shape.height,
            shape.width,
        ])?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let r = tape.constant(pair);
        let feats = self.dynamic.adapter(&mut tape, &p, r)?;
        feats
            .into_iter()
            .map(|f| Ok(tape.value(f).index(0)?))
            .collect()
    }
}

/// Null each group (reference pair, anchor, prompt) with probability `rate`.
///
/// Always draws three uniforms so the stream position does not depend on the outcome.
pub fn drop_conditions(cond: &ConditionSet, rate: f64, rng: &mut Rng) -> Result<ConditionSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("drop rate {rate} outside [0, 1]")));
    }
    let u = [rng.uniform(), rng.uniform(), rng.uniform()];
    let mut out = cond.clone();
    if u[0] < rate {
        out.ref_prev = None;
        out.ref_prev2 = None;
    }
    if u[1] < rate {
        out.anchor = None;
    }
    if u[2] < rate {
        out.prompt = None;
    }
    Ok(out)
}

/// Replace each present frame by its forward sample at `t_aug` and record the level.
///
/// Fresh noise is drawn for every present frame, including an anchor left clean.
pub fn augment_conditions(
    cond: &ConditionSet,
    t_aug: usize,
    t_max: usize,
    include_anchor: bool,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<ConditionSet> {
    if t_aug > t_max || t_max > s.steps() {
        return Err(invalid(format!(
            "augmentation level {t_aug} outside 0..={t_max}"
        )));
    }
    let mut out = cond.clone();
    out.aug_level = t_aug;
    let slots: [(&mut Option<Tensor>, bool); 3] = [
        (&mut out.ref_prev, true),
        (&mut out.ref_prev2, true),
        (&mut out.anchor, include_anchor),
    ];
    for (slot, apply) in slots {
        let Some(frame) = slot.as_ref() else {
            continue;
        };
        let eps = Tensor::randn(frame.shape(), rng);
        if apply {
            *slot = Some(noise_to(frame, t_aug, &eps, s)?);
        }
    }
    Ok(out)
}
