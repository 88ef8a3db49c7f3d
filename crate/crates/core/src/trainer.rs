//! Training loop for the masked objective, with EMA tracking and checkpoints.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use mdm_tensor::{ema_update, AdamWConfig, OptimizerState, ParamSet, Rng, RngState, Tape, Tensor};

use crate::config::Config;
use crate::denoiser::{
    augment_conditions, drop_conditions, ConditionSet, InputVars, MaskedDenoiser,
    RenderedConditions,
};
use crate::error::{invalid, Error, Result};
use crate::masked_noise::{blend_on_tape, static_noise};
use crate::rollout::select_train_anchor;
use crate::schedule::{forward_sample, NoiseSchedule};
use crate::toyworld::{ByteReader, Corpus};

/// Whether the loss blends in the learned mask or a constant zero mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Learned,
    ForcedZero,
}

/// Independent random streams consumed by training.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub data: Rng,
    pub noise: Rng,
    pub augment: Rng,
    pub dropout: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let root = Rng::new(seed).split("train");
        Self {
            data: root.split("data"),
            noise: root.split("noise"),
            augment: root.split("augment"),
            dropout: root.split("dropout"),
        }
    }

    fn states(&self) -> [RngState; 4] {
        [
            self.data.state(),
            self.noise.state(),
            self.augment.state(),
            self.dropout.state(),
        ]
    }
}

/// A training example: frame `target` of clip `clip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub clip: usize,
    pub target: usize,
}

/// Draw `n` (clip, target) pairs with `target >= 1`.
pub fn sample_batch(corpus: &Corpus, n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    if corpus.clips.is_empty() {
        return Err(invalid("empty corpus"));
    }
    (0..n)
        .map(|_| {
            let clip = rng.below(corpus.clips.len());
            let len = corpus.clips[clip].frames.len();
            if len < 2 {
                return Err(invalid(format!("clip {clip} has fewer than two frames")));
            }
            Ok(Sample {
                clip,
                target: rng.range_inclusive(1, len - 1),
            })
        })
        .collect()
}

/// Clean conditions for a training sample; the anchor comes from `rng`.
pub fn training_conditions(
    corpus: &Corpus,
    s: Sample,
    window: usize,
    rng: &mut Rng,
) -> Result<ConditionSet> {
    let clip = &corpus.clips[s.clip];
    let f = &clip.frames;
    let prev2 = s.target.saturating_sub(2);
    let anchor = select_train_anchor(s.target, window, rng)?;
    Ok(ConditionSet::full(
        f[s.target - 1].clone(),
        f[prev2].clone(),
        f[anchor].clone(),
        clip.prompt.clone(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub model: MaskedDenoiser,
    pub ema: ParamSet,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub rngs: TrainRngs,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let init = Rng::new(config.seed).split("init");
        let model = MaskedDenoiser::new(&config.model, config.schedule.steps, &mut init.clone())?;
        let optimizer = OptimizerState::new(adamw(config), model.params());
        Ok(Self {
            config: config.clone(),
            ema: model.params().clone(),
            model,
            optimizer,
            step: 0,
            rngs: TrainRngs::new(config.seed),
        })
    }

    /// The model carrying EMA weights, for sampling.
    pub fn ema_model(&self) -> Result<MaskedDenoiser> {
        self.model.with_params(self.ema.clone())
    }
}

pub fn adamw(c: &Config) -> AdamWConfig {
    AdamWConfig {
        lr: c.train.lr,
        beta1: c.train.beta1,
        beta2: c.train.beta2,
        eps: c.train.eps,
        weight_decay: c.train.weight_decay,
    }
}

/// One optimisation step over a freshly drawn batch.
pub fn train_step(
    state: &mut TrainState,
    corpus: &Corpus,
    s: &NoiseSchedule,
    mode: MaskMode,
) -> Result<StepStats> {
    let cfg = &state.config;
    let n = cfg.train.batch_size;
    let model = &state.model;
    let samples = sample_batch(corpus, n, &mut state.rngs.data)?;
    let mut y_t = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    let mut rendered = Vec::with_capacity(n);
    for smp in &samples {
        let cond =
            training_conditions(corpus, *smp, cfg.train.anchor_window, &mut state.rngs.data)?;
        let t = state.rngs.noise.range_inclusive(1, s.steps());
        let e = Tensor::randn(&model.shape().dims(), &mut state.rngs.noise);
        let t_aug = state.rngs.augment.range_inclusive(0, cfg.train.t_max);
        let cond = augment_conditions(
            &cond,
            t_aug,
            cfg.train.t_max,
            true,
            s,
            &mut state.rngs.augment,
        )?;
        let cond = drop_conditions(&cond, cfg.train.drop_rate, &mut state.rngs.dropout)?;
        let y0 = &corpus.clips[smp.clip].frames[smp.target];
        y_t.push(forward_sample(y0, t, &e, s)?);
        eps.push(e);
        ts.push(t);
        rendered.push(model.render(&cond)?);
    }
    let batch = model.batch(&y_t, &ts, &rendered)?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let inputs = InputVars::bind(&mut tape, &batch);
    let heads = model.forward(&mut tape, &bound, &batch, &inputs)?;
    let eps_hat = match (heads.mask, mode) {
        (None, _) => heads.dynamic,
        (Some(m), mode) => {
            let refs: Vec<Tensor> = rendered
                .iter()
                .map(|r: &RenderedConditions| r.ref_prev.clone())
                .collect();
            let st = static_noise(
                cfg.model.static_noise,
                &Tensor::stack(&refs)?,
                &batch.y_t,
                &ts,
                s,
            )?;
            let st = tape.constant(st);
            let m = match mode {
                MaskMode::Learned => m,
                MaskMode::ForcedZero => tape.constant(Tensor::zeros(tape.value(m).shape())),
            };
            blend_on_tape(&mut tape, m, st, heads.dynamic)?
        }
    };
    let target = tape.constant(Tensor::stack(&eps)?);
    let loss = tape.mse(eps_hat, target)?;
    let loss_value = tape.value(loss).item()? as f64;
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss at step {}",
            state.step + 1
        )));
    }
    let grads = tape.backward(loss)?;
    let grads = bound.collect_grads(&tape, &grads);
    let grad_norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite gradient at step {}",
            state.step + 1
        )));
    }
    state.optimizer.step(state.model.params_mut(), &grads)?;
    ema_update(
        &mut state.ema,
        state.model.params(),
        state.config.train.ema_decay,
    )?;
    state.step += 1;
    Ok(StepStats {
        step: state.step,
        loss: loss_value,
        grad_norm,
    })
}

/// Train until `state.step == until`, writing a CSV row every `log_every` steps.
pub fn train_until(
    state: &mut TrainState,
    corpus: &Corpus,
    until: u64,
    mode: MaskMode,
    mut log: Option<&mut csv::Writer<std::fs::File>>,
) -> Result<Vec<StepStats>> {
    let s = state.config.schedule()?;
    let every = state.config.train.log_every as u64;
    let started = Instant::now();
    let mut history = Vec::new();
    while state.step < until {
        let st = train_step(state, corpus, &s, mode)?;
        if let Some(w) = log.as_deref_mut() {
            if st.step % every == 0 || st.step == until {
                w.write_record([
                    st.step.to_string(),
                    format!("{:.6}", st.loss),
                    format!("{:.6}", st.grad_norm),
                    format!("{:.3}", started.elapsed().as_secs_f64()),
                ])?;
                w.flush()?;
            }
        }
        history.push(st);
    }
    Ok(history)
}

pub const LOG_HEADER: [&str; 4] = ["step", "loss", "grad_norm", "wall_time_s"];

const CKPT_MAGIC: &[u8; 8] = b"MDMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_rng(out: &mut Vec<u8>, s: RngState) {
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.extend_from_slice(&s.stream.to_le_bytes());
    out.extend_from_slice(&s.word_pos.to_le_bytes());
}

impl TrainState {
    /// Versioned binary checkpoint.
    ///
    /// Layout: magic, version, config hash, step, optimiser step, parameter
    /// count, then per parameter its name, raw tensor, EMA tensor and both
    /// moments; the config text; finally the four RNG positions.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.training_hash());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let p = self.model.params();
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        for (i, (name, t)) in p.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
            put_tensor(&mut out, &self.ema.tensors()[i]);
            put_tensor(&mut out, &self.optimizer.first_moment[i]);
            put_tensor(&mut out, &self.optimizer.second_moment[i]);
        }
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for s in self.rngs.states() {
            put_rng(&mut out, s);
        }
        out
    }

    /// Parse a checkpoint; `expect` (when given) must match its training hash.
    pub fn from_bytes(bytes: &[u8], path: &Path, expect: Option<&Config>) -> Result<Self> {
        let corrupt = |why: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: why.to_string(),
        };
        let incompatible = |why: String| Error::Incompatible {
            path: path.to_path_buf(),
            reason: why,
        };
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8) != Some(CKPT_MAGIC.as_slice()) {
            return Err(corrupt("bad magic or truncated header"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(incompatible(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hash: [u8; 32] = r
            .take(32)
            .ok_or_else(|| corrupt("truncated header"))?
            .try_into()
            .unwrap();
        let step = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let opt_step = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let count = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let read_tensor = |r: &mut ByteReader| -> Result<Tensor> {
            let nd = r.u32().ok_or_else(|| corrupt("truncated tensor"))? as usize;
            if nd == 0 || nd > 8 {
                return Err(corrupt("bad tensor rank"));
            }
            let mut dims = Vec::with_capacity(nd);
            for _ in 0..nd {
                dims.push(r.u32().ok_or_else(|| corrupt("truncated tensor"))? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r
                .take(
                    n.checked_mul(4)
                        .ok_or_else(|| corrupt("tensor too large"))?,
                )
                .ok_or_else(|| corrupt("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(&dims, data).map_err(|_| corrupt("bad tensor shape"))
        };
        let mut names = Vec::with_capacity(count.min(4096));
        let mut raw = Vec::new();
        let mut ema = Vec::new();
        let mut m1 = Vec::new();
        let mut m2 = Vec::new();
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| corrupt("truncated name"))? as usize;
            let name = r.take(len).ok_or_else(|| corrupt("truncated name"))?;
            names.push(String::from_utf8(name.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?);
            raw.push(read_tensor(&mut r)?);
            ema.push(read_tensor(&mut r)?);
            m1.push(read_tensor(&mut r)?);
            m2.push(read_tensor(&mut r)?);
        }
        let tlen = r.u32().ok_or_else(|| corrupt("truncated config"))? as usize;
        let text = r.take(tlen).ok_or_else(|| corrupt("truncated config"))?;
        let text = std::str::from_utf8(text).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = Config::parse(text).map_err(|e| corrupt(&format!("embedded config: {e}")))?;
        let mut rng_states = Vec::with_capacity(4);
        for _ in 0..4 {
            let seed = r.u64().ok_or_else(|| corrupt("truncated RNG state"))?;
            let stream = r.u64().ok_or_else(|| corrupt("truncated RNG state"))?;
            let lo = r.take(16).ok_or_else(|| corrupt("truncated RNG state"))?;
            let word_pos = u128::from_le_bytes(lo.try_into().unwrap());
            rng_states.push(RngState {
                seed,
                stream,
                word_pos,
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if config.training_hash() != hash {
            return Err(corrupt("config hash does not match embedded config"));
        }
        if let Some(want) = expect {
            if want.training_hash() != hash {
                return Err(incompatible(
                    "checkpoint was trained under a different configuration".into(),
                ));
            }
        }
        let mut state = TrainState::new(&config)?;
        if state.model.params().names() != names.as_slice() {
            return Err(incompatible(
                "parameter layout differs from the configured architecture".into(),
            ));
        }
        state
            .model
            .params_mut()
            .assign(raw)
            .map_err(|e| incompatible(e.to_string()))?;
        state
            .ema
            .assign(ema)
            .map_err(|e| incompatible(e.to_string()))?;
        state.optimizer.first_moment = m1;
        state.optimizer.second_moment = m2;
        state.optimizer.step = opt_step;
        state.step = step;
        state.rngs = TrainRngs {
            data: Rng::from_state(rng_states[0]),
            noise: Rng::from_state(rng_states[1]),
            augment: Rng::from_state(rng_states[2]),
            dropout: Rng::from_state(rng_states[3]),
        };
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expect: Option<&Config>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path, expect)
    }
}
