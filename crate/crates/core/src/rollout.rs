//! Auto-regressive video construction.
//!
//! Frame `i >= 1` is sampled under `(y[i-1], y[i-2], anchor, prompt)` with
//! `y[-1] := y[0]`. Inside a segment the anchor is fixed; a later segment
//! anchors on the final frame of the segment before it and keeps the
//! global two-frame history.

use std::path::Path;

use mdm_tensor::{Rng, Tensor};

use crate::config::Config;
use crate::denoiser::{augment_conditions, ConditionSet, MaskedDenoiser};
use crate::error::{invalid, Error, Result};
use crate::sampler::{sample_frame, MaskTrace, SamplerSettings};
use crate::schedule::NoiseSchedule;
use crate::toyworld::PromptVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AnchorPolicy {
    /// The first frame of the segment.
    #[default]
    SegmentStart,
    /// An all-zero frame.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub sampler: SamplerSettings,
    pub t_test: usize,
    pub augment_anchor: bool,
    pub anchor: AnchorPolicy,
}

impl RolloutConfig {
    pub fn from_config(c: &Config) -> Self {
        Self {
            sampler: SamplerSettings {
                steps: c.sampler.steps,
                guidance: c.sampler.guidance,
                clip_x0: c.sampler.clip_x0,
                static_noise: c.model.static_noise,
            },
            t_test: c.sampler.t_test,
            augment_anchor: c.sampler.augment_anchor,
            anchor: if c.sampler.zero_anchor {
                AnchorPolicy::Zero
            } else {
                AnchorPolicy::SegmentStart
            },
        }
    }
}

/// Generated frames with everything needed to audit them afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub frames: Vec<Tensor>,
    /// Anchor in force for the most recent segment.
    pub anchor: Tensor,
    pub prompt: Vec<usize>,
    /// One trace per sampled frame; a provided first frame has none.
    pub traces: Vec<Option<MaskTrace>>,
    /// Global index of each segment's first frame.
    pub segment_starts: Vec<usize>,
}

impl RolloutState {
    /// Root-mean-square value of every frame.
    pub fn frame_rms(&self) -> Vec<f64> {
        self.frames
            .iter()
            .map(|f| {
                (f.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / f.numel() as f64)
                    .sqrt()
            })
            .collect()
    }
}

/// One `(frame_count, prompt)` entry per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    pub segments: Vec<(Vec<usize>, usize)>,
}

impl SegmentPlan {
    pub fn new(segments: Vec<(Vec<usize>, usize)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(invalid("segment plan is empty"));
        }
        if segments.iter().any(|(_, n)| *n == 0) {
            return Err(invalid("every segment needs at least one frame"));
        }
        Ok(Self { segments })
    }

    /// Lines of `frame_count<TAB>prompt tokens`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let vocab = PromptVocab;
        let mut segments = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (n, prompt) = line.split_once('\t').ok_or_else(|| {
                invalid(format!("plan line {}: expected count<TAB>prompt", no + 1))
            })?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| invalid(format!("plan line {}: bad frame count {n:?}", no + 1)))?;
            segments.push((vocab.encode(prompt)?, n));
        }
        Self::new(segments)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }
}

/// Uniform index in `[max(0, target - window), target - 1]`.
pub fn select_train_anchor(target: usize, window: usize, rng: &mut Rng) -> Result<usize> {
    if target == 0 || window == 0 {
        return Err(invalid(
            "anchor selection needs target >= 1 and window >= 1",
        ));
    }
    let lo = target.saturating_sub(window);
    Ok(rng.range_inclusive(lo, target - 1))
}

/// Conditions for global frame `i >= 1` before augmentation.
pub fn frame_conditions(
    frames: &[Tensor],
    i: usize,
    anchor: &Tensor,
    prompt: &[usize],
) -> Result<ConditionSet> {
    if i == 0 || i > frames.len() {
        return Err(invalid(format!(
            "frame {i} has no history in {} frames",
            frames.len()
        )));
    }
    let prev = frames[i - 1].clone();
    let prev2 = if i >= 2 {
        frames[i - 2].clone()
    } else {
        frames[0].clone()
    };
    Ok(ConditionSet::full(
        prev,
        prev2,
        anchor.clone(),
        prompt.to_vec(),
    ))
}

/// Return `provided`, or sample a frame with references and anchor blank.
pub fn bootstrap_first_frame(
    prompt: &[usize],
    model: &MaskedDenoiser,
    cfg: &RolloutConfig,
    s: &NoiseSchedule,
    rng: &mut Rng,
    provided: Option<&Tensor>,
) -> Result<(Tensor, Option<MaskTrace>)> {
    if let Some(f) = provided {
        model.shape().check(f, "first frame")?;
        return Ok((f.clone(), None));
    }
    let cond = ConditionSet {
        prompt: Some(prompt.to_vec()),
        ..ConditionSet::empty()
    };
    let (f, trace) = sample_frame(model, &cond, s, &cfg.sampler, rng)?;
    Ok((f, Some(trace)))
}

fn segment_anchor(policy: AnchorPolicy, frame: &Tensor) -> Tensor {
    match policy {
        AnchorPolicy::SegmentStart => frame.clone(),
        AnchorPolicy::Zero => Tensor::zeros(frame.shape()),
    }
}

/// Run a plan, returning whatever was generated and the error that stopped it, if any.
pub fn generate_plan_partial(
    plan: &SegmentPlan,
    model: &MaskedDenoiser,
    cfg: &RolloutConfig,
    s: &NoiseSchedule,
    rng: &Rng,
    first: Option<&Tensor>,
) -> (Option<RolloutState>, Option<Error>) {
    let (prompt0, _) = &plan.segments[0];
    let mut r0 = rng.split_index(0);
    let (f0, t0) = match bootstrap_first_frame(prompt0, model, cfg, s, &mut r0, first) {
        Ok(v) => v,
        Err(e) => return (None, Some(e)),
    };
    let mut st = RolloutState {
        anchor: segment_anchor(cfg.anchor, &f0),
        frames: vec![f0],
        prompt: prompt0.clone(),
        traces: vec![t0],
        segment_starts: vec![0],
    };
    for (k, (prompt, count)) in plan.segments.iter().enumerate() {
        let start = st.frames.len();
        if k > 0 {
            st.anchor = segment_anchor(cfg.anchor, &st.frames[start - 1]);
            st.prompt = prompt.clone();
            st.segment_starts.push(start);
        }
        let end = if k == 0 { *count } else { start + count };
        for i in st.frames.len()..end {
            let step = || -> Result<(Tensor, MaskTrace)> {
                let base = rng.split_index(i as u64);
                let cond = frame_conditions(&st.frames, i, &st.anchor, prompt)?;
                let cond = augment_conditions(
                    &cond,
                    cfg.t_test,
                    cfg.t_test,
                    cfg.augment_anchor,
                    s,
                    &mut base.split("augment"),
                )?;
                sample_frame(model, &cond, s, &cfg.sampler, &mut base.split("sample"))
            };
            match step() {
                Ok((f, trace)) => {
                    st.frames.push(f);
                    st.traces.push(Some(trace));
                }
                Err(e) => return (Some(st), Some(e)),
            }
        }
    }
    (Some(st), None)
}

/// Single-prompt rollout of `n_frames`.
pub fn generate_video(
    prompt: &[usize],
    n_frames: usize,
    model: &MaskedDenoiser,
    cfg: &RolloutConfig,
    s: &NoiseSchedule,
    rng: &Rng,
    first: Option<&Tensor>,
) -> Result<RolloutState> {
    let plan = SegmentPlan::new(vec![(prompt.to_vec(), n_frames)])?;
    generate_multi_prompt(&plan, model, cfg, s, rng, first)
}

pub fn generate_multi_prompt(
    plan: &SegmentPlan,
    model: &MaskedDenoiser,
    cfg: &RolloutConfig,
    s: &NoiseSchedule,
    rng: &Rng,
    first: Option<&Tensor>,
) -> Result<RolloutState> {
    match generate_plan_partial(plan, model, cfg, s, rng, first) {
        (Some(st), None) => Ok(st),
        (_, Some(e)) => Err(e),
        (None, None) => unreachable!("a rollout either produces a state or an error"),
    }
}
