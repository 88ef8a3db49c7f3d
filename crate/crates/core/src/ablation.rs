//! Ablation harness: train or load one model per training variant and seed,
//! roll each arm out against held-out toy clips and compare drift.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mdm_tensor::Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::denoiser::{LatentShape, MaskedDenoiser};
use crate::error::{invalid, Error, Result};
use crate::metrics::{drift_curve, mask_trend, DriftReport, MaskTrend};
use crate::rollout::{generate_video, AnchorPolicy, RolloutConfig};
use crate::sampler::MaskTrace;
use crate::toyworld::{gen_clip, Corpus, PromptVocab, ToyClip};
use crate::trainer::{train_until, MaskMode, TrainState};

/// The t_test values of the default sweep.
pub const DEFAULT_T_SWEEP: [usize; 4] = [0, 100, 200, 400];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationArm {
    Full,
    NoMask,
    ZeroAnchor,
    NoNoiseAug,
    TTest(usize),
}

impl AblationArm {
    pub fn name(&self) -> String {
        match self {
            AblationArm::Full => "full".into(),
            AblationArm::NoMask => "no_mask".into(),
            AblationArm::ZeroAnchor => "zero_anchor".into(),
            AblationArm::NoNoiseAug => "no_noise_aug".into(),
            AblationArm::TTest(t) => format!("t_test_{t}"),
        }
    }

    /// Name of the trained model the arm samples from.
    pub fn training_variant(&self) -> &'static str {
        match self {
            AblationArm::NoMask => "no_mask",
            AblationArm::NoNoiseAug => "no_noise_aug",
            _ => "full",
        }
    }

    /// Configuration used to train the arm's model.
    pub fn train_config(&self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            AblationArm::NoMask => c.model.use_mask = false,
            AblationArm::NoNoiseAug => c.train.t_max = 0,
            _ => {}
        }
        c
    }

    /// Configuration used to sample from the arm's model.
    pub fn infer_config(&self, base: &Config) -> Config {
        let mut c = self.train_config(base);
        match self {
            AblationArm::ZeroAnchor => c.sampler.zero_anchor = true,
            AblationArm::NoNoiseAug => c.sampler.t_test = 0,
            AblationArm::TTest(t) => c.sampler.t_test = *t,
            _ => {}
        }
        c
    }
}

/// Which comparison to run. Every mode except `Full` also runs the full arm as baseline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AblationSpec {
    Full,
    NoMask,
    ZeroAnchor,
    NoNoiseAug,
    TTestSweep(Vec<usize>),
}

impl AblationSpec {
    pub fn parse(mode: &str, t_values: Option<&[usize]>) -> Result<Self> {
        Ok(match mode {
            "full" => AblationSpec::Full,
            "no_mask" => AblationSpec::NoMask,
            "zero_anchor" => AblationSpec::ZeroAnchor,
            "no_noise_aug" => AblationSpec::NoNoiseAug,
            "t_test_sweep" => {
                let ts = t_values
                    .map(<[usize]>::to_vec)
                    .unwrap_or_else(|| DEFAULT_T_SWEEP.to_vec());
                if ts.is_empty() {
                    return Err(invalid("t_test sweep needs at least one value"));
                }
                AblationSpec::TTestSweep(ts)
            }
            other => return Err(invalid(format!("unknown ablation mode {other:?}"))),
        })
    }

    pub fn arms(&self) -> Vec<AblationArm> {
        match self {
            AblationSpec::Full => vec![AblationArm::Full],
            AblationSpec::NoMask => vec![AblationArm::Full, AblationArm::NoMask],
            AblationSpec::ZeroAnchor => vec![AblationArm::Full, AblationArm::ZeroAnchor],
            AblationSpec::NoNoiseAug => vec![AblationArm::Full, AblationArm::NoNoiseAug],
            AblationSpec::TTestSweep(ts) => ts.iter().map(|&t| AblationArm::TTest(t)).collect(),
        }
    }
}

/// Held-out clips whose first frame and prompt seed each rollout.
pub fn eval_clips(n: usize, frames: usize, shape: LatentShape, seed: u64) -> Result<Vec<ToyClip>> {
    let prompts: Vec<Vec<usize>> = PromptVocab
        .corpus_prompts()
        .into_iter()
        .filter(|p| {
            PromptVocab
                .velocity(p)
                .map(|v| v != (0.0, 0.0))
                .unwrap_or(false)
        })
        .collect();
    let root = Rng::new(seed).split("eval-clips");
    (0..n)
        .map(|i| {
            let mut r = root.split_index(i as u64);
            gen_clip(&prompts[i % prompts.len()], frames, shape, &mut r)
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, variant: &str, seed: u64) -> PathBuf {
    dir.join(format!("{variant}_seed{seed}.ckpt"))
}

/// Train every (variant, seed) model the ablation needs that is not yet on disk.
pub fn train_missing(
    spec: &AblationSpec,
    base: &Config,
    corpus: &Corpus,
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut jobs: BTreeMap<(&'static str, u64), Config> = BTreeMap::new();
    for arm in spec.arms() {
        for &seed in seeds {
            let mut c = arm.train_config(base);
            c.seed = seed;
            jobs.insert((arm.training_variant(), seed), c);
        }
    }
    let todo: Vec<_> = jobs
        .into_iter()
        .filter(|((v, s), _)| !checkpoint_path(dir, v, *s).exists())
        .collect();
    todo.par_iter()
        .map(|((variant, seed), c)| {
            let mut st = TrainState::new(c)?;
            train_until(
                &mut st,
                corpus,
                c.train.steps as u64,
                MaskMode::Learned,
                None,
            )?;
            let p = checkpoint_path(dir, variant, *seed);
            st.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// Drift and mask statistics of one arm for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: AblationArm,
    pub seed: u64,
    pub corpus_digest: String,
    pub train_steps: u64,
    pub config_hash: String,
    pub drift: Vec<DriftReport>,
    /// Per-frame MSE averaged over evaluation clips.
    pub mean_mse: Vec<f64>,
    pub mask: Option<MaskTrend>,
    pub failures: usize,
}

impl ArmResult {
    pub fn mse_at(&self, frame: usize) -> Option<f64> {
        self.mean_mse.get(frame).copied()
    }
}

/// Roll `model` out from each evaluation clip's first frame under its prompt.
pub fn evaluate_model(
    model: &MaskedDenoiser,
    infer: &Config,
    clips: &[ToyClip],
    sample_seed: u64,
) -> Result<(Vec<DriftReport>, Vec<MaskTrace>, usize)> {
    let s = infer.schedule()?;
    let mut rc = RolloutConfig::from_config(infer);
    if infer.sampler.zero_anchor {
        rc.anchor = AnchorPolicy::Zero;
    }
    let root = Rng::new(sample_seed).split("eval-sampling");
    let results: Vec<Result<_>> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let r = generate_video(
                &clip.prompt,
                clip.frames.len(),
                model,
                &rc,
                &s,
                &root.split_index(i as u64),
                Some(&clip.frames[0]),
            )?;
            Ok((
                drift_curve(&r.frames, &clip.frames)?,
                r.traces.into_iter().flatten().collect::<Vec<_>>(),
            ))
        })
        .collect();
    let mut drift = Vec::new();
    let mut traces = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok((d, t)) => {
                drift.push(d);
                traces.extend(t);
            }
            Err(Error::Diverged(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((drift, traces, failures))
}

fn mean_curve(drift: &[DriftReport], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|i| {
            if drift.is_empty() {
                f64::NAN
            } else {
                drift.iter().map(|d| d.mse[i]).sum::<f64>() / drift.len() as f64
            }
        })
        .collect()
}

/// Evaluate every arm of `spec` for every seed from checkpoints in `dir`.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &Config,
    corpus: &Corpus,
    seeds: &[u64],
    dir: &Path,
    clips: &[ToyClip],
) -> Result<Vec<ArmResult>> {
    run_arms(&spec.arms(), base, corpus, seeds, dir, clips)
}

/// Evaluate the given arms for every seed from checkpoints in `dir`.
pub fn run_arms(
    arms: &[AblationArm],
    base: &Config,
    corpus: &Corpus,
    seeds: &[u64],
    dir: &Path,
    clips: &[ToyClip],
) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() || clips.is_empty() {
        return Err(invalid(
            "ablation needs at least one seed and one evaluation clip",
        ));
    }
    let digest = corpus.digest()?;
    let frames = clips[0].frames.len();
    let mut out = Vec::new();
    for &arm in arms {
        for &seed in seeds {
            let mut tc = arm.train_config(base);
            tc.seed = seed;
            let p = checkpoint_path(dir, arm.training_variant(), seed);
            if !p.exists() {
                return Err(Error::Missing(p.display().to_string()));
            }
            let st = TrainState::load(&p, Some(&tc))?;
            let mut ic = arm.infer_config(base);
            ic.seed = seed;
            let model = st.ema_model()?;
            let (drift, traces, failures) = evaluate_model(&model, &ic, clips, seed)?;
            let mask = if model.has_mask() && !traces.is_empty() {
                Some(mask_trend(&traces)?)
            } else {
                None
            };
            out.push(ArmResult {
                arm,
                seed,
                corpus_digest: digest.clone(),
                train_steps: st.step,
                config_hash: tc
                    .training_hash()
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect(),
                mean_mse: mean_curve(&drift, frames),
                drift,
                mask,
                failures,
            });
        }
    }
    Ok(out)
}

/// Per-arm mean over seeds of the frame-`frame` MSE.
pub fn seed_mean_at(results: &[ArmResult], arm: AblationArm, frame: usize) -> Option<f64> {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.arm == arm)
        .filter_map(|r| r.mse_at(frame))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
