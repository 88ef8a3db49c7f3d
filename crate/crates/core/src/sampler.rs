//! Per-frame sampling with three-way classifier-free guidance.

use mdm_tensor::{Rng, Tensor};

use crate::denoiser::{ConditionSet, DenoiserOutput, MaskedDenoiser, RenderedConditions};
use crate::error::{invalid, Error, Result};
use crate::masked_noise::{blend, static_noise, StaticNoise};
use crate::schedule::{ancestral_step_clipped, strided_steps, NoiseSchedule};

/// Values beyond this magnitude during sampling count as divergence.
pub const DIVERGENCE_LIMIT: f32 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub w_ref: f32,
    pub w_anc: f32,
    pub w_txt: f32,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            w_ref: 0.25,
            w_anc: 0.25,
            w_txt: 6.5,
        }
    }
}

impl GuidanceScales {
    pub const ZERO: Self = Self {
        w_ref: 0.0,
        w_anc: 0.0,
        w_txt: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.w_ref.is_finite() && self.w_anc.is_finite() && self.w_txt.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub mean: f64,
    pub min: f32,
    pub max: f32,
}

impl MaskStats {
    pub fn of(m: &Tensor) -> Self {
        let (min, max) = m
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self {
            mean: m.mean(),
            min,
            max,
        }
    }
}

/// Full-condition mask statistics, one record per executed sampling step.
///
/// The single-head variant blends nothing in and records zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskTrace {
    pub steps: Vec<MaskStats>,
}

impl MaskTrace {
    pub fn means(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mean).collect()
    }
}

/// `full + w_ref (full - no_ref) + w_anc (full - no_anchor) + w_txt (full - no_text)`.
pub fn cfg_compose(
    full: &Tensor,
    no_ref: &Tensor,
    no_anchor: &Tensor,
    no_text: &Tensor,
    g: GuidanceScales,
) -> Result<Tensor> {
    for other in [no_ref, no_anchor, no_text] {
        if other.shape() != full.shape() {
            return Err(invalid(format!(
                "cfg: shape {:?} vs {:?}",
                other.shape(),
                full.shape()
            )));
        }
    }
    let out = full
        .data()
        .iter()
        .zip(no_ref.data())
        .zip(no_anchor.data())
        .zip(no_text.data())
        .map(|(((&f, &r), &a), &t)| f + g.w_ref * (f - r) + g.w_anc * (f - a) + g.w_txt * (f - t))
        .collect();
    Ok(Tensor::from_vec(full.shape(), out)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance: GuidanceScales,
    pub clip_x0: Option<f32>,
    pub static_noise: StaticNoise,
}

/// Blended noise `m * static + (1 - m) * dynamic`, or the raw prediction without a mask head.
pub fn blended_noise(
    out: &DenoiserOutput,
    ref_prev: &Tensor,
    y_t: &Tensor,
    t: usize,
    mode: StaticNoise,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    match &out.mask {
        None => Ok(out.dynamic.clone()),
        Some(m) => {
            let st = static_noise(mode, ref_prev, y_t, &[t], s)?;
            blend(m, &st, &out.dynamic)
        }
    }
}

fn check_envelope(x: &Tensor, t: usize) -> Result<()> {
    if !x.is_finite() || x.max_abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged(format!(
            "sample left the envelope at t={t} (max |x| = {})",
            x.max_abs()
        )));
    }
    Ok(())
}

/// Denoise one frame from pure noise under `cond`.
///
/// Every step evaluates both heads on four condition sets (full, no refs,
/// no anchor, no prompt) in one batch, blends each with its own static
/// channel and composes them with `cfg_compose`.
pub fn sample_frame(
    model: &MaskedDenoiser,
    cond: &ConditionSet,
    s: &NoiseSchedule,
    settings: &SamplerSettings,
    rng: &mut Rng,
) -> Result<(Tensor, MaskTrace)> {
    if settings.steps == 0 || settings.steps > s.steps() {
        return Err(invalid(format!(
            "sampler steps {} outside 1..={}",
            settings.steps,
            s.steps()
        )));
    }
    let branches = [
        cond.clone(),
        cond.without_refs(),
        cond.without_anchor(),
        cond.without_prompt(),
    ];
    let rendered: Vec<RenderedConditions> = branches
        .iter()
        .map(|c| model.render(c))
        .collect::<Result<_>>()?;
    let steps = strided_steps(s.steps(), settings.steps)?;
    let shape = model.shape().dims();
    let mut y = Tensor::randn(&shape, rng);
    let mut trace = MaskTrace::default();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let outs = model.predict_rendered(
            &[y.clone(), y.clone(), y.clone(), y.clone()],
            &[t; 4],
            &rendered,
        )?;
        let eps: Vec<Tensor> = outs
            .iter()
            .zip(&rendered)
            .map(|(o, r)| blended_noise(o, &r.ref_prev, &y, t, settings.static_noise, s))
            .collect::<Result<_>>()?;
        trace.steps.push(match &outs[0].mask {
            Some(m) => MaskStats::of(m),
            None => MaskStats {
                mean: 0.0,
                min: 0.0,
                max: 0.0,
            },
        });
        let guided = cfg_compose(&eps[0], &eps[1], &eps[2], &eps[3], settings.guidance)?;
        let noise = Tensor::randn(&shape, rng);
        y = ancestral_step_clipped(&y, &guided, t, t_prev, s, &noise, settings.clip_x0)?;
        check_envelope(&y, t)?;
    }
    Ok((y, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scales_return_full_bitwise() {
        let mut rng = Rng::new(1);
        let t: Vec<Tensor> = (0..4)
            .map(|_| Tensor::randn(&[1, 4, 4], &mut rng))
            .collect();
        let out = cfg_compose(&t[0], &t[1], &t[2], &t[3], GuidanceScales::ZERO).unwrap();
        assert_eq!(out, t[0]);
    }

    #[test]
    fn equal_branches_return_full() {
        let f = Tensor::randn(&[2, 3, 3], &mut Rng::new(2));
        let out = cfg_compose(&f, &f, &f, &f, GuidanceScales::default()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn scalar_reference_example() {
        let one = Tensor::ones(&[1]);
        let zero = Tensor::zeros(&[1]);
        let g = GuidanceScales {
            w_ref: 0.25,
            ..GuidanceScales::ZERO
        };
        assert_eq!(
            cfg_compose(&one, &zero, &one, &one, g).unwrap().data(),
            &[1.25]
        );
        assert!(cfg_compose(&one, &Tensor::zeros(&[2]), &one, &one, g).is_err());
    }

    #[test]
    fn defaults() {
        let g = GuidanceScales::default();
        assert_eq!((g.w_ref, g.w_anc, g.w_txt), (0.25, 0.25, 6.5));
    }
}
