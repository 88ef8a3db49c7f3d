//! Drift against the toy-world ground truth, and mask trends over sampling steps.

use mdm_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::sampler::MaskTrace;

/// Peak-to-peak range of toy latents, used as the PSNR peak.
pub const PSNR_PEAK: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    /// Least-squares slope of MSE against frame index over frames `>= 1`.
    pub slope: f64,
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "mse: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let acc: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(acc / a.numel() as f64)
}

/// `10 log10(peak^2 / mse)`; infinite for a perfect match.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

/// Least-squares slope of `ys` against `xs`; zero with fewer than two points.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Per-frame error of a rollout against the ground-truth continuation.
pub fn drift_curve(generated: &[Tensor], oracle: &[Tensor]) -> Result<DriftReport> {
    if generated.len() != oracle.len() || generated.is_empty() {
        return Err(invalid(format!(
            "drift: {} generated frames vs {} oracle frames",
            generated.len(),
            oracle.len()
        )));
    }
    let mse: Vec<f64> = generated
        .iter()
        .zip(oracle)
        .map(|(g, o)| mse(g, o))
        .collect::<Result<_>>()?;
    let psnr = mse.iter().map(|&m| psnr(m)).collect();
    let xs: Vec<f64> = (1..mse.len()).map(|i| i as f64).collect();
    let slope = ls_slope(&xs, &mse[1..]);
    Ok(DriftReport { mse, psnr, slope })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTrend {
    /// Mean mask value at each sampling step, averaged over traces.
    pub per_step: Vec<f64>,
    pub first_decile: f64,
    pub last_decile: f64,
}

impl MaskTrend {
    pub fn delta(&self) -> f64 {
        self.last_decile - self.first_decile
    }

    pub fn increasing(&self) -> bool {
        self.last_decile > self.first_decile
    }
}

/// Average traces step by step and compare the first and last tenth of the steps.
pub fn mask_trend(traces: &[MaskTrace]) -> Result<MaskTrend> {
    let n = traces.first().map(|t| t.steps.len()).unwrap_or(0);
    if n == 0 || traces.iter().any(|t| t.steps.len() != n) {
        return Err(invalid("mask trend needs non-empty traces of equal length"));
    }
    let per_step: Vec<f64> = (0..n)
        .map(|i| traces.iter().map(|t| t.steps[i].mean).sum::<f64>() / traces.len() as f64)
        .collect();
    let k = (n / 10).max(1);
    let first_decile = per_step[..k].iter().sum::<f64>() / k as f64;
    let last_decile = per_step[n - k..].iter().sum::<f64>() / k as f64;
    Ok(MaskTrend {
        per_step,
        first_decile,
        last_decile,
    })
}
