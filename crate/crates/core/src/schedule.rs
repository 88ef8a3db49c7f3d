//! Linear beta schedule, closed-form forward noising, and ancestral reverse
//! steps over a strided subset of timesteps.
//!
//! Timesteps run `1..=T`. Step `0` is clean data: `alpha_bar(0) == 1`, so
//! `sigma(0) == 1` and `lambda(0) == 0`.

use mdm_tensor::Tensor;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` betas evenly spaced from `beta_start` to `beta_end`, both included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} .. {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let lambda = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            lambda,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(invalid(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `1 <= t <= T`; zero at `t == 0`.
    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Signal coefficient `sqrt(alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.sigma[t - 1]
        }
    }

    /// Noise coefficient `sqrt(1 - alpha_bar_t)`.
    pub fn lambda(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.lambda[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sigma_t * y0 + lambda_t * eps`, valid for `0 <= t <= T`.
pub(crate) fn noise_to(y0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    if t == 0 {
        if y0.shape() != eps.shape() {
            return Err(invalid(format!(
                "shape {:?} vs {:?}",
                y0.shape(),
                eps.shape()
            )));
        }
        return Ok(y0.clone());
    }
    let (a, b) = (s.sigma(t) as f32, s.lambda(t) as f32);
    Ok(y0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Closed-form forward sample `y_t = sigma_t * y0 + lambda_t * eps`, `1 <= t <= T`.
pub fn forward_sample(y0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(invalid("forward_sample needs 1 <= t <= T"));
    }
    noise_to(y0, t, eps, s)
}

/// Clean-sample estimate `(y_t - lambda_t * eps_hat) / sigma_t`.
pub fn predict_x0(y_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    let (a, b) = (s.sigma(t) as f32, s.lambda(t) as f32);
    Ok(y_t.zip_map(eps_hat, |y, e| (y - b * e) / a)?)
}

/// One ancestral DDPM step from `t` to `t_prev` using the `beta~` posterior variance.
///
/// `noise` is ignored when `t_prev == 0`.
pub fn ancestral_step(
    y_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    ancestral_step_clipped(y_t, eps_hat, t, t_prev, s, noise, None)
}

/// [`ancestral_step`] with the clean-sample estimate optionally clamped to `[-c, c]`.
pub fn ancestral_step_clipped(
    y_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
    x0_clip: Option<f32>,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(invalid(format!(
            "ancestral step needs t > t_prev, got {t} -> {t_prev}"
        )));
    }
    s.check(t)?;
    if y_t.shape() != noise.shape() {
        return Err(invalid(format!(
            "noise shape {:?} vs {:?}",
            noise.shape(),
            y_t.shape()
        )));
    }
    let mut x0 = predict_x0(y_t, eps_hat, t, s)?;
    if let Some(c) = x0_clip {
        x0 = x0.map(|v| v.clamp(-c, c));
    }
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let beta_eff = 1.0 - ab / ab_prev;
    let c_x0 = (ab_prev.sqrt() * beta_eff / (1.0 - ab)) as f32;
    let c_xt = ((1.0 - beta_eff).sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
    let mean = x0.zip_map(y_t, |x, y| c_x0 * x + c_xt * y)?;
    if t_prev == 0 {
        return Ok(mean);
    }
    let std = (beta_eff * (1.0 - ab_prev) / (1.0 - ab)).sqrt() as f32;
    Ok(mean.zip_map(noise, |m, z| m + std * z)?)
}

/// `n` evenly spaced timesteps from `T` downward; each transitions to the next,
/// and the last one to `0`.
pub fn strided_steps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(invalid(format!("need 1 <= n <= T, got n={n}, T={total}")));
    }
    Ok((0..n).map(|i| total - i * total / n).collect())
}
