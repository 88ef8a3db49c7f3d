//! Static/dynamic noise algebra of the masked model.
//!
//! The blended prediction is `m * static + (1 - m) * dynamic`, where the
//! static channel is computed from a reference frame and the noised input
//! instead of being predicted.

use mdm_tensor::{Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::schedule::NoiseSchedule;

/// Exact split of the diffusion noise into a reference-derived part and a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub static_noise: Tensor,
    pub dynamic_noise: Tensor,
}

/// How the static channel is derived from `(y_ref, y_t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StaticNoise {
    /// `y_ref - y_t`.
    #[default]
    Difference,
    /// `(y_t - sigma_t * y_ref) / lambda_t`: the exact noise if the frame
    /// did not change since the reference.
    LambdaNormalized,
}

impl StaticNoise {
    pub fn as_str(self) -> &'static str {
        match self {
            StaticNoise::Difference => "difference",
            StaticNoise::LambdaNormalized => "lambda_normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "difference" => Some(StaticNoise::Difference),
            "lambda_normalized" => Some(StaticNoise::LambdaNormalized),
            _ => None,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(invalid(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// `static = (y_ref - sigma_t y0) / lambda_t`, `dynamic = (sigma_t y0 - y_ref + lambda_t eps) / lambda_t`.
pub fn exact_decompose(
    y0: &Tensor,
    y_ref: &Tensor,
    eps: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<NoisePair> {
    same_shape(y0, y_ref, "exact_decompose")?;
    same_shape(y0, eps, "exact_decompose")?;
    if t == 0 || t > s.steps() {
        return Err(invalid(format!(
            "exact_decompose needs lambda_t > 0, got t={t}"
        )));
    }
    let (sig, lam) = (s.sigma(t), s.lambda(t));
    let mut st = Vec::with_capacity(y0.numel());
    let mut dy = Vec::with_capacity(y0.numel());
    for ((&x, &r), &e) in y0.data().iter().zip(y_ref.data()).zip(eps.data()) {
        let (x, r, e) = (x as f64, r as f64, e as f64);
        st.push(((r - sig * x) / lam) as f32);
        dy.push(((sig * x - r + lam * e) / lam) as f32);
    }
    Ok(NoisePair {
        static_noise: Tensor::from_vec(y0.shape(), st)?,
        dynamic_noise: Tensor::from_vec(y0.shape(), dy)?,
    })
}

/// The approximation used during training and sampling: `y_ref - y_t`.
pub fn approx_static(y_ref: &Tensor, y_t: &Tensor) -> Result<Tensor> {
    same_shape(y_ref, y_t, "approx_static")?;
    Ok(y_ref.sub(y_t)?)
}

/// Static channel for the chosen [`StaticNoise`] form. `t` may be per sample.
pub fn static_noise(
    mode: StaticNoise,
    y_ref: &Tensor,
    y_t: &Tensor,
    t: &[usize],
    s: &NoiseSchedule,
) -> Result<Tensor> {
    match mode {
        StaticNoise::Difference => approx_static(y_ref, y_t),
        StaticNoise::LambdaNormalized => {
            same_shape(y_ref, y_t, "static_noise")?;
            if t.is_empty() || !y_t.numel().is_multiple_of(t.len()) {
                return Err(invalid(
                    "static_noise: timestep count does not divide the batch",
                ));
            }
            let per = y_t.numel() / t.len();
            let mut out = Vec::with_capacity(y_t.numel());
            for (i, (&r, &y)) in y_ref.data().iter().zip(y_t.data()).enumerate() {
                let ti = t[i / per];
                if ti == 0 {
                    return Err(invalid("lambda-normalised static noise needs t >= 1"));
                }
                let (sig, lam) = (s.sigma(ti) as f32, s.lambda(ti) as f32);
                out.push((y - sig * r) / lam);
            }
            Ok(Tensor::from_vec(y_t.shape(), out)?)
        }
    }
}

fn mask_layout(m: &Tensor, x: &Tensor) -> Result<(usize, usize)> {
    let (ms, xs) = (m.shape(), x.shape());
    let ok = ms.len() == xs.len()
        && ms.len() >= 3
        && ms[ms.len() - 3] == 1
        && ms[..ms.len() - 3] == xs[..xs.len() - 3]
        && ms[ms.len() - 2..] == xs[xs.len() - 2..];
    if !ok {
        return Err(invalid(format!(
            "mask shape {ms:?} does not broadcast over {xs:?}"
        )));
    }
    let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
    Ok((xs[xs.len() - 3], hw))
}

/// `m * static + (1 - m) * dynamic` with a single-channel `m` shared by all channels.
pub fn blend(m: &Tensor, static_part: &Tensor, dynamic: &Tensor) -> Result<Tensor> {
    same_shape(static_part, dynamic, "blend")?;
    let (c, hw) = mask_layout(m, static_part)?;
    if let Some(bad) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("mask value {bad} outside [0, 1]")));
    }
    let md = m.data();
    let out = static_part
        .data()
        .iter()
        .zip(dynamic.data())
        .enumerate()
        .map(|(i, (&s, &d))| {
            let mv = md[(i / (c * hw)) * hw + i % hw];
            mv * s + (1.0 - mv) * d
        })
        .collect();
    Ok(Tensor::from_vec(static_part.shape(), out)?)
}

/// Differentiable [`blend`] on a tape; `m` is `[n, 1, h, w]`, the others `[n, c, h, w]`.
pub fn blend_on_tape(tape: &mut Tape, m: Var, static_part: Var, dynamic: Var) -> Result<Var> {
    let c = tape.value(dynamic).shape()[1];
    let m = if c == 1 {
        m
    } else {
        tape.expand_channels(m, c)?
    };
    let a = tape.mul(m, static_part)?;
    let one_minus = tape.mul_scalar(m, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let b = tape.mul(one_minus, dynamic)?;
    Ok(tape.add(a, b)?)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    same_shape(eps_hat, eps, "diffusion_loss")?;
    let acc: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok(acc / eps.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdm_tensor::Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn reference_at_scaled_target_has_no_static_part() {
        let s = sched();
        let mut rng = Rng::new(4);
        let y0 = Tensor::randn(&[1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[1, 4, 4], &mut rng);
        let y_ref = y0.scale(s.sigma(250) as f32);
        let pair = exact_decompose(&y0, &y_ref, &eps, 250, &s).unwrap();
        assert!(pair.static_noise.max_abs() < 1e-6);
        for (a, b) in pair.dynamic_noise.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn scalar_decomposition_at_500() {
        let s = sched();
        let one = Tensor::ones(&[1]);
        let pair = exact_decompose(&one, &one, &Tensor::zeros(&[1]), 500, &s).unwrap();
        let want = (1.0 - s.sigma(500)) / s.lambda(500);
        assert!((pair.static_noise.data()[0] as f64 - want).abs() < 1e-6);
        assert!((pair.dynamic_noise.data()[0] as f64 + want).abs() < 1e-6);
    }

    #[test]
    fn decompose_rejects_clean_step() {
        let s = sched();
        let z = Tensor::zeros(&[1]);
        assert!(exact_decompose(&z, &z, &z, 0, &s).is_err());
    }

    #[test]
    fn approx_static_cases() {
        let s = sched();
        let mut rng = Rng::new(5);
        let y = Tensor::randn(&[1, 3, 3], &mut rng);
        assert!(approx_static(&y, &y)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let yt = crate::schedule::forward_sample(&y, 300, &Tensor::zeros(&[1, 3, 3]), &s).unwrap();
        let yr = y.scale(s.sigma(300) as f32);
        assert!(approx_static(&yr, &yt).unwrap().max_abs() == 0.0);
        let other = Tensor::randn(&[1, 3, 3], &mut rng);
        let d = approx_static(&y, &other).unwrap();
        for i in 0..9 {
            assert_eq!(d.data()[i], y.data()[i] - other.data()[i]);
        }
        assert!(approx_static(&y, &Tensor::zeros(&[9])).is_err());
    }

    #[test]
    fn lambda_normalized_recovers_noise_for_static_frame() {
        let s = sched();
        let mut rng = Rng::new(6);
        let y0 = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let t = [100, 700];
        let mut yt = Vec::new();
        for (i, &ti) in t.iter().enumerate() {
            let f = crate::schedule::forward_sample(
                &y0.index(i).unwrap(),
                ti,
                &eps.index(i).unwrap(),
                &s,
            )
            .unwrap();
            yt.push(f);
        }
        let yt = Tensor::stack(&yt).unwrap();
        let st = static_noise(StaticNoise::LambdaNormalized, &y0, &yt, &t, &s).unwrap();
        for (a, b) in st.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn blend_extremes_and_midpoint() {
        let mut rng = Rng::new(7);
        let st = Tensor::randn(&[2, 4, 4], &mut rng);
        let dy = Tensor::randn(&[2, 4, 4], &mut rng);
        assert_eq!(blend(&Tensor::zeros(&[1, 4, 4]), &st, &dy).unwrap(), dy);
        assert_eq!(blend(&Tensor::ones(&[1, 4, 4]), &st, &dy).unwrap(), st);
        let half = blend(&Tensor::full(&[1, 4, 4], 0.5), &st, &dy).unwrap();
        for i in 0..32 {
            let want = 0.5 * (st.data()[i] + dy.data()[i]);
            assert!((half.data()[i] - want).abs() < 1e-6);
        }
        assert!(blend(&Tensor::full(&[1, 4, 4], 1.5), &st, &dy).is_err());
        assert!(blend(&Tensor::full(&[1, 4, 4], -0.1), &st, &dy).is_err());
        assert!(blend(&Tensor::zeros(&[2, 4, 4]), &st, &dy).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(8);
        let e = Tensor::randn(&[1, 8, 8], &mut rng);
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        let shifted = e.map(|v| v + 1.0);
        assert!((diffusion_loss(&shifted, &e).unwrap() - 1.0).abs() < 1e-6);
        let other = Tensor::randn(&[1, 8, 8], &mut rng);
        let mut acc = 0.0f64;
        for i in 0..64 {
            let d = other.data()[i] as f64 - e.data()[i] as f64;
            acc += d * d;
        }
        assert!((diffusion_loss(&other, &e).unwrap() - acc / 64.0).abs() < 1e-7);
        assert!(diffusion_loss(&other, &Tensor::zeros(&[64])).is_err());
    }

    #[test]
    fn tape_blend_matches_value_blend() {
        let mut rng = Rng::new(9);
        let m = Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut rng);
        let st = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let dy = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (mv, sv, dv) = (
            tape.param(m.clone()),
            tape.constant(st.clone()),
            tape.param(dy.clone()),
        );
        let out = blend_on_tape(&mut tape, mv, sv, dv).unwrap();
        let want = blend(&m, &st, &dy).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
