use mdm_tensor::{Rng, Tensor};
use mdm_video::masked_noise::{approx_static, blend, diffusion_loss, exact_decompose};
use mdm_video::schedule::{
    ancestral_step, forward_sample, predict_x0, strided_steps, NoiseSchedule,
};
use proptest::prelude::*;

fn standard() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap()
}

fn tensor(values: Vec<f32>) -> Tensor {
    let n = values.len();
    Tensor::from_vec(&[1, 1, n], values).unwrap()
}

fn frame() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, 1..48)
}

proptest! {
    #[test]
    fn decomposition_sums_to_noise(
        (y0, y_ref, eps) in (1usize..48).prop_flat_map(|n| (
            prop::collection::vec(-1.0f32..=1.0, n),
            prop::collection::vec(-1.0f32..=1.0, n),
            prop::collection::vec(-4.0f32..4.0, n),
        )),
        t in 1usize..=1000,
    ) {
        let s = standard();
        let p = exact_decompose(&tensor(y0), &tensor(y_ref), &tensor(eps.clone()), t, &s).unwrap();
        let sum = p.static_noise.add(&p.dynamic_noise).unwrap();
        let err = sum.data().iter().zip(&eps).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err < 1e-5, "t={t} err={err}");
    }

    #[test]
    fn blend_is_linear_in_the_mask(
        (m, st, dy) in (1usize..48).prop_flat_map(|n| (
            prop::collection::vec(0.0f32..=1.0, n),
            prop::collection::vec(-3.0f32..3.0, n),
            prop::collection::vec(-3.0f32..3.0, n),
        )),
    ) {
        let (mt, st_t, dy_t) = (tensor(m.clone()), tensor(st.clone()), tensor(dy.clone()));
        let zero = Tensor::zeros(mt.shape());
        let full = blend(&mt, &st_t, &dy_t).unwrap();
        let base = blend(&zero, &st_t, &dy_t).unwrap();
        for i in 0..m.len() {
            let lhs = full.data()[i] - base.data()[i];
            let rhs = m[i] * (st[i] - dy[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn approx_static_matches_scalar_loop(a in frame(), shift in -2.0f32..2.0) {
        let b: Vec<f32> = a.iter().map(|v| v * 0.5 + shift).collect();
        let out = approx_static(&tensor(a.clone()), &tensor(b.clone())).unwrap();
        for i in 0..a.len() {
            prop_assert_eq!(out.data()[i], a[i] - b[i]);
        }
    }

    #[test]
    fn loss_matches_scalar_loop(a in frame(), seed in any::<u64>()) {
        let b = Tensor::randn(&[1, 1, a.len()], &mut Rng::new(seed));
        let got = diffusion_loss(&tensor(a.clone()), &b).unwrap();
        let want = a.iter().zip(b.data()).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum::<f64>() / a.len() as f64;
        prop_assert!((got - want).abs() < 1e-7 * (1.0 + want));
    }

    #[test]
    fn strided_steps_are_decreasing(n in 1usize..=1000) {
        let v = strided_steps(1000, n).unwrap();
        prop_assert_eq!(v.len(), n);
        prop_assert_eq!(v[0], 1000);
        prop_assert!(v.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*v.last().unwrap() >= 1);
    }
}

#[test]
fn blend_rejects_out_of_range_mask() {
    let s = tensor(vec![1.0, 2.0]);
    assert!(blend(&tensor(vec![0.5, 1.5]), &s, &s).is_err());
    assert!(blend(&tensor(vec![-0.1, 0.5]), &s, &s).is_err());
}

#[test]
fn forward_marginal_moments_at_500() {
    let s = standard();
    let n = 100_000;
    let mut rng = Rng::new(42);
    let eps = Tensor::randn(&[n], &mut rng);
    let y = forward_sample(&Tensor::ones(&[n]), 500, &eps, &s).unwrap();
    let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = y
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    let want_var = 1.0 - s.alpha_bar(500);
    let se = (want_var / n as f64).sqrt();
    assert!(
        (mean - s.sigma(500)).abs() < 3.0 * se,
        "mean {mean} vs {}",
        s.sigma(500)
    );
    assert!(
        (var / want_var - 1.0).abs() < 0.02,
        "var {var} vs {want_var}"
    );
}

#[test]
fn exact_oracle_full_reverse_pass_recovers_input() {
    let s = standard();
    let mut rng = Rng::new(7);
    let y0 = Tensor::randn(&[1, 16, 16], &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let eps = Tensor::randn(&[1, 16, 16], &mut rng);
    let mut y = forward_sample(&y0, 1000, &eps, &s).unwrap();
    let zero = Tensor::zeros(&[1, 16, 16]);
    for t in (1..=1000).rev() {
        let eps_t = y
            .sub(&y0.map(|v| v * s.sigma(t) as f32))
            .unwrap()
            .map(|v| v / s.lambda(t) as f32);
        y = ancestral_step(&y, &eps_t, t, t - 1, &s, &zero).unwrap();
    }
    let mse = diffusion_loss(&y, &y0).unwrap();
    assert!(mse < 1e-4, "mse {mse}");
    let x0 = predict_x0(&forward_sample(&y0, 10, &zero, &s).unwrap(), &zero, 10, &s).unwrap();
    assert!(diffusion_loss(&x0, &y0).unwrap() < 1e-12);
}
