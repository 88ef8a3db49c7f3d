//! Forward noising, the static/dynamic split of the noise target, and an
//! exact-noise reverse pass that recovers the clean frame.
//!
//! `cargo run --example noise_algebra`

use mdm_tensor::{Rng, Tensor};
use mdm_video::config::Config;
use mdm_video::masked_noise::{approx_static, diffusion_loss, exact_decompose};
use mdm_video::schedule::{ancestral_step, forward_sample};

fn main() -> mdm_video::Result<()> {
    let s = Config::default().schedule()?;
    let mut rng = Rng::new(0);
    let y0 = Tensor::randn(&[1, 16, 16], &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let y_ref = y0.map(|v| 0.9 * v);
    let eps = Tensor::randn(&[1, 16, 16], &mut rng);

    println!("   t   sigma_t  lambda_t  |static|  |dynamic|  |approx static|  split error");
    for t in [1, 250, 500, 750, 1000] {
        let p = exact_decompose(&y0, &y_ref, &eps, t, &s)?;
        let err = p.static_noise.add(&p.dynamic_noise)?.sub(&eps)?.max_abs();
        let y_t = forward_sample(&y0, t, &eps, &s)?;
        println!(
            "{t:>4}  {:>8.4}  {:>8.4}  {:>8.3}  {:>9.3}  {:>15.3}  {err:.1e}",
            s.sigma(t),
            s.lambda(t),
            p.static_noise.max_abs(),
            p.dynamic_noise.max_abs(),
            approx_static(&y_ref, &y_t)?.max_abs(),
        );
    }

    let zero = Tensor::zeros(&[1, 16, 16]);
    let mut y = forward_sample(&y0, 1000, &eps, &s)?;
    for t in (1..=1000).rev() {
        let (a, b) = (s.sigma(t) as f32, s.lambda(t) as f32);
        let exact = y.zip_map(&y0, |v, x| (v - a * x) / b)?;
        y = ancestral_step(&y, &exact, t, t - 1, &s, &zero)?;
    }
    println!(
        "reverse pass with the exact noise: mse {:.2e}",
        diffusion_loss(&y, &y0)?
    );
    Ok(())
}
