//! Fit a small MLP to `sin(3x)` with reverse-mode autodiff and AdamW.
//!
//! `cargo run --example fit_curve`

use mdm_tensor::{AdamWConfig, OptimizerState, ParamSet, Rng, Tape, Tensor};

fn main() -> mdm_tensor::Result<()> {
    let mut rng = Rng::new(0);
    let n = 64;
    let xs: Vec<f32> = (0..n)
        .map(|i| -1.0 + 2.0 * i as f32 / (n - 1) as f32)
        .collect();
    let x = Tensor::from_vec(&[n, 1], xs.clone())?;
    let y = Tensor::from_vec(&[n, 1], xs.iter().map(|v| (3.0 * v).sin()).collect())?;

    let mut params = ParamSet::new();
    let w1 = params.push_normal("w1", &[32, 1], 1, 2.0, &mut rng);
    let b1 = params.push_zeros("b1", &[32]);
    let w2 = params.push_normal("w2", &[1, 32], 32, 1.0, &mut rng);
    let b2 = params.push_zeros("b2", &[1]);
    let config = AdamWConfig {
        lr: 1e-2,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(config, &params);

    for step in 0..=2000 {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let h = tape.linear(xv, p.var(w1), Some(p.var(b1)))?;
        let h = tape.silu(h);
        let out = tape.linear(h, p.var(w2), Some(p.var(b2)))?;
        let target = tape.constant(y.clone());
        let loss = tape.mse(out, target)?;
        if step % 400 == 0 {
            println!("step {step:>4}  mse {:.6}", tape.value(loss).item()?);
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &p.collect_grads(&tape, &grads))?;
    }
    Ok(())
}
