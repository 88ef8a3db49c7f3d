//! Train the two-head denoiser on a toy corpus, save a checkpoint, then resume it.
//!
//! `cargo run --release --example train -- [steps]`

use std::path::Path;

use mdm_video::config::Config;
use mdm_video::trainer::{train_until, MaskMode, TrainState};

mod common;

fn main() -> mdm_video::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let c = Config::desk();
    let corpus = common::corpus(&c, c.data.clips)?;
    let mut st = TrainState::new(&c)?;
    println!("{} parameters", st.model.params().num_scalars());

    let half = steps / 2;
    for s in train_until(&mut st, &corpus, half, MaskMode::Learned, None)?
        .iter()
        .step_by(100)
    {
        println!(
            "step {:>5}  loss {:.4}  grad norm {:.3}",
            s.step, s.loss, s.grad_norm
        );
    }
    std::fs::create_dir_all("out/examples")?;
    let ckpt = Path::new("out/examples/model.ckpt");
    st.save(ckpt)?;
    println!("saved {} at step {half}", ckpt.display());

    let mut st = TrainState::load(ckpt, Some(&c))?;
    for s in train_until(&mut st, &corpus, steps, MaskMode::Learned, None)?
        .iter()
        .step_by(100)
    {
        println!(
            "step {:>5}  loss {:.4}  grad norm {:.3}",
            s.step, s.loss, s.grad_norm
        );
    }
    st.save(ckpt)?;
    println!("resumed and saved {} at step {steps}", ckpt.display());
    Ok(())
}
