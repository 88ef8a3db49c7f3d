//! How the mean predicted mask moves across the sampling steps of one frame.
//!
//! `cargo run --release --example mask_stats -- [checkpoint]`

use mdm_tensor::Rng;
use mdm_video::ablation::eval_clips;
use mdm_video::denoiser::LatentShape;
use mdm_video::metrics::mask_trend;
use mdm_video::rollout::{generate_video, RolloutConfig};

mod common;

fn main() -> mdm_video::Result<()> {
    let (c, model) = common::model()?;
    let s = c.schedule()?;
    let rc = RolloutConfig::from_config(&c);
    let mut traces = Vec::new();
    for (i, clip) in eval_clips(2, 5, LatentShape::of(&c.model), 11)?
        .iter()
        .enumerate()
    {
        let r = generate_video(
            &clip.prompt,
            5,
            &model,
            &rc,
            &s,
            &Rng::new(i as u64),
            Some(&clip.frames[0]),
        )?;
        traces.extend(r.traces.into_iter().flatten());
    }
    let trend = mask_trend(&traces)?;
    for (k, m) in trend.per_step.iter().enumerate().step_by(5) {
        println!("sampling step {k:>2}: mean mask {m:.4e}");
    }
    println!(
        "first decile {:.4e}, last decile {:.4e}, over {} frames",
        trend.first_decile,
        trend.last_decile,
        traces.len()
    );
    Ok(())
}
