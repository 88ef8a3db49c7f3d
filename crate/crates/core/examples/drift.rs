//! Per-frame error and PSNR of long rollouts against the ground-truth motion.
//!
//! `cargo run --release --example drift -- [checkpoint]`

use mdm_tensor::Rng;
use mdm_video::ablation::eval_clips;
use mdm_video::denoiser::LatentShape;
use mdm_video::metrics::drift_curve;
use mdm_video::rollout::{generate_video, RolloutConfig};

mod common;

fn main() -> mdm_video::Result<()> {
    let (c, model) = common::model()?;
    let s = c.schedule()?;
    let rc = RolloutConfig::from_config(&c);
    let clips = eval_clips(4, 17, LatentShape::of(&c.model), 777)?;
    let mut mean = [0.0; 17];
    for (i, clip) in clips.iter().enumerate() {
        let r = generate_video(
            &clip.prompt,
            17,
            &model,
            &rc,
            &s,
            &Rng::new(i as u64),
            Some(&clip.frames[0]),
        )?;
        let d = drift_curve(&r.frames, &clip.frames)?;
        println!(
            "clip {i}: final mse {:.4}  psnr {:.2} dB  slope {:.5}",
            d.mse[16], d.psnr[16], d.slope
        );
        for (m, v) in mean.iter_mut().zip(&d.mse) {
            *m += v / clips.len() as f64;
        }
    }
    for (f, m) in mean.iter().enumerate().step_by(4) {
        println!("frame {f:>2}: mean mse {m:.4}");
    }
    Ok(())
}
