//! Compare the full model against the single-head variant and a zero anchor.
//!
//! Checkpoints go to `out/examples/ablation`; rerunning only evaluates.
//!
//! `cargo run --release --example ablation -- [steps]`

use std::path::Path;

use mdm_video::ablation::{eval_clips, run_ablation, seed_mean_at, train_missing, AblationSpec};
use mdm_video::config::Config;
use mdm_video::denoiser::LatentShape;

mod common;

fn main() -> mdm_video::Result<()> {
    let mut c = Config::desk();
    c.train.steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let corpus = common::corpus(&c, c.data.clips)?;
    let dir = Path::new("out/examples/ablation");
    let seeds = [0, 1];
    let clips = eval_clips(4, 17, LatentShape::of(&c.model), 777)?;
    for spec in [AblationSpec::NoMask, AblationSpec::ZeroAnchor] {
        for p in train_missing(&spec, &c, &corpus, &seeds, dir)? {
            println!("trained {}", p.display());
        }
        let results = run_ablation(&spec, &c, &corpus, &seeds, dir, &clips)?;
        for arm in spec.arms() {
            println!(
                "{:<12} frame-16 mse {:.4}",
                arm.name(),
                seed_mean_at(&results, arm, 16).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
