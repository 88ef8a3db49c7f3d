//! Setup shared by the examples.
#![allow(dead_code)]

use std::path::Path;

use mdm_tensor::Rng;
use mdm_video::config::Config;
use mdm_video::denoiser::{LatentShape, MaskedDenoiser};
use mdm_video::toyworld::{build_corpus, Corpus};
use mdm_video::trainer::{train_until, MaskMode, TrainState};
use mdm_video::Result;

/// A small corpus drawn with the desk profile's motion bounds.
pub fn corpus(c: &Config, clips: usize) -> Result<Corpus> {
    let bounds = (c.data.motion_lo, c.data.motion_hi);
    build_corpus(
        clips,
        c.data.clip_len,
        LatentShape::of(&c.model),
        bounds,
        &Rng::new(c.seed).split("corpus"),
    )
}

/// EMA model from the checkpoint named on the command line, or a briefly trained one.
pub fn model() -> Result<(Config, MaskedDenoiser)> {
    if let Some(p) = std::env::args().nth(1) {
        let st = TrainState::load(Path::new(&p), None)?;
        println!("loaded {p} at step {}", st.step);
        return Ok((st.config.clone(), st.ema_model()?));
    }
    let c = Config::desk();
    let steps = 600;
    println!("no checkpoint given; training {steps} steps on 64 clips");
    let data = corpus(&c, 64)?;
    let mut st = TrainState::new(&c)?;
    let log = train_until(&mut st, &data, steps as u64, MaskMode::Learned, None)?;
    println!("final loss {:.4}", log.last().map_or(f64::NAN, |s| s.loss));
    Ok((c, st.ema_model()?))
}
