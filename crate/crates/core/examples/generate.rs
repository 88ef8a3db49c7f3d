//! Generate a clip frame by frame from a prompt and compare it to the true motion.
//!
//! `cargo run --release --example generate -- [checkpoint]`

use mdm_tensor::Rng;
use mdm_video::denoiser::LatentShape;
use mdm_video::report::write_gif;
use mdm_video::rollout::{generate_video, RolloutConfig};
use mdm_video::toyworld::{gen_clip, tracked_direction, PromptVocab};

mod common;

fn main() -> mdm_video::Result<()> {
    let (c, model) = common::model()?;
    let prompt = PromptVocab.encode("right slow")?;
    let truth = gen_clip(&prompt, 16, LatentShape::of(&c.model), &mut Rng::new(5))?;
    let s = c.schedule()?;
    let rc = RolloutConfig::from_config(&c);
    let r = generate_video(
        &prompt,
        16,
        &model,
        &rc,
        &s,
        &Rng::new(6),
        Some(&truth.frames[0]),
    )?;
    std::fs::create_dir_all("out/examples")?;
    write_gif("out/examples/generated.gif".as_ref(), &r.frames, 8, 12)?;
    write_gif("out/examples/truth.gif".as_ref(), &truth.frames, 8, 12)?;
    println!(
        "tracked direction: generated {:?}, truth {:?}",
        tracked_direction(&r.frames, 1.0),
        tracked_direction(&truth.frames, 1.0)
    );
    println!("wrote out/examples/generated.gif and out/examples/truth.gif");
    Ok(())
}
