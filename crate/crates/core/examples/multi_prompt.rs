//! Chain prompts into one video; each segment anchors on the last frame of the one before.
//!
//! `cargo run --release --example multi_prompt -- [checkpoint]`

use mdm_tensor::Rng;
use mdm_video::denoiser::LatentShape;
use mdm_video::report::write_gif;
use mdm_video::rollout::{generate_multi_prompt, RolloutConfig, SegmentPlan};
use mdm_video::toyworld::{gen_clip, tracked_direction, PromptVocab};

mod common;

fn main() -> mdm_video::Result<()> {
    let (c, model) = common::model()?;
    let texts = ["right fast", "down slow", "left fast"];
    let plan = SegmentPlan::new(
        texts
            .iter()
            .map(|t| Ok((PromptVocab.encode(t)?, 8)))
            .collect::<mdm_video::Result<_>>()?,
    )?;
    let start = gen_clip(
        &PromptVocab.encode("right fast")?,
        1,
        LatentShape::of(&c.model),
        &mut Rng::new(3),
    )?;
    let r = generate_multi_prompt(
        &plan,
        &model,
        &RolloutConfig::from_config(&c),
        &c.schedule()?,
        &Rng::new(4),
        Some(&start.frames[0]),
    )?;
    for (k, &s) in r.segment_starts.iter().enumerate() {
        let end = r
            .segment_starts
            .get(k + 1)
            .copied()
            .unwrap_or(r.frames.len());
        println!(
            "segment {k} {:<11} frames {s:>2}..{end:<2} tracked {:?}",
            texts[k],
            tracked_direction(&r.frames[s.saturating_sub(1)..end], 1.0)
        );
    }
    std::fs::create_dir_all("out/examples")?;
    write_gif("out/examples/multi_prompt.gif".as_ref(), &r.frames, 8, 12)?;
    println!("wrote out/examples/multi_prompt.gif");
    Ok(())
}
