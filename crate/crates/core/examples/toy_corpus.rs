//! Build a filtered corpus of moving-disc clips, save it, and render one clip per prompt.
//!
//! `cargo run --example toy_corpus -- [out_dir]`

use std::path::PathBuf;

use mdm_tensor::Rng;
use mdm_video::config::Config;
use mdm_video::denoiser::LatentShape;
use mdm_video::report::write_gif;
use mdm_video::toyworld::{gen_clip, motion_score, tracked_direction, Corpus, PromptVocab};

mod common;

fn main() -> mdm_video::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/examples".into()),
    );
    std::fs::create_dir_all(&out)?;
    let c = Config::desk();
    let corpus = common::corpus(&c, 128)?;
    corpus.save(&out.join("corpus.bin"))?;
    let back = Corpus::load(&out.join("corpus.bin"))?;
    println!(
        "{} clips kept, {} dropped by the motion filter, digest {}",
        back.clips.len(),
        back.dropped,
        back.digest()?
    );

    let vocab = PromptVocab;
    let shape = LatentShape::of(&c.model);
    for (i, prompt) in vocab.corpus_prompts().iter().enumerate() {
        let clip = gen_clip(prompt, 24, shape, &mut Rng::new(i as u64))?;
        let name = vocab.decode(prompt).replace(' ', "_");
        write_gif(&out.join(format!("clip_{name}.gif")), &clip.frames, 8, 10)?;
        println!(
            "{:<12} motion {:>6.2}  tracked {:?}",
            vocab.decode(prompt),
            motion_score(&clip.frames)?,
            tracked_direction(&clip.frames, 2.0)
        );
    }
    Ok(())
}
