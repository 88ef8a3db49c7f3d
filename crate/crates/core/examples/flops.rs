//! Multiply-accumulate counts per head, per frame and per video.
//!
//! `cargo run --example flops`

use mdm_video::config::Config;
use mdm_video::flops::flops_estimate;

fn main() {
    let c = Config::default();
    let e = flops_estimate(&c.model, c.sampler.steps, 16);
    println!(
        "dynamic head: {:>12} conv + {:>10} dense MACs",
        e.dynamic.conv, e.dynamic.dense
    );
    println!(
        "mask head:    {:>12} conv + {:>10} dense MACs",
        e.mask.conv, e.mask.dense
    );
    println!(
        "per frame ({} steps x 4 guidance branches): {} MACs",
        c.sampler.steps, e.per_frame
    );
    println!("per {}-frame video: {} MACs", e.frames, e.per_video);
    let share = e.mask.total() as f64 / (e.dynamic.total() + e.mask.total()) as f64;
    println!("mask head share of compute: {:.1}%", 100.0 * share);
}
