//! Analytic multiply-accumulate counts for sampling a video.

use crate::config::ModelConfig;

/// Multiply-accumulates of one forward pass of one head, split by layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct HeadMacs {
    pub conv: u64,
    pub dense: u64,
}

impl HeadMacs {
    pub fn total(&self) -> u64 {
        self.conv + self.dense
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsEstimate {
    pub dynamic: HeadMacs,
    pub mask: HeadMacs,
    /// Both heads, four guidance branches, every sampling step.
    pub per_frame: u64,
    pub per_video: u64,
    pub frames: usize,
}

/// Number of condition sets evaluated per sampling step.
pub const GUIDANCE_BRANCHES: u64 = 4;

fn conv_out(n: usize, stride: usize) -> usize {
    // kernel 3 with padding 1, or kernel 1 with padding 0
    (n - 1) / stride + 1
}

fn head_macs(arch: &ModelConfig, width: usize, out_channels: usize) -> HeadMacs {
    let (c, h, w) = (arch.channels as u64, arch.height, arch.width);
    let d = arch.base_width as u64;
    let a = arch.adapter_width as u64;
    let ch = |s: usize| (width << s) as u64;
    let mut conv = 0u64;
    let mut dense = d * d + 2 * a * d + 3 * d;
    let (h1, w1) = (conv_out(h, 2), conv_out(w, 2));
    conv += a * c * 9 * (h1 * w1) as u64;
    let (h2, w2) = (conv_out(h1, 2), conv_out(w1, 2));
    conv += 2 * a * a * 9 * (h2 * w2) as u64;
    conv += ch(0) * c * 9 * (h * w) as u64;
    let (mut hs, mut ws) = (h, w);
    for s in 0..arch.stages {
        if s > 0 {
            hs = conv_out(hs, 2);
            ws = conv_out(ws, 2);
        }
        let px = (hs * ws) as u64;
        let ain = if s == 0 { 2 * c } else { a };
        conv += a * ain * 9 * px;
        conv += ch(s) * a * px;
        if s > 0 {
            conv += ch(s) * ch(s - 1) * 9 * px;
        }
        conv += ch(s) * ch(s) * 9 * px;
        dense += 2 * d * ch(s);
        if s + 1 < arch.stages {
            conv += ch(s) * (ch(s + 1) + ch(s)) * 9 * px;
        }
    }
    conv += out_channels as u64 * ch(0) * 9 * (h * w) as u64;
    HeadMacs { conv, dense }
}

/// Per-head, per-frame and per-video counts for `frames` frames of `steps` sampling steps.
pub fn flops_estimate(arch: &ModelConfig, steps: usize, frames: usize) -> FlopsEstimate {
    let dynamic = head_macs(arch, arch.base_width, arch.channels);
    let mask = if arch.use_mask {
        head_macs(arch, arch.mask_width, 1)
    } else {
        HeadMacs::default()
    };
    let per_frame = (dynamic.total() + mask.total()) * GUIDANCE_BRANCHES * steps as u64;
    FlopsEstimate {
        dynamic,
        mask,
        per_frame,
        per_video: per_frame * frames as u64,
        frames,
    }
}
