//! On-disk artifacts: rollout files, CSV tables and grayscale GIFs.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use mdm_tensor::Tensor;

use crate::ablation::ArmResult;
use crate::denoiser::LatentShape;
use crate::error::{invalid, Error, Result};
use crate::flops::FlopsEstimate;
use crate::metrics::{DriftReport, MaskTrend};
use crate::rollout::RolloutState;
use crate::sampler::{MaskStats, MaskTrace};
use crate::toyworld::{hex_digest, ByteReader, ClipMeta};

const ROLLOUT_MAGIC: &[u8; 8] = b"MDMROLL\0";
pub const ROLLOUT_VERSION: u32 = 1;

/// A saved rollout, optionally tied to the toy clip it should reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutArtifact {
    pub shape: LatentShape,
    pub seed: u64,
    pub config_text: String,
    pub segment_starts: Vec<usize>,
    pub segment_prompts: Vec<Vec<usize>>,
    pub frames: Vec<Tensor>,
    pub traces: Vec<Option<MaskTrace>>,
    /// Metadata of the ground-truth clip, when the rollout started from one.
    pub oracle: Option<ClipMeta>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl RolloutArtifact {
    pub fn new(
        state: &RolloutState,
        segment_prompts: Vec<Vec<usize>>,
        seed: u64,
        config_text: String,
        oracle: Option<ClipMeta>,
    ) -> Result<Self> {
        let first = state
            .frames
            .first()
            .ok_or_else(|| invalid("rollout has no frames"))?;
        let d = first.shape();
        if d.len() != 3 || segment_prompts.len() != state.segment_starts.len() {
            return Err(invalid("rollout shape or segment count is inconsistent"));
        }
        Ok(Self {
            shape: LatentShape::new(d[0], d[1], d[2]),
            seed,
            config_text,
            segment_starts: state.segment_starts.clone(),
            segment_prompts,
            frames: state.frames.clone(),
            traces: state.traces.clone(),
            oracle,
        })
    }

    /// The prompt in force for global frame `i`.
    pub fn prompt_at(&self, i: usize) -> &[usize] {
        let k = self
            .segment_starts
            .iter()
            .rposition(|&s| s <= i)
            .unwrap_or(0);
        &self.segment_prompts[k]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ROLLOUT_MAGIC);
        out.extend_from_slice(&ROLLOUT_VERSION.to_le_bytes());
        for d in self.shape.dims() {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.segment_starts.len());
        for (s, p) in self.segment_starts.iter().zip(&self.segment_prompts) {
            put_u32(&mut out, *s);
            put_u32(&mut out, p.len());
            for &id in p {
                put_u32(&mut out, id);
            }
        }
        put_u32(&mut out, self.frames.len());
        for (f, t) in self.frames.iter().zip(&self.traces) {
            for &v in f.data() {
                put_f32(&mut out, v);
            }
            match t {
                None => out.push(0),
                Some(t) => {
                    out.push(1);
                    put_u32(&mut out, t.steps.len());
                    for s in &t.steps {
                        out.extend_from_slice(&s.mean.to_le_bytes());
                        put_f32(&mut out, s.min);
                        put_f32(&mut out, s.max);
                    }
                }
            }
        }
        match &self.oracle {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&m.seed.to_le_bytes());
                for v in [m.start.0, m.start.1, m.velocity.0, m.velocity.1, m.radius] {
                    put_f32(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |why: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: why.to_string(),
        };
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8) != Some(ROLLOUT_MAGIC.as_slice()) {
            return Err(corrupt("bad magic or truncated header"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != ROLLOUT_VERSION {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("rollout version {version}, expected {ROLLOUT_VERSION}"),
            });
        }
        let u = |r: &mut ByteReader, what: &str| {
            r.u32().map(|v| v as usize).ok_or_else(|| corrupt(what))
        };
        let (c, h, w) = (
            u(&mut r, "truncated header")?,
            u(&mut r, "truncated header")?,
            u(&mut r, "truncated header")?,
        );
        let shape = LatentShape::new(c, h, w);
        if shape.numel() == 0 || shape.numel() > 1 << 24 {
            return Err(corrupt("bad frame shape"));
        }
        let seed = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let tlen = u(&mut r, "truncated config")?;
        let text = r.take(tlen).ok_or_else(|| corrupt("truncated config"))?;
        let config_text =
            String::from_utf8(text.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;
        let nseg = u(&mut r, "truncated segments")?;
        let mut segment_starts = Vec::new();
        let mut segment_prompts = Vec::new();
        for _ in 0..nseg {
            segment_starts.push(u(&mut r, "truncated segments")?);
            let n = u(&mut r, "truncated segments")?;
            let mut p = Vec::new();
            for _ in 0..n {
                p.push(u(&mut r, "truncated segments")?);
            }
            segment_prompts.push(p);
        }
        let nframes = u(&mut r, "truncated frames")?;
        let mut frames = Vec::new();
        let mut traces = Vec::new();
        for _ in 0..nframes {
            let raw = r
                .take(shape.numel() * 4)
                .ok_or_else(|| corrupt("truncated frame"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            frames.push(Tensor::from_vec(&shape.dims(), data).map_err(|_| corrupt("bad frame"))?);
            match r.take(1).ok_or_else(|| corrupt("truncated trace"))?[0] {
                0 => traces.push(None),
                1 => {
                    let n = u(&mut r, "truncated trace")?;
                    let mut steps = Vec::new();
                    for _ in 0..n {
                        let mean = r.take(8).ok_or_else(|| corrupt("truncated trace"))?;
                        let mean = f64::from_le_bytes(mean.try_into().unwrap());
                        let min = r.f32().ok_or_else(|| corrupt("truncated trace"))?;
                        let max = r.f32().ok_or_else(|| corrupt("truncated trace"))?;
                        steps.push(MaskStats { mean, min, max });
                    }
                    traces.push(Some(MaskTrace { steps }));
                }
                _ => return Err(corrupt("bad trace flag")),
            }
        }
        let oracle = match r.take(1).ok_or_else(|| corrupt("truncated oracle"))?[0] {
            0 => None,
            1 => {
                let seed = r.u64().ok_or_else(|| corrupt("truncated oracle"))?;
                let mut v = [0f32; 5];
                for x in &mut v {
                    *x = r.f32().ok_or_else(|| corrupt("truncated oracle"))?;
                }
                Some(ClipMeta {
                    seed,
                    start: (v[0], v[1]),
                    velocity: (v[2], v[3]),
                    radius: v[4],
                })
            }
            _ => return Err(corrupt("bad oracle flag")),
        };
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if segment_starts.first() != Some(&0) || segment_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("segment starts are not increasing from zero"));
        }
        Ok(Self {
            shape,
            seed,
            config_text,
            segment_starts,
            segment_prompts,
            frames,
            traces,
            oracle,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn write_drift_csv(path: &Path, rows: &[(String, DriftReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "frame", "mse", "psnr", "slope"])?;
    for (label, d) in rows {
        for (i, (m, p)) in d.mse.iter().zip(&d.psnr).enumerate() {
            w.write_record([
                label.clone(),
                i.to_string(),
                m.to_string(),
                p.to_string(),
                d.slope.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_mask_csv(path: &Path, trend: &MaskTrend) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sampling_step", "mean_mask"])?;
    for (i, m) in trend.per_step.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flops_csv(path: &Path, f: &FlopsEstimate) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "macs"])?;
    for (k, v) in [
        ("dynamic_conv", f.dynamic.conv),
        ("dynamic_dense", f.dynamic.dense),
        ("mask_conv", f.mask.conv),
        ("mask_dense", f.mask.dense),
        ("per_frame", f.per_frame),
        ("per_video", f.per_video),
    ] {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-frame drift of every arm and seed, plus a per-arm summary.
pub fn write_ablation_csvs(dir: &Path, results: &[ArmResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("ablation_drift.csv"))?;
    w.write_record([
        "arm",
        "seed",
        "frame",
        "mean_mse",
        "corpus_digest",
        "train_steps",
        "config_hash",
    ])?;
    for r in results {
        for (i, m) in r.mean_mse.iter().enumerate() {
            w.write_record([
                r.arm.name(),
                r.seed.to_string(),
                i.to_string(),
                m.to_string(),
                r.corpus_digest.clone(),
                r.train_steps.to_string(),
                r.config_hash.clone(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("ablation_summary.csv"))?;
    w.write_record([
        "arm",
        "seed",
        "final_mse",
        "mean_slope",
        "mask_first_decile",
        "mask_last_decile",
        "failures",
        "corpus_digest",
        "train_steps",
    ])?;
    for r in results {
        let slope = if r.drift.is_empty() {
            f64::NAN
        } else {
            r.drift.iter().map(|d| d.slope).sum::<f64>() / r.drift.len() as f64
        };
        let (first, last) = r
            .mask
            .as_ref()
            .map(|m| (m.first_decile, m.last_decile))
            .unwrap_or((f64::NAN, f64::NAN));
        w.write_record([
            r.arm.name(),
            r.seed.to_string(),
            r.mean_mse.last().copied().unwrap_or(f64::NAN).to_string(),
            slope.to_string(),
            first.to_string(),
            last.to_string(),
            r.failures.to_string(),
            r.corpus_digest.clone(),
            r.train_steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Map latent values in `[-1, 1]` to 8-bit gray, clamping outside.
pub fn to_gray(frame: &Tensor, channel: usize) -> Result<Vec<u8>> {
    let d = frame.shape();
    if d.len() != 3 || channel >= d[0] {
        return Err(invalid(format!(
            "cannot take channel {channel} of shape {d:?}"
        )));
    }
    let hw = d[1] * d[2];
    Ok(frame.data()[channel * hw..(channel + 1) * hw]
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect())
}

/// Animated grayscale GIF of channel 0, each pixel scaled up by `zoom`.
pub fn write_gif(path: &Path, frames: &[Tensor], zoom: usize, delay_cs: u16) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| invalid("no frames to encode"))?;
    let d = first.shape();
    if d.len() != 3 || zoom == 0 {
        return Err(invalid("gif frames must be [C, H, W] with a positive zoom"));
    }
    let (h, w) = (d[1] * zoom, d[2] * zoom);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(invalid("gif is too large"));
    }
    let palette: Vec<u8> = (0..=255u8).flat_map(|g| [g, g, g]).collect();
    let mut enc = gif::Encoder::new(File::create(path)?, w as u16, h as u16, &palette)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    enc.set_repeat(gif::Repeat::Infinite)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for f in frames {
        if f.shape() != d {
            return Err(invalid("gif frames differ in shape"));
        }
        let g = to_gray(f, 0)?;
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                px.push(g[(y / zoom) * d[2] + x / zoom]);
            }
        }
        let mut frame = gif::Frame::from_indexed_pixels(w as u16, h as u16, px, None);
        frame.delay = delay_cs;
        enc.write_frame(&frame)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}
