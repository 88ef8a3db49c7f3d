//! Synthetic latent videos: a Gaussian blob drifting across a torus over a
//! fixed low-amplitude texture, with prompts that name its direction and speed.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use mdm_tensor::{Rng, Tensor};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::denoiser::LatentShape;
use crate::error::{Error, Result};

/// Token strings in id order. Id 0 is the null token.
pub const TOKENS: [&str; 8] = [
    "<null>", "left", "right", "up", "down", "slow", "fast", "still",
];

pub const SLOW_SPEED: f32 = 0.5;
pub const FAST_SPEED: f32 = 1.0;
pub const RADIUS_RANGE: (f32, f32) = (1.5, 3.0);
const TEXTURE_AMPLITUDE: f32 = 0.15;

/// Maps the mean absolute frame difference to the motion score scale.
/// A fast clip with the largest blob scores about 19.5 on a 16x16 latent.
pub const MOTION_SCALE: f64 = 172.0;

#[derive(Clone, Copy, Debug, Default)]
pub struct PromptVocab;

impl PromptVocab {
    pub const NULL: usize = 0;

    pub fn len(&self) -> usize {
        TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        TOKENS
            .iter()
            .position(|t| *t == token)
            .filter(|&i| i != Self::NULL)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Whitespace-separated tokens to ids.
    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        prompt.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| TOKENS.get(i).copied().unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Per-frame displacement `(dx, dy)` named by a prompt; `y` grows downward.
    pub fn velocity(&self, ids: &[usize]) -> Result<(f32, f32)> {
        let (mut dx, mut dy) = (0.0f32, 0.0f32);
        let mut speed = SLOW_SPEED;
        let mut still = false;
        for &id in ids {
            match TOKENS.get(id).copied() {
                Some("left") => dx -= 1.0,
                Some("right") => dx += 1.0,
                Some("up") => dy -= 1.0,
                Some("down") => dy += 1.0,
                Some("slow") => speed = SLOW_SPEED,
                Some("fast") => speed = FAST_SPEED,
                Some("still") => still = true,
                _ => return Err(Error::UnknownToken(format!("id {id}"))),
            }
        }
        if still {
            return Ok((0.0, 0.0));
        }
        Ok((dx * speed, dy * speed))
    }

    /// Prompts the corpus generator draws from, uniformly.
    pub fn corpus_prompts(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for dir in ["left", "right", "up", "down"] {
            for speed in ["slow", "fast"] {
                out.push(vec![self.id(dir).unwrap(), self.id(speed).unwrap()]);
            }
        }
        out.push(vec![self.id("still").unwrap()]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub seed: u64,
    pub start: (f32, f32),
    pub velocity: (f32, f32),
    pub radius: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyClip {
    pub frames: Vec<Tensor>,
    pub prompt: Vec<usize>,
    pub meta: ClipMeta,
}

fn texture(shape: LatentShape, seed: u64) -> Vec<f32> {
    let mut rng = Rng::new(seed).split("texture");
    let mut out = vec![0.0f32; shape.numel()];
    for c in 0..shape.channels {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx = rng.range_inclusive(1, 3) as f64;
                let fy = rng.range_inclusive(1, 3) as f64;
                (fx, fy, rng.uniform() * TAU)
            })
            .collect();
        for y in 0..shape.height {
            for x in 0..shape.width {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| {
                        (TAU * (fx * x as f64 / shape.width as f64
                            + fy * y as f64 / shape.height as f64)
                            + ph)
                            .sin()
                    })
                    .sum::<f64>()
                    / 3.0;
                out[(c * shape.height + y) * shape.width + x] = TEXTURE_AMPLITUDE * v as f32;
            }
        }
    }
    out
}

fn wrapped(d: f32, period: usize) -> f32 {
    let p = period as f32;
    let d = d.rem_euclid(p);
    if d > p / 2.0 {
        d - p
    } else {
        d
    }
}

/// Render one frame with the blob centred at `(cx, cy)`.
pub fn render_frame(
    shape: LatentShape,
    center: (f32, f32),
    radius: f32,
    background: &[f32],
) -> Result<Tensor> {
    let mut data = background.to_vec();
    let inv = 1.0 / (2.0 * radius * radius);
    for c in 0..shape.channels {
        for y in 0..shape.height {
            let dy = wrapped(y as f32 - center.1, shape.height);
            for x in 0..shape.width {
                let dx = wrapped(x as f32 - center.0, shape.width);
                let g = (-(dx * dx + dy * dy) * inv).exp();
                data[(c * shape.height + y) * shape.width + x] += 2.0 * g - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(&shape.dims(), data)?)
}

/// Render a clip from explicit metadata.
pub fn render_clip(
    prompt: Vec<usize>,
    meta: ClipMeta,
    length: usize,
    shape: LatentShape,
) -> Result<ToyClip> {
    let bg = texture(shape, meta.seed);
    let frames = (0..length)
        .map(|i| {
            let cx = (meta.start.0 + meta.velocity.0 * i as f32).rem_euclid(shape.width as f32);
            let cy = (meta.start.1 + meta.velocity.1 * i as f32).rem_euclid(shape.height as f32);
            render_frame(shape, (cx, cy), meta.radius, &bg)
        })
        .collect::<Result<_>>()?;
    Ok(ToyClip {
        frames,
        prompt,
        meta,
    })
}

/// Draw start position and radius from `rng`; velocity follows the prompt.
pub fn gen_clip(
    prompt: &[usize],
    length: usize,
    shape: LatentShape,
    rng: &mut Rng,
) -> Result<ToyClip> {
    if length == 0 {
        return Err(crate::error::invalid("clip length must be positive"));
    }
    let velocity = PromptVocab.velocity(prompt)?;
    let seed = rng.next_u64();
    let start = (
        (rng.uniform() * shape.width as f64) as f32,
        (rng.uniform() * shape.height as f64) as f32,
    );
    let radius = RADIUS_RANGE.0 + (RADIUS_RANGE.1 - RADIUS_RANGE.0) * rng.uniform() as f32;
    render_clip(
        prompt.to_vec(),
        ClipMeta {
            seed,
            start,
            velocity,
            radius,
        },
        length,
        shape,
    )
}

/// `MOTION_SCALE * mean |frame[i+1] - frame[i]|`.
pub fn motion_score(frames: &[Tensor]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(crate::error::invalid(
            "motion score needs at least two frames",
        ));
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for w in frames.windows(2) {
        for (a, b) in w[0].data().iter().zip(w[1].data()) {
            acc += (b - a).abs() as f64;
        }
        n += w[0].numel();
    }
    Ok(MOTION_SCALE * acc / n as f64)
}

/// Circular centre of mass of the bright part of each channel-0 plane.
pub fn center_of_mass(frame: &Tensor) -> (f64, f64) {
    let s = frame.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = &frame.data()[..h * w];
    let (lo, hi) = plane
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mid = 0.5 * (lo + hi);
    let (mut xc, mut xs, mut yc, mut ys) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let wt = (plane[y * w + x] - mid).max(0.0) as f64;
            let ax = TAU * x as f64 / w as f64;
            let ay = TAU * y as f64 / h as f64;
            xc += wt * ax.cos();
            xs += wt * ax.sin();
            yc += wt * ay.cos();
            ys += wt * ay.sin();
        }
    }
    let cx = xs.atan2(xc).rem_euclid(TAU) * w as f64 / TAU;
    let cy = ys.atan2(yc).rem_euclid(TAU) * h as f64 / TAU;
    (cx, cy)
}

/// Summed wrapped centre-of-mass displacement over a clip.
pub fn tracked_displacement(frames: &[Tensor]) -> (f64, f64) {
    let mut total = (0.0, 0.0);
    for w in frames.windows(2) {
        let s = w[0].shape();
        let (h, wd) = (s[s.len() - 2] as f64, s[s.len() - 1] as f64);
        let (a, b) = (center_of_mass(&w[0]), center_of_mass(&w[1]));
        let wrap = |d: f64, p: f64| {
            let d = d.rem_euclid(p);
            if d > p / 2.0 {
                d - p
            } else {
                d
            }
        };
        total.0 += wrap(b.0 - a.0, wd);
        total.1 += wrap(b.1 - a.1, h);
    }
    total
}

/// Direction token implied by tracked motion, or `None` below `min_shift` pixels.
pub fn tracked_direction(frames: &[Tensor], min_shift: f64) -> Option<&'static str> {
    let (dx, dy) = tracked_displacement(frames);
    if dx.abs().max(dy.abs()) < min_shift {
        return None;
    }
    Some(if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if dy > 0.0 {
        "down"
    } else {
        "up"
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub shape: LatentShape,
    pub clips: Vec<ToyClip>,
    pub dropped: usize,
}

const MAGIC: &[u8; 8] = b"TOYCLIPS";
pub const CORPUS_VERSION: u32 = 1;

/// Generate candidates until `n_clips` pass the motion filter `[lo, hi]`.
///
/// Candidate `i` is drawn from `rng.split_index(i)`, so the result does not
/// depend on how the work is scheduled.
pub fn build_corpus(
    n_clips: usize,
    length: usize,
    shape: LatentShape,
    bounds: (f64, f64),
    rng: &Rng,
) -> Result<Corpus> {
    if n_clips == 0 {
        return Err(crate::error::invalid("corpus needs at least one clip"));
    }
    let prompts = PromptVocab.corpus_prompts();
    let limit = n_clips.saturating_mul(100).max(1000);
    let mut clips = Vec::with_capacity(n_clips);
    let mut dropped = 0usize;
    let mut next = 0usize;
    while clips.len() < n_clips {
        if next >= limit {
            return Err(crate::error::invalid(format!(
                "motion filter [{}, {}] kept {} of {limit} candidates",
                bounds.0,
                bounds.1,
                clips.len()
            )));
        }
        let block: Vec<(ToyClip, f64)> = (next..next + n_clips)
            .into_par_iter()
            .map(|i| {
                let mut r = rng.split_index(i as u64);
                let p = &prompts[r.below(prompts.len())];
                let clip = gen_clip(p, length, shape, &mut r)?;
                let score = motion_score(&clip.frames)?;
                Ok((clip, score))
            })
            .collect::<Result<_>>()?;
        next += n_clips;
        for (clip, score) in block {
            if clips.len() == n_clips {
                break;
            }
            if score >= bounds.0 && score <= bounds.1 {
                clips.push(clip);
            } else {
                dropped += 1;
            }
        }
    }
    Ok(Corpus {
        shape,
        clips,
        dropped,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| crate::error::invalid("value does not fit the corpus format"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Corpus {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        put_u32(&mut out, self.shape.channels)?;
        put_u32(&mut out, self.shape.height)?;
        put_u32(&mut out, self.shape.width)?;
        put_u32(&mut out, self.clips.len())?;
        put_u32(&mut out, self.dropped)?;
        for clip in &self.clips {
            let m = &clip.meta;
            out.extend_from_slice(&m.seed.to_le_bytes());
            for v in [m.start.0, m.start.1, m.velocity.0, m.velocity.1, m.radius] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, clip.prompt.len())?;
            for &id in &clip.prompt {
                put_u32(&mut out, id)?;
            }
            put_u32(&mut out, clip.frames.len())?;
            for f in &clip.frames {
                for v in f.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8).ok_or_else(|| corrupt("truncated header"))?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CORPUS_VERSION {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("corpus version {version}, expected {CORPUS_VERSION}"),
            });
        }
        let mut head = [0usize; 5];
        for h in head.iter_mut() {
            *h = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        }
        let shape = LatentShape::new(head[0], head[1], head[2]);
        if shape.numel() == 0 {
            return Err(corrupt("empty latent shape"));
        }
        let mut clips = Vec::with_capacity(head[3].min(1 << 16));
        for _ in 0..head[3] {
            let seed = r.u64().ok_or_else(|| corrupt("truncated clip"))?;
            let mut fl = [0f32; 5];
            for v in fl.iter_mut() {
                *v = r.f32().ok_or_else(|| corrupt("truncated clip"))?;
            }
            let np = r.u32().ok_or_else(|| corrupt("truncated clip"))? as usize;
            let mut prompt = Vec::with_capacity(np.min(64));
            for _ in 0..np {
                let id = r.u32().ok_or_else(|| corrupt("truncated prompt"))? as usize;
                if id >= TOKENS.len() {
                    return Err(corrupt("prompt id out of range"));
                }
                prompt.push(id);
            }
            let nf = r.u32().ok_or_else(|| corrupt("truncated clip"))? as usize;
            let mut frames = Vec::with_capacity(nf.min(1 << 12));
            for _ in 0..nf {
                let raw = r
                    .take(4 * shape.numel())
                    .ok_or_else(|| corrupt("truncated frame data"))?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(corrupt("non-finite frame value"));
                }
                frames.push(Tensor::from_vec(&shape.dims(), data)?);
            }
            clips.push(ToyClip {
                frames,
                prompt,
                meta: ClipMeta {
                    seed,
                    start: (fl[0], fl[1]),
                    velocity: (fl[2], fl[3]),
                    radius: fl[4],
                },
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Corpus {
            shape,
            clips,
            dropped: head[4],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialised corpus, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Option<f32> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}
