//! Flat `key = value` configuration.
//!
//! [`Config::default`] is the full-scale profile. [`Config::desk`] keeps every
//! method constant, shrinks the optimisation budget so a model trains in
//! minutes on one CPU core, and clamps the clean-sample estimate while
//! sampling.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masked_noise::StaticNoise;
use crate::sampler::GuidanceScales;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Base channel width of the dynamic head; also the embedding size.
    pub base_width: usize,
    pub mask_width: usize,
    pub adapter_width: usize,
    pub stages: usize,
    /// `false` builds the single-head variant that predicts the noise directly.
    pub use_mask: bool,
    pub static_noise: StaticNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: GuidanceScales,
    pub t_test: usize,
    pub clip_x0: Option<f32>,
    pub augment_anchor: bool,
    pub zero_anchor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t_max: usize,
    pub drop_rate: f64,
    pub anchor_window: usize,
    pub ema_decay: f32,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub clips: usize,
    pub clip_len: usize,
    pub motion_lo: f64,
    pub motion_hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig {
                steps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
            },
            model: ModelConfig {
                channels: 1,
                height: 16,
                width: 16,
                base_width: 16,
                mask_width: 8,
                adapter_width: 8,
                stages: 3,
                use_mask: true,
                static_noise: StaticNoise::Difference,
            },
            sampler: SamplerConfig {
                steps: 50,
                guidance: GuidanceScales::default(),
                t_test: 200,
                clip_x0: None,
                augment_anchor: false,
                zero_anchor: false,
            },
            train: TrainConfig {
                steps: 258_000,
                batch_size: 480,
                lr: 1e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-2,
                t_max: 550,
                drop_rate: 0.10,
                anchor_window: 10,
                ema_decay: 0.9999,
                log_every: 50,
            },
            data: DataConfig {
                clips: 256,
                clip_len: 24,
                motion_lo: 1.0,
                motion_hi: 20.0,
            },
        }
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            "seed", seed;
            "schedule.steps", schedule.steps;
            "schedule.beta_start", schedule.beta_start;
            "schedule.beta_end", schedule.beta_end;
            "model.channels", model.channels;
            "model.height", model.height;
            "model.width", model.width;
            "model.base_width", model.base_width;
            "model.mask_width", model.mask_width;
            "model.adapter_width", model.adapter_width;
            "model.stages", model.stages;
            "model.use_mask", model.use_mask;
            "model.static_noise", model.static_noise;
            "sampler.steps", sampler.steps;
            "sampler.w_ref", sampler.guidance.w_ref;
            "sampler.w_anc", sampler.guidance.w_anc;
            "sampler.w_txt", sampler.guidance.w_txt;
            "sampler.t_test", sampler.t_test;
            "sampler.clip_x0", sampler.clip_x0;
            "sampler.augment_anchor", sampler.augment_anchor;
            "sampler.zero_anchor", sampler.zero_anchor;
            "train.steps", train.steps;
            "train.batch_size", train.batch_size;
            "train.lr", train.lr;
            "train.beta1", train.beta1;
            "train.beta2", train.beta2;
            "train.eps", train.eps;
            "train.weight_decay", train.weight_decay;
            "train.t_max", train.t_max;
            "train.drop_rate", train.drop_rate;
            "train.anchor_window", train.anchor_window;
            "train.ema_decay", train.ema_decay;
            "train.log_every", train.log_every;
            "data.clips", data.clips;
            "data.clip_len", data.clip_len;
            "data.motion_lo", data.motion_lo;
            "data.motion_hi", data.motion_hi
        )
    };
}

trait Field: Sized {
    fn parse_field(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn parse_field(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}
plain_field!(usize, u64, f32, f64, bool);

impl Field for StaticNoise {
    fn parse_field(s: &str) -> Option<Self> {
        StaticNoise::parse(s)
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl Field for Option<f32> {
    fn parse_field(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn render(&self) -> String {
        match self {
            None => "none".into(),
            Some(v) => format!("{v:?}"),
        }
    }
}

impl Config {
    /// Full-scale method constants with a budget that fits one CPU core, plus
    /// clamping of the clean-sample estimate while sampling.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.steps = 3000;
        c.train.batch_size = 16;
        c.train.lr = 1e-3;
        c.train.ema_decay = 0.999;
        c.sampler.clip_x0 = Some(1.5);
        c
    }

    pub fn keys() -> Vec<&'static str> {
        macro_rules! collect {
            ($($k:literal, $($f:ident).+);*) => { vec![$($k),*] };
        }
        fields!(collect)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($($k:literal, $($f:ident).+);*) => {
                match key {
                    $($k => {
                        self.$($f).+ = Field::parse_field(value).ok_or_else(|| {
                            Error::Config(format!("{key}: cannot parse {value:?}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            };
        }
        fields!(apply);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        macro_rules! read {
            ($($k:literal, $($f:ident).+);*) => {
                match key {
                    $($k => Some(Field::render(&self.$($f).+)),)*
                    _ => None,
                }
            };
        }
        fields!(read)
    }

    /// Parse `key = value` lines on top of `base`. `#` starts a comment.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().parse_onto(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order; [`Config::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::keys() {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.schedule;
        if s.steps == 0 || !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad(format!(
                "schedule: bad bounds {} .. {} over {}",
                s.beta_start, s.beta_end, s.steps
            ));
        }
        let m = &self.model;
        if m.channels == 0
            || m.stages == 0
            || m.base_width == 0
            || m.mask_width == 0
            || m.adapter_width == 0
        {
            return bad("model: sizes must be positive".into());
        }
        let div = 1usize << (m.stages - 1);
        if !m.height.is_multiple_of(div)
            || !m.width.is_multiple_of(div)
            || m.height < div
            || m.width < div
        {
            return bad(format!(
                "model: {}x{} not divisible by {div} for {} stages",
                m.height, m.width, m.stages
            ));
        }
        let sm = &self.sampler;
        if sm.steps == 0 || sm.steps > s.steps {
            return bad(format!("sampler.steps must be in 1..={}", s.steps));
        }
        if !sm.guidance.is_finite() {
            return bad("sampler: guidance scales must be finite".into());
        }
        if sm.t_test > s.steps {
            return bad("sampler.t_test exceeds schedule length".into());
        }
        if sm.clip_x0.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("sampler.clip_x0 must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0 && t.lr.is_finite()) || t.log_every == 0 {
            return bad("train: batch size, lr and log interval must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1)
            || !(0.0..1.0).contains(&t.beta2)
            || t.eps <= 0.0
            || t.weight_decay < 0.0
        {
            return bad("train: invalid optimiser constants".into());
        }
        if t.t_max > s.steps {
            return bad("train.t_max exceeds schedule length".into());
        }
        if !(0.0..=1.0).contains(&t.drop_rate) || !(0.0..=1.0).contains(&t.ema_decay) {
            return bad("train: drop rate and EMA decay must lie in [0, 1]".into());
        }
        if t.anchor_window == 0 {
            return bad("train.anchor_window must be positive".into());
        }
        let d = &self.data;
        if d.clips == 0
            || d.clip_len < 3
            || d.motion_lo
                .partial_cmp(&d.motion_hi)
                .is_none_or(|o| o.is_gt())
        {
            return bad("data: need clips >= 1, clip_len >= 3, motion_lo <= motion_hi".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    /// Hash of everything that shapes the weights a training run produces,
    /// except the step budget and log interval.
    pub fn training_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in Self::keys() {
            if k.starts_with("sampler.") || k == "train.steps" || k == "train.log_every" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.get(k).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::desk();
        c.sampler.clip_x0 = Some(2.0);
        c.model.static_noise = StaticNoise::LambdaNormalized;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let full = Config::default();
        assert_eq!(Config::parse(&full.to_text()).unwrap(), full);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::parse("# header\n\nseed = 7 # trailing\ntrain.steps=12\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.steps, 12);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(Config::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("seed"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(
            Config::parse("train.drop_rate = 1.5"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::parse("sampler.steps = 2000"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::parse("model.height = 10"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_ignores_budget_and_sampler() {
        let a = Config::desk();
        let mut b = a.clone();
        b.train.steps += 1;
        b.sampler.t_test = 100;
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.lr *= 2.0;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
