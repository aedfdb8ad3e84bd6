//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::stream::GenerationConfig;
use crate::tensor::AdamConfig;
use crate::training::{ScheduleKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Per-pixel AR(1) video with coefficient `rho`.
    Ar1,
    /// Moving bar.
    Bar,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar1" => Ok(Self::Ar1),
            "bar" => Ok(Self::Bar),
            other => Err(Error::Config(format!("unknown data source '{other}' (ar1|bar)"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ar1 => "ar1",
            Self::Bar => "bar",
        })
    }
}

/// Every tunable of a run. Each field has a default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    /// Substeps per iteration `n`.
    pub substeps: usize,
    /// Frames to generate `K`.
    pub frames: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub data: DataSource,
    pub rho: f64,
    /// Length of the synthetic training video.
    pub video_len: usize,
    pub bar_width: usize,
    pub bar_velocity: i64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: DenoiserConfig::default(),
            substeps: 4,
            frames: 16,
            steps: t.steps,
            schedule: t.kind,
            batch_size: t.batch_size,
            adam: t.adam,
            data: DataSource::Ar1,
            rho: 0.9,
            video_len: 256,
            bar_width: 3,
            bar_velocity: 1,
            seed: 42,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "frame_h" => m.frame_h = parse(key, value)?,
            "frame_w" => m.frame_w = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "patch_h" => m.patch_h = parse(key, value)?,
            "patch_w" => m.patch_w = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "window" => m.window = parse(key, value)?,
            "bov_enabled" => m.bov_enabled = parse(key, value)?,
            "substeps" => self.substeps = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "data" => self.data = value.parse()?,
            "rho" => self.rho = parse(key, value)?,
            "video_len" => self.video_len = parse(key, value)?,
            "bar_width" => self.bar_width = parse(key, value)?,
            "bar_velocity" => self.bar_velocity = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{raw}'", no + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", no + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("frame_h", &m.frame_h);
        kv("frame_w", &m.frame_w);
        kv("channels", &m.channels);
        kv("patch_h", &m.patch_h);
        kv("patch_w", &m.patch_w);
        kv("hidden", &m.hidden);
        kv("depth", &m.depth);
        kv("heads", &m.heads);
        kv("window", &m.window);
        kv("bov_enabled", &m.bov_enabled);
        kv("substeps", &self.substeps);
        kv("frames", &self.frames);
        kv("steps", &self.steps);
        kv("schedule", &self.schedule);
        kv("batch_size", &self.batch_size);
        kv("lr", &self.adam.lr);
        kv("beta1", &self.adam.beta1);
        kv("beta2", &self.adam.beta2);
        kv("adam_eps", &self.adam.eps);
        kv("weight_decay", &self.adam.weight_decay);
        kv("data", &self.data);
        kv("rho", &self.rho);
        kv("video_len", &self.video_len);
        kv("bar_width", &self.bar_width);
        kv("bar_velocity", &self.bar_velocity);
        kv("seed", &self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generation().validate()?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.video_len <= self.model.window {
            return Err(Error::Config(format!(
                "video_len {} must exceed window {}",
                self.video_len, self.model.window
            )));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            window: self.model.window,
            substeps: self.substeps,
            frames: self.frames,
            seed: self.seed,
            bov_enabled: self.model.bov_enabled,
            noise_scale: 1.0,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            kind: self.schedule,
            batch_size: self.batch_size,
            adam: self.adam,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let d = RunConfig::default();
        assert_eq!(d.seed, 42);
        assert_eq!(RunConfig::parse_text(&d.to_text()).unwrap(), d);
        let c = RunConfig::parse_text("# toy\nhidden = 32 # narrower\n\nschedule = random\nseed=7\n").unwrap();
        assert_eq!((c.model.hidden, c.schedule, c.seed), (32, ScheduleKind::Random, 7));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in ["colour = red", "hidden = many", "just words", "schedule = cosine", "data = mp4"] {
            assert!(matches!(RunConfig::parse_text(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(matches!(RunConfig::load("/nonexistent/run.cfg"), Err(Error::Config(_))));
    }
}
