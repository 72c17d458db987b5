//! Run configuration: `key = value` lines, `#` comments, every key optional.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::storygan::{Ablation, TrainConfig};
use crate::text_encoder::{EncoderConfig, Pooling, PretrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub embed_dim: usize,
    pub dim: usize,
    pub max_len: usize,
    pub pooling: Pooling,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let e = EncoderConfig::new(0);
        Self {
            embed_dim: e.embed_dim,
            dim: e.dim,
            max_len: e.max_len,
            pooling: e.pooling,
        }
    }
}

impl EncoderSettings {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            dim: self.dim,
            max_len: self.max_len,
            pooling: self.pooling,
            ..EncoderConfig::new(vocab_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderSettings,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
    pub train_seeds: Range<u64>,
    pub test_seeds: Range<u64>,
    pub frames: usize,
    /// Test stories used by `eval` (0 means all).
    pub eval_stories: usize,
    pub eval_seed: u64,
    /// Optional defaults for the command-line paths.
    pub data_dir: String,
    pub encoder_path: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            encoder: EncoderSettings::default(),
            pretrain: PretrainConfig::default(),
            pretrain_seed: 0,
            train_seeds: 0..1000,
            test_seeds: 1000..1200,
            frames: 5,
            eval_stories: 0,
            eval_seed: 0,
            data_dir: String::new(),
            encoder_path: String::new(),
            out_dir: String::new(),
        }
    }
}

pub fn parse_range(s: &str) -> Result<Range<u64>> {
    let bad = || Error::Config(format!("expected a seed range A..B, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(Error::Config(format!("empty seed range {a}..{b}")));
    }
    Ok(a..b)
}

fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::Mean => "mean",
        Pooling::Last => "last",
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key '{key}'")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 32] = [
        "image_size",
        "base_channels",
        "noise_dim",
        "steps",
        "batch",
        "lr",
        "beta1",
        "beta2",
        "tau",
        "ablation",
        "seed",
        "attention.share_projections",
        "shared_noise",
        "sample_every",
        "encoder.embed_dim",
        "encoder.dim",
        "encoder.max_len",
        "encoder.pooling",
        "pretrain.steps",
        "pretrain.batch",
        "pretrain.lr",
        "pretrain.beta1",
        "pretrain.beta2",
        "pretrain.seed",
        "data.train_seeds",
        "data.test_seeds",
        "data.frames",
        "eval.stories",
        "eval.seed",
        "paths.data",
        "paths.encoder",
        "paths.out",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "image_size" => t.image_size = value(key, v)?,
            "base_channels" => t.base_channels = value(key, v)?,
            "noise_dim" => t.noise_dim = value(key, v)?,
            "steps" => t.steps = value(key, v)?,
            "batch" => t.batch = value(key, v)?,
            "lr" => t.lr = value(key, v)?,
            "beta1" => t.beta1 = value(key, v)?,
            "beta2" => t.beta2 = value(key, v)?,
            "tau" => t.tau = value(key, v)?,
            "ablation" => t.ablation = Ablation::parse(v)?,
            "seed" => t.seed = value(key, v)?,
            "attention.share_projections" => t.share_projections = value(key, v)?,
            "shared_noise" => t.shared_noise = value(key, v)?,
            "sample_every" => t.sample_every = value(key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = value(key, v)?,
            "encoder.dim" => self.encoder.dim = value(key, v)?,
            "encoder.max_len" => self.encoder.max_len = value(key, v)?,
            "encoder.pooling" => {
                self.encoder.pooling = match v {
                    "mean" => Pooling::Mean,
                    "last" => Pooling::Last,
                    _ => return Err(Error::Config(format!("encoder.pooling must be mean or last, got {v:?}"))),
                }
            }
            "pretrain.steps" => self.pretrain.steps = value(key, v)?,
            "pretrain.batch" => self.pretrain.batch = value(key, v)?,
            "pretrain.lr" => self.pretrain.lr = value(key, v)?,
            "pretrain.beta1" => self.pretrain.beta1 = value(key, v)?,
            "pretrain.beta2" => self.pretrain.beta2 = value(key, v)?,
            "pretrain.seed" => self.pretrain_seed = value(key, v)?,
            "data.train_seeds" => self.train_seeds = parse_range(v)?,
            "data.test_seeds" => self.test_seeds = parse_range(v)?,
            "data.frames" => self.frames = value(key, v)?,
            "eval.stories" => self.eval_stories = value(key, v)?,
            "eval.seed" => self.eval_seed = value(key, v)?,
            "paths.data" => self.data_dir = v.to_string(),
            "paths.encoder" => self.encoder_path = v.to_string(),
            "paths.out" => self.out_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let range = |r: &Range<u64>| format!("{}..{}", r.start, r.end);
        match key {
            "image_size" => t.image_size.to_string(),
            "base_channels" => t.base_channels.to_string(),
            "noise_dim" => t.noise_dim.to_string(),
            "steps" => t.steps.to_string(),
            "batch" => t.batch.to_string(),
            "lr" => format!("{:?}", t.lr),
            "beta1" => format!("{:?}", t.beta1),
            "beta2" => format!("{:?}", t.beta2),
            "tau" => format!("{:?}", t.tau),
            "ablation" => t.ablation.name().to_string(),
            "seed" => t.seed.to_string(),
            "attention.share_projections" => t.share_projections.to_string(),
            "shared_noise" => t.shared_noise.to_string(),
            "sample_every" => t.sample_every.to_string(),
            "encoder.embed_dim" => self.encoder.embed_dim.to_string(),
            "encoder.dim" => self.encoder.dim.to_string(),
            "encoder.max_len" => self.encoder.max_len.to_string(),
            "encoder.pooling" => pooling_name(self.encoder.pooling).to_string(),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.batch" => self.pretrain.batch.to_string(),
            "pretrain.lr" => format!("{:?}", self.pretrain.lr),
            "pretrain.beta1" => format!("{:?}", self.pretrain.beta1),
            "pretrain.beta2" => format!("{:?}", self.pretrain.beta2),
            "pretrain.seed" => self.pretrain_seed.to_string(),
            "data.train_seeds" => range(&self.train_seeds),
            "data.test_seeds" => range(&self.test_seeds),
            "data.frames" => self.frames.to_string(),
            "eval.stories" => self.eval_stories.to_string(),
            "eval.seed" => self.eval_seed.to_string(),
            "paths.data" => self.data_dir.clone(),
            "paths.encoder" => self.encoder_path.clone(),
            "paths.out" => self.out_dir.clone(),
            _ => unreachable!("key list and getter disagree on {key}"),
        }
    }

    /// Parses config text on top of the defaults. Unknown or repeated keys
    /// are errors that name the key and its line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", no + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(at(format!("key '{k}' given twice")));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.encoder.dim < 2 || self.encoder.dim % 2 != 0 {
            return Err(Error::Config(format!("encoder.dim must be even, got {}", self.encoder.dim)));
        }
        if self.encoder.embed_dim == 0 || self.encoder.max_len == 0 {
            return Err(Error::Config("encoder.embed_dim and encoder.max_len must be positive".into()));
        }
        if self.pretrain.batch < 2 {
            return Err(Error::Config("pretrain.batch must be at least 2".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("data.frames must be positive".into()));
        }
        if ranges_overlap(&self.train_seeds, &self.test_seeds) {
            return Err(Error::Config("data.train_seeds and data.test_seeds overlap".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }
}

pub fn ranges_overlap(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = RunConfig::parse("# toy run\n\nsteps = 10   # short\nablation = sa_only\nlr=0.001\n").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.ablation, Ablation::SaOnly);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.tau, 1.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("stpes = 3\n").unwrap_err().to_string();
        assert!(e.contains("stpes") && e.contains("line 1"), "{e}");
    }

    #[test]
    fn bad_values_and_duplicates_fail() {
        assert!(RunConfig::parse("steps = many").is_err());
        assert!(RunConfig::parse("steps = 1\nsteps = 2").is_err());
        assert!(RunConfig::parse("tau = 0").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("data.train_seeds = 0..10\ndata.test_seeds = 5..20").is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("3..7").unwrap(), 3..7);
        assert!(parse_range("7..3").is_err());
        assert!(parse_range("3-7").is_err());
        assert!(ranges_overlap(&(0..10), &(9..12)));
        assert!(!ranges_overlap(&(0..10), &(10..12)));
    }
}
