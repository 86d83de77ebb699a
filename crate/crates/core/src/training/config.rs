//! Training hyperparameters and their `key=value` file form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::DEFAULT_PHI;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("cannot read config: {0}")]
    Io(String),
}

/// What the second encoder pass of the chain consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftFeed {
    /// Decoder final states, fed to the encoder as they are.
    States,
    /// Softmax over the tied projection of the states, mixed back into scaled embeddings.
    ExpectedEmbedding,
}

impl SoftFeed {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::States => "states",
            Self::ExpectedEmbedding => "expected_embedding",
        }
    }
}

impl FromStr for SoftFeed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "states" => Ok(Self::States),
            "expected_embedding" => Ok(Self::ExpectedEmbedding),
            _ => Err(format!("unknown soft_feed {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the autoencoder sum; the contrastive sum gets `1 - lambda`.
    pub lambda: f64,
    pub tau: f64,
    pub eps_neg: f64,
    pub eps_pos: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub epochs: usize,
    pub beam: usize,
    pub batch_size: usize,
    /// Maximum generated length, end token included.
    pub max_len: usize,
    /// Pseudo-sources get at most this many tokens more than their target sentence.
    pub extra_len: Option<usize>,
    pub phi: f64,
    pub seed: u64,
    pub soft_feed: SoftFeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            tau: 0.1,
            eps_neg: 0.5,
            eps_pos: 1.0,
            lr: 2e-5,
            weight_decay: 0.01,
            grad_clip: 1.0,
            epochs: 3,
            beam: 4,
            batch_size: 16,
            max_len: 32,
            extra_len: None,
            phi: DEFAULT_PHI,
            seed: 0,
            soft_feed: SoftFeed::States,
        }
    }
}

const KEYS: [&str; 15] = [
    "lambda",
    "tau",
    "eps_neg",
    "eps_pos",
    "lr",
    "weight_decay",
    "grad_clip",
    "epochs",
    "beam",
    "batch_size",
    "max_len",
    "extra_len",
    "phi",
    "seed",
    "soft_feed",
];

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(format!("tau {} must be positive", self.tau));
        }
        if !(self.eps_neg > 0.0 && self.eps_neg <= 1.0) {
            bad.push(format!("eps_neg {} outside (0, 1]", self.eps_neg));
        }
        if !(self.eps_pos >= 0.0 && self.eps_pos.is_finite()) {
            bad.push(format!("eps_pos {} must be non-negative", self.eps_pos));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            bad.push(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            bad.push(format!("phi {} outside [0, 1]", self.phi));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("beam", self.beam),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if self.max_len < 2 {
            bad.push(format!("max_len {} must be at least 2", self.max_len));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "eps_neg" => self.eps_neg.to_string(),
            "eps_pos" => self.eps_pos.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "epochs" => self.epochs.to_string(),
            "beam" => self.beam.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "extra_len" => self.extra_len.map_or("none".to_owned(), |n| n.to_string()),
            "phi" => self.phi.to_string(),
            "seed" => self.seed.to_string(),
            "soft_feed" => self.soft_feed.as_str().to_owned(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "eps_neg" => self.eps_neg = num(key, value)?,
            "eps_pos" => self.eps_pos = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "extra_len" => {
                self.extra_len = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "phi" => self.phi = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "soft_feed" => self.soft_feed = value.parse()?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment. Validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| ConfigError::Syntax { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key=value".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(syntax)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 0.7);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr, 2e-5);
        assert_eq!(c.phi, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lambda = 0.25;
        c.seed = 42;
        c.extra_len = Some(2);
        c.soft_feed = SoftFeed::ExpectedEmbedding;
        let text = c.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            TrainConfig::parse("lambda 0.5"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(TrainConfig::parse("# c\nfoo=1"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(TrainConfig::parse("beam=x"), Err(ConfigError::Syntax { .. })));
        match TrainConfig::parse("lambda=1.5\ntau=0\neps_neg=0\nbeam=0") {
            Err(ConfigError::Invalid(list)) => assert_eq!(list.len(), 4, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }
}
