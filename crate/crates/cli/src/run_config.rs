//! The `train` command's `key=value` file: every training hyperparameter plus
//! the data, model and warm-start settings around it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use biacl::training::{ConfigError, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Output directory of `prepare`.
    pub data: PathBuf,
    /// Target-to-source dictionary.
    pub dict: PathBuf,
    pub target_lang: String,
    pub source_lang: String,
    /// Checkpoint to continue from; a fresh model otherwise.
    pub init: Option<PathBuf>,
    /// Optional `source<TAB>target` file for supervised training before Bi-ACL.
    pub parallel: Option<PathBuf>,
    pub warm_epochs: usize,
    pub warm_lr: f64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

const RUN_KEYS: [&str; 13] = [
    "data",
    "dict",
    "target_lang",
    "source_lang",
    "init",
    "parallel",
    "warm_epochs",
    "warm_lr",
    "d_model",
    "layers",
    "heads",
    "ff_dim",
    "max_positions",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: PathBuf::new(),
            dict: PathBuf::new(),
            target_lang: "tgt".into(),
            source_lang: "src".into(),
            init: None,
            parallel: None,
            warm_epochs: 5,
            warm_lr: 1e-3,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_positions: 64,
        }
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let path = |v: &str| base.join(v);
        match key {
            "data" => self.data = path(value),
            "dict" => self.dict = path(value),
            "target_lang" => self.target_lang = value.to_owned(),
            "source_lang" => self.source_lang = value.to_owned(),
            "init" => self.init = (value != "none").then(|| path(value)),
            "parallel" => self.parallel = (value != "none").then(|| path(value)),
            "warm_epochs" => self.warm_epochs = num(key, value)?,
            "warm_lr" => self.warm_lr = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ff_dim" => self.ff_dim = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            _ => return self.train.set(key, value),
        }
        Ok(())
    }

    /// Applies file lines, then overrides; paths in the file are relative to
    /// `base`, paths in overrides to the working directory. Reports every
    /// problem at once.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim(), base) {
                        errs.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => errs.push(format!("line {}: expected key=value", i + 1)),
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim(), Path::new("")) {
                        errs.push(format!("--set {o}: {e}"));
                    }
                }
                None => errs.push(format!("--set {o}: expected key=value")),
            }
        }
        if cfg.data.as_os_str().is_empty() {
            errs.push("data is required".into());
        }
        if cfg.dict.as_os_str().is_empty() {
            errs.push("dict is required".into());
        }
        if cfg.target_lang == cfg.source_lang {
            errs.push("target_lang and source_lang must differ".into());
        }
        if !(cfg.warm_lr > 0.0 && cfg.warm_lr.is_finite()) {
            errs.push(format!("warm_lr {} must be positive", cfg.warm_lr));
        }
        if let Err(ConfigError::Invalid(v)) = cfg.train.validate() {
            errs.extend(v);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errs))
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, overrides)
    }

    /// Every key with its effective value.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = self
            .train
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_owned(), |p| p.display().to_string());
        let values = [
            self.data.display().to_string(),
            self.dict.display().to_string(),
            self.target_lang.clone(),
            self.source_lang.clone(),
            opt(&self.init),
            opt(&self.parallel),
            self.warm_epochs.to_string(),
            self.warm_lr.to_string(),
            self.d_model.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.ff_dim.to_string(),
            self.max_positions.to_string(),
        ];
        for (k, v) in RUN_KEYS.iter().zip(values) {
            m.insert((*k).to_owned(), v);
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.snapshot().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let text = "# demo\ndata=prep\ndict = d.tsv\nlambda=0.5\n";
        let c = RunConfig::parse(text, Path::new("/base"), &["lambda=0.9".into(), "init=m.ckpt".into()]).unwrap();
        assert_eq!(c.data, PathBuf::from("/base/prep"));
        assert_eq!(c.dict, PathBuf::from("/base/d.tsv"));
        assert_eq!(c.train.lambda, 0.9);
        assert_eq!(c.init, Some(PathBuf::from("m.ckpt")));
    }

    #[test]
    fn all_errors_at_once() {
        let text = "lambda=2\nbogus=1\nepochs=x\nno equals sign\nbeam=0\n";
        let Err(CliError::Config(errs)) = RunConfig::parse(text, Path::new(""), &[]) else {
            panic!("expected config error");
        };
        let joined = errs.join("\n");
        for needle in ["bogus", "epochs", "line 4", "data is required", "dict is required", "lambda 2", "beam"] {
            assert!(joined.contains(needle), "{needle} missing from {joined}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::parse("data=a\ndict=b\nsoft_feed=expected_embedding\n", Path::new(""), &[]).unwrap();
        let again = RunConfig::parse(&c.to_text(), Path::new(""), &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.snapshot().len(), 28);
    }
}
