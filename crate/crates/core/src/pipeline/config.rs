use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Result, SemiseError};

/// Every hyperparameter of a training and evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub margin: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    /// Model initialization, batch order, and augmentation.
    pub seed: u64,
    /// Split assignment and preference-pair sampling.
    pub data_seed: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub seg_epochs: usize,
    pub seg_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            tau: 0.5,
            margin: 1.0,
            phase1_epochs: 20,
            phase2_epochs: 40,
            batch_size: 64,
            lr_encoder: 1e-3,
            lr_heads: 1e-1,
            momentum: 0.9,
            seed: 42,
            data_seed: 7,
            train_pairs: 10_000,
            eval_pairs: 1_000,
            train_frac: 0.72,
            val_frac: 0.08,
            probe_epochs: 30,
            probe_lr: 1e-1,
            seg_epochs: 30,
            seg_lr: 1e-1,
        }
    }
}

/// Config keys in their canonical order.
pub const CONFIG_KEYS: [&str; 19] = [
    "alpha",
    "tau",
    "margin",
    "phase1_epochs",
    "phase2_epochs",
    "batch_size",
    "lr_encoder",
    "lr_heads",
    "momentum",
    "seed",
    "data_seed",
    "train_pairs",
    "eval_pairs",
    "train_frac",
    "val_frac",
    "probe_epochs",
    "probe_lr",
    "seg_epochs",
    "seg_lr",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SemiseError::Config(format!("invalid value '{value}' for '{key}'")))
}

/// `(line number, key, value)` triples of a `key = value` text; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SemiseError::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(SemiseError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Set one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "phase1_epochs" => self.phase1_epochs = parse(key, value)?,
            "phase2_epochs" => self.phase2_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_encoder" => self.lr_encoder = parse(key, value)?,
            "lr_heads" => self.lr_heads = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "train_pairs" => self.train_pairs = parse(key, value)?,
            "eval_pairs" => self.eval_pairs = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "val_frac" => self.val_frac = parse(key, value)?,
            "probe_epochs" => self.probe_epochs = parse(key, value)?,
            "probe_lr" => self.probe_lr = parse(key, value)?,
            "seg_epochs" => self.seg_epochs = parse(key, value)?,
            "seg_lr" => self.seg_lr = parse(key, value)?,
            _ => return Err(SemiseError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "tau" => self.tau.to_string(),
            "margin" => self.margin.to_string(),
            "phase1_epochs" => self.phase1_epochs.to_string(),
            "phase2_epochs" => self.phase2_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_encoder" => self.lr_encoder.to_string(),
            "lr_heads" => self.lr_heads.to_string(),
            "momentum" => self.momentum.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_pairs" => self.train_pairs.to_string(),
            "eval_pairs" => self.eval_pairs.to_string(),
            "train_frac" => self.train_frac.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "seg_epochs" => self.seg_epochs.to_string(),
            "seg_lr" => self.seg_lr.to_string(),
            _ => return None,
        })
    }

    /// Defaults overridden by a config file's entries, then validated.
    /// Errors name the offending line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line, k, v) in parse_key_values(text)? {
            cfg.set(&k, &v).map_err(|e| match e {
                SemiseError::Config(m) => SemiseError::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::from_text(&text).map_err(|e| match e {
            SemiseError::Config(m) => SemiseError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    /// Hex prefix of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SemiseError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("margin", self.margin),
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
            ("probe_lr", self.probe_lr),
            ("seg_lr", self.seg_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return fail(format!("batch_size must be even and at least 4, got {}", self.batch_size));
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac < 1.0) {
            return fail(format!(
                "split fractions train={} val={} must leave a test share",
                self.train_frac, self.val_frac
            ));
        }
        if self.train_pairs == 0 || self.eval_pairs == 0 {
            return fail("pair counts must be positive".into());
        }
        Ok(())
    }
}
