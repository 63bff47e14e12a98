//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::bridge::TrainConfig;
use crate::error::{Error, Result};
use crate::inference::DEFAULT_CANDIDATES;
use crate::prototypes::{default_lambda_grid, DEFAULT_EMA_MOMENTUM};
use crate::subspace::default_rank;

/// Class-order shuffle seed used by default for B-m Inc-n splits.
pub const DEFAULT_CLASS_ORDER_SEED: u64 = 1993;

/// How each task after the first adapts the bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Oracle-initialized update confined to the safe subspace.
    Bofa,
    /// Unconstrained sequential fine-tuning of the whole bridge.
    Finetune,
    /// Zero-initialized low-rank update with both factors trainable.
    Lora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bofa => "bofa",
            Method::Finetune => "finetune",
            Method::Lora => "lora",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bofa" => Ok(Method::Bofa),
            "finetune" | "ft" => Ok(Method::Finetune),
            "lora" => Ok(Method::Lora),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Subspace rank; `None` means `max(1, d_o / 8)`.
    pub k: Option<usize>,
    pub lambda_grid: Vec<f64>,
    pub ema_momentum: f64,
    pub candidate_s: usize,
    pub normalize_scatter: bool,
    /// Classes in the first task; 0 means "same as `inc_n`".
    pub base_m: usize,
    pub inc_n: usize,
    pub class_order_seed: u64,
    pub method: Method,
    /// Use every seen class's textual prototype as a negative in the training loss.
    pub include_old_negatives: bool,
    /// Two-stage decision with auxiliary heads; flat hybrid scoring otherwise.
    pub hierarchical: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: None,
            lambda_grid: default_lambda_grid(),
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            candidate_s: DEFAULT_CANDIDATES,
            normalize_scatter: false,
            base_m: 0,
            inc_n: 10,
            class_order_seed: DEFAULT_CLASS_ORDER_SEED,
            method: Method::Bofa,
            include_old_negatives: false,
            hierarchical: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean for {key}: {value:?}"))),
    }
}

/// Split `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected key = value", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tau" => self.train.tau = parse(key, value)?,
            "lr0" => self.train.lr0 = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "oracle_epochs" => self.train.oracle_epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "k" => {
                self.k = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lambda_grid" => {
                self.lambda_grid = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "ema_momentum" => self.ema_momentum = parse(key, value)?,
            "candidate_s" => self.candidate_s = parse(key, value)?,
            "normalize_scatter" => self.normalize_scatter = parse_bool(key, value)?,
            "base_m" => self.base_m = parse(key, value)?,
            "inc_n" => self.inc_n = parse(key, value)?,
            "class_order_seed" => self.class_order_seed = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "include_old_negatives" => self.include_old_negatives = parse_bool(key, value)?,
            "hierarchical" => self.hierarchical = parse_bool(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidArgument("lambda_grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument("lambda_grid values must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidArgument("ema_momentum must lie in [0, 1]".into()));
        }
        if self.candidate_s == 0 {
            return Err(Error::InvalidArgument("candidate_s must be at least 1".into()));
        }
        if self.inc_n == 0 {
            return Err(Error::InvalidArgument("inc_n must be at least 1".into()));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rank_for(&self, d_o: usize) -> usize {
        self.k.unwrap_or_else(|| default_rank(d_o)).min(d_o)
    }

    /// Canonical `key = value` text; floats print in shortest round-trip form.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let grid: Vec<String> = self.lambda_grid.iter().map(|v| v.to_string()).collect();
        let k = self.k.map_or("auto".to_string(), |k| k.to_string());
        let _ = writeln!(s, "tau = {}", self.train.tau);
        let _ = writeln!(s, "k = {k}");
        let _ = writeln!(s, "lambda_grid = {}", grid.join(","));
        let _ = writeln!(s, "ema_momentum = {}", self.ema_momentum);
        let _ = writeln!(s, "oracle_epochs = {}", self.train.oracle_epochs);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "lr0 = {}", self.train.lr0);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "candidate_s = {}", self.candidate_s);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "normalize_scatter = {}", self.normalize_scatter);
        let _ = writeln!(s, "base_m = {}", self.base_m);
        let _ = writeln!(s, "inc_n = {}", self.inc_n);
        let _ = writeln!(s, "class_order_seed = {}", self.class_order_seed);
        let _ = writeln!(s, "method = {}", self.method.as_str());
        let _ = writeln!(s, "include_old_negatives = {}", self.include_old_negatives);
        let _ = writeln!(s, "hierarchical = {}", self.hierarchical);
        s
    }
}
