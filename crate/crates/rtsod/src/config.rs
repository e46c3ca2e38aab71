//! Run configuration: a flat `key = value` text format with `#` comment
//! lines. Unknown and duplicate keys are errors, so configs stay honest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write config {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("duplicate config key `{key}` (line {line})")]
    DuplicateKey { key: String, line: usize },
    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Hyperparameters and switches for every command.
///
/// `attention_dim` is the query/key/value width of the semantic-fusion
/// attention block and must equal `backbone_channels[3]`; the per-level
/// fusion blocks always use that level's channel count so their residual
/// connection type-checks.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input_size: usize,
    pub backbone_channels: [usize; 4],
    pub adapter_dim: usize,
    pub attention_dim: usize,
    pub semantic_channels: usize,
    pub decoder_channels: usize,
    pub estimator_iterations: usize,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub data_root: PathBuf,
    pub disable_she: bool,
    pub disable_iimc: bool,
    pub disable_intra: bool,
    pub disable_semantics: bool,
    pub disable_adapter: bool,
    pub thermal_as_rgb: bool,
    pub full_finetune_estimator: bool,
}

impl RunConfig {
    /// Reference hyperparameters: 384 px inputs, 80 epochs, lr 1e-5.
    pub fn paper() -> Self {
        RunConfig {
            input_size: 384,
            backbone_channels: [32, 64, 128, 256],
            adapter_dim: 16,
            attention_dim: 256,
            semantic_channels: 64,
            decoder_channels: 64,
            estimator_iterations: 6,
            bce_weight: 1.0,
            dice_weight: 1.0,
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 80,
            rng_seed: 0,
            data_root: PathBuf::new(),
            disable_she: false,
            disable_iimc: false,
            disable_intra: false,
            disable_semantics: false,
            disable_adapter: false,
            thermal_as_rgb: false,
            full_finetune_estimator: false,
        }
    }

    /// Desk-scale defaults for toy runs: 192 px inputs, 30 epochs.
    pub fn desk() -> Self {
        RunConfig {
            input_size: 192,
            epochs: 30,
            ..RunConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(ConfigError::Invalid(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        for (i, &c) in self.backbone_channels.iter().enumerate() {
            if c == 0 {
                return Err(ConfigError::Invalid(format!(
                    "backbone_channels[{i}] must be positive"
                )));
            }
        }
        for (name, v) in [
            ("adapter_dim", self.adapter_dim),
            ("attention_dim", self.attention_dim),
            ("semantic_channels", self.semantic_channels),
            ("decoder_channels", self.decoder_channels),
            ("estimator_iterations", self.estimator_iterations),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.attention_dim != self.backbone_channels[3] {
            return Err(ConfigError::Invalid(format!(
                "attention_dim ({}) must equal backbone_channels[3] ({}) so the \
                 fusion residual type-checks",
                self.attention_dim, self.backbone_channels[3]
            )));
        }
        for (name, v) in [
            ("bce_weight", self.bce_weight),
            ("dice_weight", self.dice_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ConfigError::Invalid("lr must be finite and positive".into()));
        }
        Ok(())
    }

    /// Parses, overriding fields of `self`; validates the result.
    pub fn parse_str(&self, text: &str) -> Result<RunConfig, ConfigError> {
        let mut out = self.clone();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some(eq) = t.find('=') else {
                return Err(ConfigError::BadLine { line });
            };
            let key = t[..eq].trim().to_string();
            let val = t[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::BadLine { line });
            }
            if seen.contains(&key) {
                return Err(ConfigError::DuplicateKey { key, line });
            }
            seen.push(key.clone());
            out.set_key(&key, &val, line)?;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        base.parse_str(&text)
    }

    fn set_key(&mut self, key: &str, val: &str, line: usize) -> Result<(), ConfigError> {
        fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
            ConfigError::BadValue {
                key: key.to_string(),
                reason: reason.into(),
            }
        }
        fn usize_of(key: &str, val: &str) -> Result<usize, ConfigError> {
            val.parse().map_err(|_| bad(key, format!("`{val}` is not a non-negative integer")))
        }
        fn f64_of(key: &str, val: &str) -> Result<f64, ConfigError> {
            val.parse().map_err(|_| bad(key, format!("`{val}` is not a number")))
        }
        fn bool_of(key: &str, val: &str) -> Result<bool, ConfigError> {
            match val {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(key, format!("`{val}` is not `true` or `false`"))),
            }
        }
        match key {
            "input_size" => self.input_size = usize_of(key, val)?,
            "backbone_channels" => {
                let parts: Vec<&str> = val.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(bad(key, "expected four comma-separated integers"));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.backbone_channels[i] = usize_of(key, p)?;
                }
            }
            "adapter_dim" => self.adapter_dim = usize_of(key, val)?,
            "attention_dim" => self.attention_dim = usize_of(key, val)?,
            "semantic_channels" => self.semantic_channels = usize_of(key, val)?,
            "decoder_channels" => self.decoder_channels = usize_of(key, val)?,
            "estimator_iterations" => self.estimator_iterations = usize_of(key, val)?,
            "bce_weight" => self.bce_weight = f64_of(key, val)?,
            "dice_weight" => self.dice_weight = f64_of(key, val)?,
            "lr" => self.lr = f64_of(key, val)?,
            "weight_decay" => self.weight_decay = f64_of(key, val)?,
            "batch_size" => self.batch_size = usize_of(key, val)?,
            "epochs" => self.epochs = usize_of(key, val)?,
            "rng_seed" => {
                self.rng_seed = val
                    .parse()
                    .map_err(|_| bad(key, format!("`{val}` is not a u64 seed")))?
            }
            "data_root" => self.data_root = PathBuf::from(val),
            "disable_she" => self.disable_she = bool_of(key, val)?,
            "disable_iimc" => self.disable_iimc = bool_of(key, val)?,
            "disable_intra" => self.disable_intra = bool_of(key, val)?,
            "disable_semantics" => self.disable_semantics = bool_of(key, val)?,
            "disable_adapter" => self.disable_adapter = bool_of(key, val)?,
            "thermal_as_rgb" => self.thermal_as_rgb = bool_of(key, val)?,
            "full_finetune_estimator" => self.full_finetune_estimator = bool_of(key, val)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Stable text form; floats use the shortest round-tripping notation.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let c = self.backbone_channels;
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "backbone_channels = {},{},{},{}", c[0], c[1], c[2], c[3]);
        let _ = writeln!(s, "adapter_dim = {}", self.adapter_dim);
        let _ = writeln!(s, "attention_dim = {}", self.attention_dim);
        let _ = writeln!(s, "semantic_channels = {}", self.semantic_channels);
        let _ = writeln!(s, "decoder_channels = {}", self.decoder_channels);
        let _ = writeln!(s, "estimator_iterations = {}", self.estimator_iterations);
        let _ = writeln!(s, "bce_weight = {}", self.bce_weight);
        let _ = writeln!(s, "dice_weight = {}", self.dice_weight);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "rng_seed = {}", self.rng_seed);
        let _ = writeln!(s, "data_root = {}", self.data_root.display());
        let _ = writeln!(s, "disable_she = {}", self.disable_she);
        let _ = writeln!(s, "disable_iimc = {}", self.disable_iimc);
        let _ = writeln!(s, "disable_intra = {}", self.disable_intra);
        let _ = writeln!(s, "disable_semantics = {}", self.disable_semantics);
        let _ = writeln!(s, "disable_adapter = {}", self.disable_adapter);
        let _ = writeln!(s, "thermal_as_rgb = {}", self.thermal_as_rgb);
        let _ = writeln!(s, "full_finetune_estimator = {}", self.full_finetune_estimator);
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.serialize()).map_err(|source| ConfigError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Number of feature levels; fixed by the four-stage encoder.
    pub fn levels(&self) -> usize {
        4
    }

    /// Spatial size of pyramid level `i` (0-based) for square inputs.
    pub fn level_size(&self, i: usize) -> usize {
        self.input_size >> (i + 2)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper()
    }
}
