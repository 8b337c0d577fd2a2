//! Pipeline settings: defaults, overridden by a TOML file, overridden by flags.

use std::fmt;
use std::path::Path;

use clap::{Args, ValueEnum};
use flowgraph_core::eval::{EvalConfig, DEFAULT_THRESHOLD};
use flowgraph_core::model::train::TrainConfig;
use flowgraph_core::stability::{StabilityConfig, HISTOGRAM_BINS};
use flowgraph_core::{Exec, ModelConfig};
use serde::Deserialize;

/// A problem with how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl From<ExecMode> for Exec {
    fn from(m: ExecMode) -> Exec {
        match m {
            ExecMode::Sequential => Exec::Sequential,
            ExecMode::Parallel => Exec::Parallel,
        }
    }
}

/// Settings shared by all subcommands. Every field is optional here; unset
/// values come from the config file, then from the defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Seed for splits, sampling, dropout and initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Packets kept per flow.
    #[arg(long, global = true)]
    pub max_packets: Option<usize>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Attention heads; must divide the hidden width.
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Neighbors sampled for the hop nearest the target.
    #[arg(long, global = true)]
    pub sample_first: Option<usize>,
    #[arg(long, global = true)]
    pub sample_second: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// Minimum top probability for a known-class verdict.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Environment splits averaged during feature selection.
    #[arg(long, global = true)]
    pub splits: Option<usize>,
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, global = true, value_enum)]
    pub exec: Option<ExecMode>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub seed: u64,
    pub max_packets: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: f64,
    pub stability: StabilityConfig,
    pub folds: usize,
    pub precision: Precision,
    pub exec: Exec,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }

    /// `self` wins over `other`.
    pub fn or(self, other: Settings) -> Settings {
        macro_rules! merge {
            ($($f:ident),*) => { Settings { $($f: self.$f.or(other.$f)),* } };
        }
        merge!(
            seed, max_packets, hidden, heads, sample_first, sample_second, batch_size, learning_rate, epochs,
            patience, dropout, threshold, splits, bins, folds, precision, exec
        )
    }

    pub fn resolve(self) -> Result<Pipeline, UsageError> {
        let seed = self.seed.unwrap_or(0);
        let exec: Exec = self.exec.map(Into::into).unwrap_or_default();
        let mut model = ModelConfig::new(1, 2);
        model.hidden = self.hidden.unwrap_or(model.hidden);
        model.heads = self.heads.unwrap_or(model.heads);
        model.sample_first = self.sample_first.unwrap_or(model.sample_first);
        model.sample_second = self.sample_second.unwrap_or(model.sample_second);
        model.dropout = self.dropout.unwrap_or(model.dropout);
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            patience: self.patience.unwrap_or(defaults.patience),
            seed,
            exec,
            ..defaults
        };
        let p = Pipeline {
            seed,
            max_packets: self.max_packets.unwrap_or(20),
            model,
            train,
            threshold: self.threshold.unwrap_or(DEFAULT_THRESHOLD),
            stability: StabilityConfig {
                seed,
                splits: self.splits.unwrap_or(1),
                bins: self.bins.unwrap_or(HISTOGRAM_BINS),
                exec,
            },
            folds: self.folds.unwrap_or(5),
            precision: self.precision.unwrap_or(Precision::F64),
            exec,
        };
        p.validate()?;
        Ok(p)
    }
}

impl Pipeline {
    fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(m));
        if self.max_packets < 2 {
            return bad(format!("max-packets must be at least 2, got {}", self.max_packets));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return bad("batch-size and epochs must be positive".into());
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return bad(format!("learning-rate must be non-negative, got {}", self.train.learning_rate));
        }
        if self.stability.splits == 0 || self.stability.bins == 0 {
            return bad("splits and bins must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be a finite number".into());
        }
        // input width and class count are placeholders at this point
        ModelConfig { input_dim: 1, num_classes: 2, ..self.model }
            .validate()
            .map_err(|e| UsageError(e.to_string()))
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            folds: self.folds,
            seed: self.seed,
            model: self.model,
            train: self.train,
            stability: self.stability,
            threshold: self.threshold,
            timing_repetitions: 5,
            exec: self.exec,
        }
    }
}
