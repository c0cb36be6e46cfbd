//! Flat JSON experiment specification with defaults and validation.
//! Precedence: command-line flags > file values > built-in defaults.

use gib_core::backbone::BackboneKind;
use gib_core::channel::ChannelConfig;
use gib_core::seeds::derive;
use gib_core::trainer::{
    CodebookUpdate, MineSchedule, QuantizationKind, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SpecError {
    #[error("spec: {0}")]
    Invalid(String),
    #[error("spec {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the graphs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    Tudataset,
    Synthetic,
}

/// Which quantity the evaluation sweeps over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    Epsilon,
    SymbolErrorRate,
    Beta,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::SymbolErrorRate => "symbol_error_rate",
            SweepAxis::Beta => "beta",
        }
    }
}

/// Ablation variants the `ablate` command can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoLMi,
    NoLCon,
    BetaSweep,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_folds() -> usize {
    10
}
fn default_fold_seed() -> u64 {
    11
}
fn default_seed() -> u64 {
    7
}
fn default_hidden() -> usize {
    16
}
fn default_beta() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    5.0
}
fn default_lambda() -> f64 {
    0.25
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    100
}
fn default_inner() -> usize {
    5
}
fn default_draws() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_mine_lr() -> f64 {
    1e-4
}
fn default_backbone() -> BackboneKind {
    BackboneKind::Gcn
}
fn default_codebook() -> usize {
    256
}
fn default_chunks() -> usize {
    1
}
fn default_train_snr() -> f64 {
    5.0
}
fn default_train_epsilon() -> f64 {
    0.94
}
fn default_train_ser() -> f64 {
    0.01
}
fn default_synth_count() -> usize {
    200
}
fn default_synth_seed() -> u64 {
    7
}
fn default_eval_snrs() -> Vec<f64> {
    vec![-15.0, -5.0, 5.0, 15.0, 25.0]
}
fn default_beta_sweep() -> Vec<f64> {
    vec![0.01, 0.1, 0.3, 0.5, 0.7]
}
fn default_hidden_dims() -> Vec<usize> {
    vec![16, 32]
}
fn default_ablations() -> Vec<AblationVariant> {
    vec![AblationVariant::Full, AblationVariant::NoLCon]
}
fn default_quantization() -> String {
    "vq".into()
}
fn default_scalar8_lo() -> f64 {
    -4.0
}
fn default_scalar8_hi() -> f64 {
    4.0
}
fn default_dropout() -> f64 {
    0.5
}

/// The experiment description, as stored on disk. All fields have
/// defaults so a minimal spec stays small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub tudataset_path: Option<PathBuf>,
    #[serde(default)]
    pub tudataset_name: Option<String>,
    #[serde(default = "default_synth_count")]
    pub synthetic_count: usize,
    #[serde(default = "default_synth_seed")]
    pub synthetic_seed: u64,

    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_fold_seed")]
    pub fold_seed: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,

    #[serde(default = "default_backbone")]
    pub backbone: BackboneKind,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda_cm: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default = "default_draws")]
    pub noise_draws: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_mine_lr")]
    pub mine_learning_rate: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,

    #[serde(default)]
    pub digital: bool,
    #[serde(default = "default_codebook")]
    pub codebook_size: usize,
    #[serde(default = "default_chunks")]
    pub chunks: usize,
    /// "vq" or "scalar8"
    #[serde(default = "default_quantization")]
    pub quantization: String,
    #[serde(default = "default_scalar8_lo")]
    pub scalar8_lo: f64,
    #[serde(default = "default_scalar8_hi")]
    pub scalar8_hi: f64,

    #[serde(default = "default_train_snr")]
    pub train_snr_db: f64,
    #[serde(default = "default_train_epsilon")]
    pub train_epsilon: f64,
    #[serde(default = "default_train_ser")]
    pub train_symbol_error_rate: f64,

    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    /// Evaluation SNRs for the beta sweep (its table has SNR columns).
    #[serde(default = "default_eval_snrs")]
    pub eval_snrs: Vec<f64>,

    #[serde(default)]
    pub drop_l_mi: bool,
    #[serde(default)]
    pub drop_l_con: bool,
    #[serde(default = "default_ablations")]
    pub ablations: Vec<AblationVariant>,
    #[serde(default = "default_beta_sweep")]
    pub beta_sweep: Vec<f64>,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,

    /// Also write per-node subgraph-membership probabilities for every
    /// held-out graph (assignments.csv).
    #[serde(default)]
    pub dump_assignments: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// When false (default) the CSV wall-time column is written as zero so
    /// reruns are byte-identical; measured timings always go to the
    /// manifest.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        let content = std::fs::read_to_string(path)?;
        // a manifest embeds the spec under "spec"; accept both layouts
        let value: serde_json::Value =
            serde_json::from_str(&content).map_err(|e| SpecError::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: {}", e.line(), e),
            })?;
        let spec_value = if value.get("format").is_some() {
            value
                .get("spec")
                .cloned()
                .ok_or_else(|| SpecError::Parse {
                    path: path.display().to_string(),
                    detail: "manifest without a 'spec' object".into(),
                })?
        } else {
            value
        };
        serde_json::from_value(spec_value).map_err(|e| SpecError::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: {}", e.line(), e),
        })
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.sweep_values.is_empty() {
            return Err(SpecError::Invalid("sweep_values must not be empty".into()));
        }
        if self.sweep_values.iter().any(|v| !v.is_finite()) {
            return Err(SpecError::Invalid("sweep_values must be finite".into()));
        }
        let mut sorted = self.sweep_values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        sorted.dedup();
        if sorted != self.sweep_values {
            return Err(SpecError::Invalid(
                "sweep_values must be sorted and distinct".into(),
            ));
        }
        match self.corpus {
            CorpusSource::Tudataset => {
                if self.tudataset_path.is_none() || self.tudataset_name.is_none() {
                    return Err(SpecError::Invalid(
                        "tudataset corpus needs tudataset_path and tudataset_name".into(),
                    ));
                }
            }
            CorpusSource::Synthetic => {}
        }
        match self.sweep_axis {
            SweepAxis::SnrDb | SweepAxis::Beta => {
                if self.digital {
                    return Err(SpecError::Invalid(format!(
                        "sweep axis {} requires the analog pipeline",
                        self.sweep_axis.name()
                    )));
                }
            }
            SweepAxis::Epsilon | SweepAxis::SymbolErrorRate => {
                if !self.digital {
                    return Err(SpecError::Invalid(format!(
                        "sweep axis {} requires the digital pipeline",
                        self.sweep_axis.name()
                    )));
                }
                if self.sweep_axis == SweepAxis::Epsilon
                    && self.sweep_values.iter().any(|&v| !(0.0..=1.0).contains(&v))
                {
                    return Err(SpecError::Invalid("epsilon values must lie in [0, 1]".into()));
                }
            }
        }
        if self.quantization != "vq" && self.quantization != "scalar8" {
            return Err(SpecError::Invalid(format!(
                "unknown quantization '{}' (vq|scalar8)",
                self.quantization
            )));
        }
        if self.folds < 2 {
            return Err(SpecError::Invalid("folds must be at least 2".into()));
        }
        self.train_config().validate().map_err(|e| SpecError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn quantization_kind(&self) -> QuantizationKind {
        if self.quantization == "scalar8" {
            QuantizationKind::Scalar8 { lo: self.scalar8_lo, hi: self.scalar8_hi }
        } else {
            QuantizationKind::Vq
        }
    }

    /// Symbol-set size of the discrete channel for this spec.
    pub fn symbol_set_size(&self) -> usize {
        match self.quantization_kind() {
            QuantizationKind::Vq => self.codebook_size,
            QuantizationKind::Scalar8 { .. } => 256,
        }
    }

    /// The training channel for this spec.
    pub fn train_channel(&self) -> ChannelConfig {
        let seed = derive(self.seed, "channel", 0);
        if self.digital {
            let epsilon = match self.sweep_axis {
                SweepAxis::SymbolErrorRate => 1.0 - self.train_symbol_error_rate,
                _ => self.train_epsilon,
            };
            ChannelConfig::Discrete { epsilon, r: self.symbol_set_size(), seed }
        } else {
            ChannelConfig::Analog { snr_db: self.train_snr_db, seed }
        }
    }

    /// The channel evaluated at one sweep value (not for the beta axis).
    pub fn eval_channel(&self, value: f64) -> ChannelConfig {
        let seed = derive(self.seed, "channel", 1);
        match self.sweep_axis {
            SweepAxis::SnrDb => ChannelConfig::Analog { snr_db: value, seed },
            SweepAxis::Epsilon => {
                ChannelConfig::Discrete { epsilon: value, r: self.symbol_set_size(), seed }
            }
            SweepAxis::SymbolErrorRate => ChannelConfig::Discrete {
                epsilon: 1.0 - value,
                r: self.symbol_set_size(),
                seed,
            },
            SweepAxis::Beta => ChannelConfig::Analog { snr_db: value, seed },
        }
    }

    /// Resolve the training configuration this spec describes.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            beta: if self.drop_l_mi { 0.0 } else { self.beta },
            alpha: if self.drop_l_con { 0.0 } else { self.alpha },
            lambda_cm: self.lambda_cm,
            hidden_dim: self.hidden_dim,
            backbone: self.backbone,
            batch_size: self.batch_size,
            epochs: self.epochs,
            inner_steps: self.inner_steps,
            noise_draws: self.noise_draws,
            learning_rate: self.learning_rate,
            mine_learning_rate: self.mine_learning_rate,
            seed: self.seed,
            channel: self.train_channel(),
            digital: self.digital,
            codebook_size: self.codebook_size,
            chunks: self.chunks,
            quantization: self.quantization_kind(),
            codebook_update: CodebookUpdate::Ema,
            mine_schedule: MineSchedule::PerBatch,
            dropout: self.dropout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_spec() -> serde_json::Value {
        serde_json::json!({
            "corpus": "synthetic",
            "sweep_axis": "snr_db",
            "sweep_values": [-15.0, 5.0, 25.0]
        })
    }

    #[test]
    fn minimal_spec_parses_with_defaults() {
        let spec: ExperimentSpec = serde_json::from_value(minimal_spec()).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.folds, 10);
        assert_eq!(spec.hidden_dim, 16);
        assert_eq!(spec.beta, 0.1);
        assert!(!spec.digital);
    }

    #[test]
    fn unsorted_sweep_is_rejected() {
        let mut v = minimal_spec();
        v["sweep_values"] = serde_json::json!([5.0, -15.0]);
        let spec: ExperimentSpec = serde_json::from_value(v).unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn epsilon_axis_requires_digital() {
        let mut v = minimal_spec();
        v["sweep_axis"] = serde_json::json!("epsilon");
        v["sweep_values"] = serde_json::json!([0.9, 0.94, 0.98]);
        let spec: ExperimentSpec = serde_json::from_value(v).unwrap();
        assert!(spec.validate().is_err());
        let mut v2 = minimal_spec();
        v2["sweep_axis"] = serde_json::json!("epsilon");
        v2["sweep_values"] = serde_json::json!([0.9, 0.94, 0.98]);
        v2["digital"] = serde_json::json!(true);
        let spec2: ExperimentSpec = serde_json::from_value(v2).unwrap();
        spec2.validate().unwrap();
        assert!(spec2.train_channel().is_digital());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = minimal_spec();
        v["no_such_field"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentSpec>(v).is_err());
    }

    #[test]
    fn symbol_error_axis_maps_to_epsilon() {
        let mut v = minimal_spec();
        v["sweep_axis"] = serde_json::json!("symbol_error_rate");
        v["sweep_values"] = serde_json::json!([0.006, 0.01, 0.014]);
        v["digital"] = serde_json::json!(true);
        let spec: ExperimentSpec = serde_json::from_value(v).unwrap();
        spec.validate().unwrap();
        match spec.eval_channel(0.01) {
            ChannelConfig::Discrete { epsilon, r, .. } => {
                assert!((epsilon - 0.99).abs() < 1e-12);
                assert_eq!(r, 256);
            }
            other => panic!("unexpected channel {other:?}"),
        }
    }
}
