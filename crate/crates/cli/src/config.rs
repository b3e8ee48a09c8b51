//! TOML run configuration. Every section has defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transrec::corpus::synthetic::{SyntheticWorldConfig, TARGET_MIXED};
use transrec::encoders::{ItemEncoderKind, TextEncoderConfig, VisionEncoderConfig};
use transrec::pipeline::{ModelConfig, TrainConfig, TrainStage};
use transrec::user_model::UserEncoderConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub encoders: EncodersSection,
    pub user_model: UserModelSection,
    pub objectives: ObjectivesSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            encoders: EncodersSection::default(),
            user_model: UserModelSection::default(),
            objectives: ObjectivesSection::default(),
            pipeline: PipelineSection::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

/// One domain read from JSON-lines files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDomain {
    pub name: String,
    pub catalog: PathBuf,
    pub interactions: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Used whenever `source` is absent.
    pub synthetic: SyntheticWorldConfig,
    pub source: Option<FileDomain>,
    pub targets: Vec<FileDomain>,
    /// Target domain used by `adapt` and `eval` when `--domain` is absent.
    pub target: String,
    /// Truncation applied to file-loaded sequences.
    pub max_seq_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            synthetic: SyntheticWorldConfig::default(),
            source: None,
            targets: Vec::new(),
            target: TARGET_MIXED.to_string(),
            max_seq_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodersSection {
    pub d_model: usize,
    pub item_encoder: ItemEncoderKind,
    pub item_feature_dim: usize,
    pub text: TextEncoderConfig,
    pub vision: VisionEncoderConfig,
}

impl Default for EncodersSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { d_model: m.d_model, item_encoder: m.item_encoder, item_feature_dim: m.item_feature_dim, text: m.text, vision: m.vision }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UserModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub feature_dim: usize,
}

impl Default for UserModelSection {
    fn default() -> Self {
        let u = UserEncoderConfig::default();
        Self {
            n_layers: u.n_layers,
            n_heads: u.n_heads,
            max_positions: u.max_positions,
            ffn_mult: u.ffn_mult,
            dropout: u.dropout,
            feature_dim: ModelConfig::default().user_feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesSection {
    pub cpc_targets: usize,
    pub cpc_negatives: usize,
    pub uep_relu: bool,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { cpc_targets: t.cpc_targets, cpc_negatives: t.cpc_negatives, uep_relu: t.uep_relu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epoch cap for the two source stages; `max_epochs` when absent.
    pub source_epochs: Option<usize>,
    pub patience: usize,
    pub stage1_freeze_items: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            source_epochs: None,
            patience: t.patience,
            stage1_freeze_items: t.stage1_freeze_items,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub mask_history: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: 10, mask_history: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Fraction of each target's users kept by `adapt` and the matrix.
    pub target_fraction: f64,
    /// Adds an ID-embedding scratch baseline column to the matrix.
    pub idrec_baseline: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { target_fraction: 0.2, idrec_baseline: true }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        let e = &self.encoders;
        let u = &self.user_model;
        ModelConfig {
            d_model: e.d_model,
            item_encoder: e.item_encoder,
            text: e.text.clone(),
            vision: e.vision.clone(),
            user: UserEncoderConfig {
                n_layers: u.n_layers,
                n_heads: u.n_heads,
                max_positions: u.max_positions,
                causal: false,
                ffn_mult: u.ffn_mult,
                dropout: u.dropout,
            },
            item_feature_dim: e.item_feature_dim,
            user_feature_dim: u.feature_dim,
        }
    }

    pub fn train(&self, stage: TrainStage) -> TrainConfig {
        let p = &self.pipeline;
        let max_epochs = match stage {
            TrainStage::UserPretrain => p.source_epochs.unwrap_or(p.max_epochs),
            TrainStage::EndToEnd => p.max_epochs,
        };
        TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            max_epochs,
            patience: p.patience,
            seed: self.seed,
            cpc_targets: self.objectives.cpc_targets,
            cpc_negatives: self.objectives.cpc_negatives,
            uep_relu: self.objectives.uep_relu,
            stage1_freeze_items: p.stage1_freeze_items,
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
            clip_norm: p.clip_norm,
            eval_k: self.eval.k,
            mask_history: self.eval.mask_history,
            stage,
        }
    }

    /// Stage-2 config for the source domain, which shares `source_epochs`
    /// with stage 1.
    pub fn source_train(&self) -> TrainConfig {
        TrainConfig { max_epochs: self.pipeline.source_epochs.unwrap_or(self.pipeline.max_epochs), ..self.train(TrainStage::EndToEnd) }
    }

    /// Checks every section before any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.corpus.source.is_none() {
            self.corpus.synthetic.validate().map_err(|e| CliError::config(format!("corpus.synthetic: {e}")))?;
        }
        if self.corpus.max_seq_len < 3 {
            return Err(CliError::config("corpus.max_seq_len must be at least 3"));
        }
        self.model().validate().map_err(|e| CliError::config(format!("encoders/user_model: {e}")))?;
        self.train(TrainStage::UserPretrain).validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train(TrainStage::EndToEnd).validate().map_err(|e| CliError::config(e.to_string()))?;
        let f = self.experiment.target_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::config(format!("experiment.target_fraction {f} is outside (0, 1]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model().hash(), cfg.model().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[pipeline]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[encoders]\nd_model = 16\n[encoders.text]\nd_model = 16\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model().d_model, 16);
        assert_eq!(cfg.pipeline, PipelineSection::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cfg: RunConfig = toml::from_str("[pipeline]\nbatch_size = 0\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
        let cfg: RunConfig = toml::from_str("[experiment]\ntarget_fraction = 1.5\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("target_fraction"));
    }
}
