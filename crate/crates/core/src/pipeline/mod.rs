//! Two-stage training, target adaptation and checkpoint plumbing.

pub mod checkpoint;
mod model;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{leave_one_out_split, CorpusError, Dataset, Split};
use crate::encoders::{EncoderError, ItemEncoderKind, TextEncoderConfig, VisionEncoderConfig, ITEM_ENCODER_PREFIX};
use crate::eval::{evaluate, EvalError, EvalOptions, MetricsReport};
use crate::objectives::ObjectiveError;
use crate::optim::AdamConfig;
use crate::params::{ParamError, Precision};
use crate::user_model::{UserEncoderConfig, UserModelError};

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamMoments, Checkpoint, Stage, TensorRecord, FORMAT_VERSION};
pub use model::{LoadReport, Model, ModelScorer};
pub use train::EpochRecord;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("dataset too small: {0}")]
    DataTooSmall(String),
    #[error("loss diverged at step {step}: {detail}")]
    DivergedLoss { step: u64, detail: String },
    #[error("mode {0} requires a pretrained checkpoint (--from-checkpoint)")]
    MissingCheckpoint(String),
    #[error("tensor `{name}`: expected shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("config hash mismatch: model {model}, checkpoint {checkpoint} (use --force-compat to override)")]
    ConfigHashMismatch { model: String, checkpoint: String },
    #[error("checkpoint format version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("{path}{}: {reason}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    IoFailure { path: String, offset: Option<usize>, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    UserModel(#[from] UserModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<ParamError> for PipelineError {
    fn from(e: ParamError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl PipelineError {
    /// Process exit code: 1 config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::DivergedLoss { .. } => 3,
            PipelineError::Data(_)
            | PipelineError::DataTooSmall(_)
            | PipelineError::Corpus(_)
            | PipelineError::Encoder(_)
            | PipelineError::IoFailure { .. }
            | PipelineError::VersionUnsupported(_) => 2,
            _ => 1,
        }
    }
}

/// Architecture shared by every stage. Only fields that change tensor
/// shapes or semantics enter the config hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub item_encoder: ItemEncoderKind,
    pub text: TextEncoderConfig,
    pub vision: VisionEncoderConfig,
    pub user: UserEncoderConfig,
    pub item_feature_dim: usize,
    pub user_feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            item_encoder: ItemEncoderKind::Content,
            text: TextEncoderConfig::default(),
            vision: VisionEncoderConfig::default(),
            user: UserEncoderConfig::default(),
            item_feature_dim: 8,
            user_feature_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.d_model == 0 {
            return Err(PipelineError::Config("model.d_model must be positive".into()));
        }
        if self.item_feature_dim == 0 || self.user_feature_dim == 0 {
            return Err(PipelineError::Config("model feature dims must be positive".into()));
        }
        self.user.validate(self.d_model)?;
        if self.item_encoder == ItemEncoderKind::Content {
            self.text.validate()?;
            self.vision.validate(self.d_model)?;
        }
        Ok(())
    }

    /// Hex SHA-256 prefix over the canonical JSON of the architecture.
    /// Image size, dropout, the default mask and the position-table length
    /// are excluded: they legitimately differ between domains and the
    /// loader adapts the position table explicitly.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.vision.image_h = 0;
        c.vision.image_w = 0;
        c.text.dropout = 0.0;
        c.user.dropout = 0.0;
        c.user.causal = false;
        c.user.max_positions = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Scratch,
    #[serde(alias = "finetune")]
    FinetuneFull,
    #[serde(alias = "frozen")]
    FrozenFeatures,
}

impl std::str::FromStr for TransferMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scratch" => Ok(TransferMode::Scratch),
            "finetune" | "finetunefull" => Ok(TransferMode::FinetuneFull),
            "frozen" | "frozenfeatures" => Ok(TransferMode::FrozenFeatures),
            _ => Err(format!("unknown mode `{s}` (expected scratch, finetune or frozen)")),
        }
    }
}

impl std::fmt::Display for TransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransferMode::Scratch => "scratch",
            TransferMode::FinetuneFull => "finetune",
            TransferMode::FrozenFeatures => "frozen",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    UserPretrain,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly better validation HR before stopping.
    pub patience: usize,
    pub seed: u64,
    /// CPC targets per user (`l`).
    pub cpc_targets: usize,
    /// CPC negatives per user (`j`).
    pub cpc_negatives: usize,
    pub uep_relu: bool,
    pub stage1_freeze_items: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub eval_k: usize,
    pub mask_history: bool,
    pub stage: TrainStage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            cpc_targets: 2,
            cpc_negatives: 4,
            uep_relu: true,
            stage1_freeze_items: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            eval_k: 10,
            mask_history: false,
            stage: TrainStage::EndToEnd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(format!("train.{m}")));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be positive");
        }
        if self.stage == TrainStage::EndToEnd && (self.cpc_targets == 0 || self.cpc_negatives == 0) {
            return bad("cpc_targets and cpc_negatives must be positive for end-to-end training");
        }
        if self.stage == TrainStage::UserPretrain && self.stage1_freeze_items && self.learning_rate == 0.0 {
            log::warn!("stage-1 run with learning_rate 0 and frozen items trains nothing");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0 || !c.is_finite()) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps, clip_norm: self.clip_norm }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions { k: self.eval_k, mask_history: self.mask_history }
    }
}

/// Everything a stage produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub initial_valid: MetricsReport,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub load: LoadReport,
}

fn check_size(data: &Dataset) -> Result<(), PipelineError> {
    if data.users.len() < 2 {
        return Err(PipelineError::DataTooSmall(format!("{} has {} users", data.domain_name, data.users.len())));
    }
    if data.num_items() < 2 {
        return Err(PipelineError::DataTooSmall(format!("{} has {} items", data.domain_name, data.num_items())));
    }
    Ok(())
}

fn precision() -> Result<Precision, PipelineError> {
    Precision::from_env().map_err(PipelineError::Config)
}

fn run_stage(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    frozen_items: bool,
    load: LoadReport,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutcome, PipelineError> {
    let view = leave_one_out_split(data)?;
    let objective = match cfg.stage {
        TrainStage::UserPretrain => train::Objective::Uep,
        TrainStage::EndToEnd => train::Objective::Cpc,
    };
    let fit = train::fit(&mut model, data, &view, objective, cfg, frozen_items, on_epoch)?;
    let opts = cfg.eval_options();
    let scorer = model.scorer(data, objective == train::Objective::Uep)?;
    let hash = model.cfg.hash();
    let mut test = evaluate(&scorer, data, &view, Split::Test, &opts)?;
    test.config_hash = hash.clone();
    let mut valid = fit.best_valid.clone();
    valid.config_hash = hash.clone();
    let mut initial_valid = fit.initial_valid.clone();
    initial_valid.config_hash = hash;
    let metrics = BTreeMap::from([
        (format!("valid_hr@{}", cfg.eval_k), valid.hr),
        (format!("valid_ndcg@{}", cfg.eval_k), valid.ndcg),
        (format!("test_hr@{}", cfg.eval_k), test.hr),
        (format!("test_ndcg@{}", cfg.eval_k), test.ndcg),
    ]);
    let checkpoint = model.to_checkpoint(stage, &data.domain_name, fit.steps, metrics, Some(&fit.optimizer));
    Ok(RunOutcome {
        model,
        checkpoint,
        history: fit.history,
        initial_valid,
        valid,
        test,
        best_epoch: fit.best_epoch,
        load,
    })
}

/// Stage 1: next-item softmax over the source catalog with a causal user
/// mask; item encoders train jointly unless `stage1_freeze_items`.
pub fn pretrain_user_encoder(
    source: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutcome, PipelineError> {
    if cfg.stage != TrainStage::UserPretrain {
        return Err(PipelineError::Config("train.stage must be user_pretrain for stage 1".into()));
    }
    cfg.validate()?;
    check_size(source)?;
    let mut model = Model::build(model_cfg, source, true, precision()?, cfg.seed)?;
    if cfg.stage1_freeze_items {
        model.store.set_trainable_prefix(ITEM_ENCODER_PREFIX, false);
    }
    let load = LoadReport::default();
    run_stage(model, source, cfg, Stage::UserPretrain, cfg.stage1_freeze_items, load, on_epoch)
}

/// Stage 2: contrastive training of both towers with a bidirectional user
/// mask, optionally initialised from a stage-1 checkpoint by tensor name.
pub fn train_end_to_end(
    source: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutcome, PipelineError> {
    if cfg.stage != TrainStage::EndToEnd {
        return Err(PipelineError::Config("train.stage must be end_to_end for stage 2".into()));
    }
    cfg.validate()?;
    check_size(source)?;
    let mut model = Model::build(model_cfg, source, false, precision()?, cfg.seed)?;
    let load = match init {
        Some(ckpt) => model.load_checkpoint(ckpt, false)?,
        None => LoadReport::default(),
    };
    run_stage(model, source, cfg, Stage::EndToEnd, false, load, on_epoch)
}

/// Target-domain training in one of the three transfer modes.
pub fn adapt_to_target(
    pretrained: Option<&Checkpoint>,
    target: &Dataset,
    mode: TransferMode,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    force_compat: bool,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutcome, PipelineError> {
    if cfg.stage != TrainStage::EndToEnd {
        return Err(PipelineError::Config("train.stage must be end_to_end for adaptation".into()));
    }
    cfg.validate()?;
    check_size(target)?;
    let mut model = Model::build(model_cfg, target, false, precision()?, cfg.seed)?;
    let (load, frozen) = match (mode, pretrained) {
        (TransferMode::Scratch, Some(_)) => {
            log::warn!("mode scratch ignores the supplied checkpoint");
            (LoadReport::default(), false)
        }
        (TransferMode::Scratch, None) => (LoadReport::default(), false),
        (_, None) => return Err(PipelineError::MissingCheckpoint(mode.to_string())),
        (TransferMode::FinetuneFull, Some(ckpt)) => (model.load_checkpoint(ckpt, force_compat)?, false),
        (TransferMode::FrozenFeatures, Some(ckpt)) => {
            let report = model.load_checkpoint(ckpt, force_compat)?;
            model.store.set_trainable_prefix(ITEM_ENCODER_PREFIX, false);
            (report, true)
        }
    };
    for name in &load.fresh {
        log::info!("freshly initialised target tensor {name}");
    }
    run_stage(model, target, cfg, Stage::Adapted, frozen, load, on_epoch)
}
