use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{AdamMoments, Checkpoint, Stage, TensorRecord, FORMAT_VERSION};
use super::{ModelConfig, PipelineError};
use crate::autodiff::Graph;
use crate::corpus::Dataset;
use crate::encoders::{ItemEncoderKind, ItemTower};
use crate::eval::{EvalError, Scorer};
use crate::objectives::{SoftmaxHead, UEP_HEAD_PREFIX};
use crate::optim::Adam;
use crate::params::{ParameterStore, Precision};
use crate::tensor::Tensor;
use crate::user_model::{UserTower, POSITION_TABLE};

/// Both towers, the optional stage-1 head and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub items: ItemTower,
    pub user: UserTower,
    pub head: Option<SoftmaxHead>,
}

/// What happened to each tensor when loading a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors absent from the checkpoint (or domain-specific and
    /// resized), left at their fresh initialisation.
    pub fresh: Vec<String>,
    /// Tensors whose overlapping rows were copied.
    pub resized: Vec<String>,
    /// Checkpoint tensors the model has no slot for.
    pub ignored: Vec<String>,
}

impl Model {
    /// Registers item tower, item features, user tower, user features and
    /// (optionally) the softmax head, in that order.
    pub fn build(cfg: &ModelConfig, data: &Dataset, with_head: bool, precision: Precision, seed: u64) -> Result<Self, PipelineError> {
        let mut cfg = cfg.clone();
        if let Some([c, h, w]) = data.catalog.image_shape() {
            if c != cfg.vision.in_channels {
                return Err(PipelineError::Config(format!(
                    "model.vision.in_channels is {} but {} images have {c} channels",
                    cfg.vision.in_channels, data.domain_name
                )));
            }
            cfg.vision.image_h = h;
            cfg.vision.image_w = w;
        }
        cfg.validate()?;
        let longest = data.users.iter().map(|u| u.items.len() - 1).max().unwrap_or(0);
        if longest > cfg.user.max_positions {
            return Err(PipelineError::Config(format!(
                "model.user.max_positions {} is shorter than the longest context {longest}",
                cfg.user.max_positions
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let mut store = ParameterStore::new(precision);
        let d = cfg.d_model;
        let items = match cfg.item_encoder {
            ItemEncoderKind::Content => ItemTower::content(&mut store, d, &cfg.text, &cfg.vision, &mut rng)?,
            ItemEncoderKind::Id => ItemTower::id_only(&mut store, d, data.num_items(), &mut rng)?,
        };
        let item_cards = data.catalog.feature_cardinalities();
        let items = items.with_features(&mut store, cfg.item_feature_dim, &item_cards, &mut rng)?;
        items.validate_catalog(&data.catalog)?;
        let user = UserTower::new(&mut store, &cfg.user, d, &mut rng)?;
        let user_cards = data.user_feature_cardinalities();
        let user = user.with_features(&mut store, cfg.user_feature_dim, &user_cards, &mut rng)?;
        let head = if with_head { Some(SoftmaxHead::new(&mut store, d, data.num_items(), &mut rng)?) } else { None };
        Ok(Self { cfg, store, items, user, head })
    }

    pub fn to_checkpoint(
        &self,
        stage: Stage,
        domain: &str,
        step: u64,
        metrics: BTreeMap<String, f64>,
        optimizer: Option<&Adam>,
    ) -> Checkpoint {
        let tensors = self
            .store
            .iter()
            .map(|(_, p)| TensorRecord { name: p.name.clone(), shape: p.shape.clone(), values: p.value.clone() })
            .collect();
        let optimizer = optimizer.map(|a| AdamMoments {
            step: a.step,
            moments: a.m.iter().cloned().zip(a.v.iter().cloned()).collect(),
        });
        Checkpoint {
            version: FORMAT_VERSION,
            config_hash: self.cfg.hash(),
            stage,
            domain: domain.to_string(),
            step,
            precision: self.store.precision(),
            model_config: self.cfg.clone(),
            metrics,
            tensors,
            optimizer,
        }
    }

    /// Copies checkpoint tensors into the model by name. Shapes are checked
    /// for every tensor before anything is written, then the config hash.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, force_compat: bool) -> Result<LoadReport, PipelineError> {
        enum Action {
            Copy,
            Rows,
            Fresh,
        }
        let mut plan = Vec::new();
        let mut report = LoadReport::default();
        for (_, p) in self.store.iter() {
            let action = match ckpt.tensor(&p.name) {
                None => Action::Fresh,
                Some(t) if t.shape == p.shape => Action::Copy,
                Some(t) if p.name == POSITION_TABLE && t.shape.len() == 2 && t.shape[1] == p.shape[1] => Action::Rows,
                Some(_) if p.name.starts_with(UEP_HEAD_PREFIX) => Action::Fresh,
                Some(t) => {
                    return Err(PipelineError::ShapeMismatch {
                        name: p.name.clone(),
                        expected: p.shape.clone(),
                        found: t.shape.clone(),
                    })
                }
            };
            plan.push((p.name.clone(), action));
        }
        let model_hash = self.cfg.hash();
        if ckpt.config_hash != model_hash {
            if !force_compat {
                return Err(PipelineError::ConfigHashMismatch { model: model_hash, checkpoint: ckpt.config_hash.clone() });
            }
            log::warn!("config hash {} differs from checkpoint {}; loading anyway", model_hash, ckpt.config_hash);
        }
        for (name, action) in plan {
            match action {
                Action::Copy => {
                    let t = ckpt.tensor(&name).expect("planned");
                    self.store.set_value(&name, &t.shape, &t.values)?;
                    report.loaded.push(name);
                }
                Action::Rows => {
                    let t = ckpt.tensor(&name).expect("planned");
                    let id = self.store.require(&name)?;
                    let precision = self.store.precision();
                    let p = self.store.get_mut(id);
                    let n = p.value.len().min(t.values.len());
                    for (dst, src) in p.value[..n].iter_mut().zip(&t.values[..n]) {
                        *dst = precision.round(*src);
                    }
                    log::warn!(
                        "{name}: checkpoint has {} rows, model {}; copied the overlap, remaining rows fresh",
                        t.shape[0],
                        p.shape[0]
                    );
                    report.resized.push(name);
                }
                Action::Fresh => report.fresh.push(name),
            }
        }
        report.ignored = ckpt.tensors.iter().filter(|t| self.store.id(&t.name).is_none()).map(|t| t.name.clone()).collect();
        Ok(report)
    }

    /// Full-catalog scorer over the current parameters. With `use_head` the
    /// stage-1 head logits rank items under a causal mask; otherwise the
    /// two-tower dot product under a bidirectional mask.
    pub fn scorer(&self, data: &Dataset, use_head: bool) -> Result<ModelScorer<'_>, PipelineError> {
        if use_head && self.head.is_none() {
            return Err(PipelineError::Config("model has no softmax head".into()));
        }
        let items = self.items.encode_catalog(&self.store, &data.catalog)?;
        Ok(ModelScorer { model: self, items, use_head })
    }
}

pub struct ModelScorer<'a> {
    model: &'a Model,
    items: Tensor,
    use_head: bool,
}

impl ModelScorer<'_> {
    pub fn item_embeddings(&self) -> &Tensor {
        &self.items
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, dataset: &Dataset, users: &[usize], contexts: &[Vec<usize>]) -> Result<Tensor, EvalError> {
        let m = self.model;
        let max = m.user.cfg.max_positions;
        let seqs: Vec<Vec<usize>> = contexts.iter().map(|c| c[c.len().saturating_sub(max)..].to_vec()).collect();
        let mut g = Graph::new();
        let emb = g.constant(self.items.clone());
        let (hidden, layout) =
            m.user.encode_sequences(&mut g, &m.store, emb, &seqs, self.use_head).map_err(|e| EvalError::Model(e.to_string()))?;
        let summary = m.user.summary(&mut g, hidden, &layout);
        let scores = match (&m.head, self.use_head) {
            (Some(head), true) => head.logits(&mut g, &m.store, summary, false),
            _ => {
                let feats: Vec<_> = users.iter().map(|&u| &dataset.users[u].features).collect();
                let s = m.user.concat_user_features(&mut g, &m.store, summary, &feats).map_err(|e| EvalError::Model(e.to_string()))?;
                g.matmul_bt(s, emb)
            }
        };
        Ok(g.value(scores).clone())
    }
}
