use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::{PipelineError, TrainConfig};
use crate::autodiff::{Graph, Var};
use crate::corpus::{Dataset, Split, SplitView};
use crate::eval::{evaluate, MetricsReport};
use crate::objectives::{cpc_loss, sample_negatives, split_context_target, uep_loss};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    Uep,
    Cpc,
}

/// One row of the convergence log. Train rows carry the mean batch loss,
/// validation rows the metrics; the other fields are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub hr: f64,
    pub ndcg: f64,
}

pub(crate) struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub initial_valid: MetricsReport,
    pub best_valid: MetricsReport,
    pub best_epoch: usize,
    pub steps: u64,
    pub optimizer: Adam,
}

fn validate(model: &Model, data: &Dataset, view: &SplitView, objective: Objective, cfg: &TrainConfig) -> Result<MetricsReport, PipelineError> {
    let scorer = model.scorer(data, objective == Objective::Uep)?;
    Ok(evaluate(&scorer, data, view, Split::Valid, &cfg.eval_options())?)
}

fn diverged(model: &Model, step: u64, what: &str) -> PipelineError {
    let detail = match model.store.first_non_finite() {
        Some(name) => format!("{what}; first non-finite parameter `{name}`"),
        None => what.to_string(),
    };
    PipelineError::DivergedLoss { step, detail }
}

/// Epoch loop with per-epoch validation and patience-based early stopping.
/// The best snapshot starts as the initial parameters and is replaced only
/// on a strictly higher validation HR; it is restored before returning.
pub(crate) fn fit(
    model: &mut Model,
    data: &Dataset,
    view: &SplitView,
    objective: Objective,
    cfg: &TrainConfig,
    frozen_items: bool,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<FitOutcome, PipelineError> {
    let mut optimizer = Adam::new(cfg.adam(), &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(11);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    neg_rng.set_stream(12);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(13);

    let trainable: Vec<usize> = (0..view.users.len()).filter(|&u| view.users[u].train.len() >= 2).collect();
    if trainable.is_empty() {
        return Err(PipelineError::DataTooSmall(format!("{}: no user has two training interactions", data.domain_name)));
    }

    if model.store.first_non_finite().is_some() {
        return Err(diverged(model, 0, "non-finite parameter at start"));
    }
    let initial_valid = validate(model, data, view, objective, cfg)?;
    let mut best_valid = initial_valid.clone();
    let mut best_snapshot = model.store.snapshot();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut steps = 0u64;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order = trainable.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if model.store.first_non_finite().is_some() {
                return Err(diverged(model, steps, "non-finite parameter before step"));
            }
            let mut g = Graph::training(ChaCha8Rng::seed_from_u64(dropout_rng.gen()));
            let loss = match objective {
                Objective::Uep => uep_batch(model, &mut g, data, view, batch, cfg, frozen_items)?,
                Objective::Cpc => cpc_batch(model, &mut g, data, view, batch, cfg, frozen_items, &mut neg_rng)?,
            };
            let value = g.value(loss).data[0];
            if !value.is_finite() {
                return Err(diverged(model, steps, &format!("loss is {value}")));
            }
            g.backward(loss);
            g.accumulate_param_grads(&mut model.store);
            let norm = optimizer.step(&mut model.store);
            steps += 1;
            if !norm.is_finite() {
                return Err(diverged(model, steps, &format!("gradient norm is {norm}")));
            }
            loss_sum += value;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches.max(1) as f64;
        let v = validate(model, data, view, objective, cfg)?;
        log::info!("epoch {epoch}: loss {train_loss:.5} valid hr@{} {:.4} ndcg {:.4}", cfg.eval_k, v.hr, v.ndcg);
        let rows = [
            EpochRecord { epoch, split: "train".into(), loss: train_loss, hr: f64::NAN, ndcg: f64::NAN },
            EpochRecord { epoch, split: "valid".into(), loss: f64::NAN, hr: v.hr, ndcg: v.ndcg },
        ];
        on_epoch(&rows);
        history.extend(rows);
        if v.hr > best_valid.hr {
            best_valid = v;
            best_snapshot = model.store.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    model.store.restore(&best_snapshot)?;
    Ok(FitOutcome { history, initial_valid, best_valid, best_epoch, steps, optimizer })
}

fn truncate(seq: &[usize], max: usize) -> Vec<usize> {
    seq[seq.len().saturating_sub(max)..].to_vec()
}

/// Distinct catalog indices in ascending order plus each index's row.
fn unique_rows(all: impl Iterator<Item = usize>) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let set: std::collections::BTreeSet<usize> = all.collect();
    let uniq: Vec<usize> = set.into_iter().collect();
    let pos = uniq.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    (uniq, pos)
}

fn uep_batch(
    model: &Model,
    g: &mut Graph,
    data: &Dataset,
    view: &SplitView,
    batch: &[usize],
    cfg: &TrainConfig,
    frozen_items: bool,
) -> Result<Var, PipelineError> {
    let head = model.head.as_ref().ok_or_else(|| PipelineError::Config("stage 1 needs a softmax head".into()))?;
    let max = model.user.cfg.max_positions;
    let seqs: Vec<Vec<usize>> = batch.iter().map(|&u| truncate(&view.users[u].train, max + 1)).collect();
    let (uniq, pos) = unique_rows(seqs.iter().flatten().copied());
    let emb = model.items.encode_items(g, &model.store, &data.catalog, &uniq, frozen_items)?;
    let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..s.len() - 1].iter().map(|i| pos[i]).collect()).collect();
    let (hidden, layout) = model.user.encode_sequences(g, &model.store, emb, &inputs, true)?;
    let mut labels = Vec::with_capacity(layout.rows());
    for s in &seqs {
        for t in 0..layout.max_len {
            labels.push(s.get(t + 1).copied().filter(|_| t + 1 < s.len()));
        }
    }
    Ok(uep_loss(g, &model.store, head, hidden, labels, cfg.uep_relu, batch.len())?)
}

#[allow(clippy::too_many_arguments)]
fn cpc_batch(
    model: &Model,
    g: &mut Graph,
    data: &Dataset,
    view: &SplitView,
    batch: &[usize],
    cfg: &TrainConfig,
    frozen_items: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var, PipelineError> {
    let max = model.user.cfg.max_positions;
    let n_items = data.num_items();
    let mut contexts = Vec::with_capacity(batch.len());
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    let mut positive = Vec::new();
    for &u in batch {
        let train = &view.users[u].train;
        let l = cfg.cpc_targets.min(train.len() - 1);
        let (ctx, targets) = split_context_target(train, l)?;
        let negatives = sample_negatives(&data.users[view.users[u].user].items, n_items, cfg.cpc_negatives, rng)?;
        contexts.push(truncate(ctx, max));
        positive.extend(std::iter::repeat(true).take(targets.len()));
        positive.extend(std::iter::repeat(false).take(negatives.len()));
        candidates.push(targets.iter().chain(&negatives).copied().collect());
    }
    let (uniq, pos) = unique_rows(contexts.iter().flatten().chain(candidates.iter().flatten()).copied());
    let emb = model.items.encode_items(g, &model.store, &data.catalog, &uniq, frozen_items)?;
    let ctx_rows: Vec<Vec<usize>> = contexts.iter().map(|c| c.iter().map(|i| pos[i]).collect()).collect();
    let (hidden, layout) = model.user.encode_sequences(g, &model.store, emb, &ctx_rows, false)?;
    let summary = model.user.summary(g, hidden, &layout);
    let feats: Vec<_> = batch.iter().map(|&u| &data.users[view.users[u].user].features).collect();
    let users = model.user.concat_user_features(g, &model.store, summary, &feats)?;
    let user_idx = candidates.iter().enumerate().flat_map(|(b, c)| std::iter::repeat(Some(b)).take(c.len())).collect();
    let cand_idx = candidates.iter().flatten().map(|i| Some(pos[i])).collect();
    let u = g.gather(users, user_idx);
    let e = g.gather(emb, cand_idx);
    let scores = g.row_dot(u, e);
    Ok(cpc_loss(g, scores, positive, batch.len()))
}
