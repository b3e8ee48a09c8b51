//! Training objectives: next-item softmax cross-entropy for user-encoder
//! pre-training (UEP) and binary cross-entropy over sampled negatives for
//! end-to-end contrastive training (CPC).

use std::collections::HashSet;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{log_sigmoid, Graph, Var};
use crate::nn::INIT_STD;
use crate::params::{Init, ParamError, ParamId, ParameterStore};

pub const UEP_HEAD_PREFIX: &str = "uep_head.";

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("sequence of length {len} cannot yield {l} targets and a context")]
    SequenceTooShort { len: usize, l: usize },
    #[error("need {needed} negatives but only {available} items are outside the user's sequence")]
    CatalogExhausted { needed: usize, available: usize },
    #[error("label {label} outside catalog of {size}")]
    LabelOutOfRange { label: usize, size: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `C^u` = all but the last `l` items, `C^e` = the last `l`.
pub fn split_context_target(seq: &[usize], l: usize) -> Result<(&[usize], &[usize]), ObjectiveError> {
    if l == 0 || seq.len() < l + 1 {
        return Err(ObjectiveError::SequenceTooShort { len: seq.len(), l });
    }
    Ok(seq.split_at(seq.len() - l))
}

/// `j` distinct items drawn uniformly from the catalog minus `user_seq`.
pub fn sample_negatives<R: Rng + ?Sized>(
    user_seq: &[usize],
    n_items: usize,
    j: usize,
    rng: &mut R,
) -> Result<Vec<usize>, ObjectiveError> {
    let seen: HashSet<usize> = user_seq.iter().copied().filter(|&i| i < n_items).collect();
    let available = n_items - seen.len();
    if j > available {
        return Err(ObjectiveError::CatalogExhausted { needed: j, available });
    }
    let mut out = Vec::with_capacity(j);
    if available <= 4 * j {
        // dense case: partial Fisher-Yates over the eligible list
        let mut eligible: Vec<usize> = (0..n_items).filter(|i| !seen.contains(i)).collect();
        for k in 0..j {
            let r = rng.gen_range(k..eligible.len());
            eligible.swap(k, r);
            out.push(eligible[k]);
        }
    } else {
        while out.len() < j {
            let c = rng.gen_range(0..n_items);
            if !seen.contains(&c) && !out.contains(&c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}

/// Per-user next-item training pairs: input slot `t` predicts `seq[t+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UepBatch {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

impl UepBatch {
    pub fn from_sequences(seqs: &[&[usize]]) -> Self {
        let inputs = seqs.iter().map(|s| s[..s.len().saturating_sub(1)].to_vec()).collect();
        let labels = seqs.iter().map(|s| s.get(1..).unwrap_or(&[]).to_vec()).collect();
        Self { inputs, labels }
    }
}

/// One user's contrastive example.
#[derive(Clone, Debug, PartialEq)]
pub struct CpcExample {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl CpcExample {
    /// Splits `seq` with up to `l` targets (fewer when the sequence is short)
    /// and draws `j` negatives outside the whole of `seq`.
    pub fn build<R: Rng + ?Sized>(seq: &[usize], l: usize, j: usize, n_items: usize, rng: &mut R) -> Result<Self, ObjectiveError> {
        let l_eff = l.min(seq.len().saturating_sub(1));
        let (c, t) = split_context_target(seq, l_eff.max(1))?;
        let negatives = sample_negatives(seq, n_items, j, rng)?;
        Ok(Self { context: c.to_vec(), targets: t.to_vec(), negatives })
    }
}

/// `W^U: d × |V|`, `b^U: |V|`.
#[derive(Clone, Debug)]
pub struct SoftmaxHead {
    pub w: ParamId,
    pub b: ParamId,
    pub n_items: usize,
}

impl SoftmaxHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, d: usize, n_items: usize, rng: &mut R) -> Result<Self, ObjectiveError> {
        let w = store.add("uep_head.w", &[d, n_items], Init::TruncNormal(INIT_STD), rng)?;
        let b = store.add("uep_head.b", &[n_items], Init::Zeros, rng)?;
        Ok(Self { w, b, n_items })
    }

    /// `S' W + b`, optionally passed through ReLU.
    pub fn logits(&self, g: &mut Graph, store: &ParameterStore, hidden: Var, relu: bool) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.matmul(hidden, w);
        let z = g.add_bias(z, b);
        if relu {
            g.relu(z)
        } else {
            z
        }
    }
}

/// `Σ −log softmax(ReLU(S' W + b))[y] / batch_size` over labelled rows.
pub fn uep_loss(
    g: &mut Graph,
    store: &ParameterStore,
    head: &SoftmaxHead,
    hidden: Var,
    labels: Vec<Option<usize>>,
    relu: bool,
    batch_size: usize,
) -> Result<Var, ObjectiveError> {
    if let Some(&bad) = labels.iter().flatten().find(|&&y| y >= head.n_items) {
        return Err(ObjectiveError::LabelOutOfRange { label: bad, size: head.n_items });
    }
    let logits = head.logits(g, store, hidden, relu);
    Ok(g.softmax_ce(logits, labels, 1.0 / batch_size.max(1) as f64))
}

/// `−Σ [log σ(pos) + log σ(−neg)] / batch_size`; `positive[i]` labels score `i`.
pub fn cpc_loss(g: &mut Graph, scores: Var, positive: Vec<bool>, batch_size: usize) -> Var {
    g.bce_logits(scores, positive, 1.0 / batch_size.max(1) as f64)
}

/// One user's unnormalised CPC loss, evaluated directly.
pub fn cpc_loss_value(pos: &[f64], neg: &[f64]) -> f64 {
    -(pos.iter().map(|&r| log_sigmoid(r)).sum::<f64>() + neg.iter().map(|&r| log_sigmoid(-r)).sum::<f64>())
}
