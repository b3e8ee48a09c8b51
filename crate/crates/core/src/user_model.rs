//! The user tower: position fusion over item embeddings, a transformer
//! encoder with bidirectional or causal masking, user side features, and
//! dot-product relevance.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::nn::{FeatureConcat, LayerNorm, TransformerLayer, INIT_STD};
use crate::params::{Init, ParamError, ParamId, ParameterStore};
use crate::tensor::{dot, Tensor};

pub const USER_ENCODER_PREFIX: &str = "user_enc.";
pub const USER_FEATURE_PREFIX: &str = "user_feat";
pub const POSITION_TABLE: &str = "user_enc.pos_emb";

#[derive(Debug, Error, PartialEq)]
pub enum UserModelError {
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask: {0}")]
    MaskShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("feature `{0}` has no embedding table")]
    UnknownFeature(String),
    #[error("feature `{feature}` id {index} outside table of {size} rows")]
    IndexOutOfRange { feature: String, index: usize, size: usize },
    #[error("invalid user encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UserEncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    /// Default mask; each training stage overrides it.
    pub causal: bool,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for UserEncoderConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, max_positions: 32, causal: false, ffn_mult: 2, dropout: 0.1 }
    }
}

impl UserEncoderConfig {
    pub fn validate(&self, d: usize) -> Result<(), UserModelError> {
        let bad = |m: &str| Err(UserModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.max_positions == 0 || self.ffn_mult == 0 {
            return bad("n_layers, n_heads, max_positions and ffn_mult must be positive");
        }
        if d % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Builds a right-padded layout from per-sequence masks (`true` = real slot).
pub fn layout_from_mask(mask: &[Vec<bool>], n: usize, causal: bool) -> Result<SeqLayout, UserModelError> {
    let mut lengths = Vec::with_capacity(mask.len());
    for (b, m) in mask.iter().enumerate() {
        if m.len() != n {
            return Err(UserModelError::MaskShapeMismatch(format!("row {b} has {} slots, expected {n}", m.len())));
        }
        let len = m.iter().take_while(|&&x| x).count();
        if m[len..].iter().any(|&x| x) {
            return Err(UserModelError::MaskShapeMismatch(format!("row {b} is not right-padded")));
        }
        lengths.push(len);
    }
    Ok(SeqLayout::new(lengths, n, causal))
}

#[derive(Clone, Debug)]
pub struct UserTower {
    pub cfg: UserEncoderConfig,
    pub d: usize,
    pub pos: ParamId,
    emb_ln: LayerNorm,
    layers: Vec<TransformerLayer>,
    pub features: Option<FeatureConcat>,
}

impl UserTower {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        cfg: &UserEncoderConfig,
        d: usize,
        rng: &mut R,
    ) -> Result<Self, UserModelError> {
        cfg.validate(d)?;
        let pos = store.add(POSITION_TABLE, &[cfg.max_positions, d], Init::TruncNormal(INIT_STD), rng)?;
        let emb_ln = LayerNorm::new(store, "user_enc.emb_ln", d, rng)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(store, &format!("user_enc.layer{i}"), d, cfg.n_heads, cfg.ffn_mult, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { cfg: cfg.clone(), d, pos, emb_ln, layers, features: None })
    }

    pub fn with_features<R: Rng + ?Sized>(
        mut self,
        store: &mut ParameterStore,
        feature_dim: usize,
        cardinalities: &BTreeMap<String, usize>,
        rng: &mut R,
    ) -> Result<Self, UserModelError> {
        self.features = FeatureConcat::new(store, USER_FEATURE_PREFIX, self.d, feature_dim, cardinalities, rng)?;
        Ok(self)
    }

    /// `output[p] = input[p] + table[p]` for every real slot.
    pub fn add_positions(&self, g: &mut Graph, store: &ParameterStore, z: Var, layout: &SeqLayout) -> Result<Var, UserModelError> {
        if layout.max_len > self.cfg.max_positions {
            return Err(UserModelError::SequenceTooLong { len: layout.max_len, max: self.cfg.max_positions });
        }
        let idx = layout
            .lengths
            .iter()
            .flat_map(|&len| (0..layout.max_len).map(move |t| (t < len).then_some(t)))
            .collect();
        let table = g.param(store, self.pos);
        let p = g.gather(table, idx);
        Ok(g.add(z, p))
    }

    /// Transformer over fused inputs; the layout carries the mask.
    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, fused: Var, layout: &SeqLayout) -> Var {
        let x = self.emb_ln.forward(g, store, fused);
        let mut x = g.dropout(x, self.cfg.dropout);
        for layer in &self.layers {
            x = layer.forward(g, store, x, layout, self.cfg.dropout);
        }
        x
    }

    /// Hidden states of sequences given as row indices into `item_emb`.
    pub fn encode_sequences(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        item_emb: Var,
        seqs: &[Vec<usize>],
        causal: bool,
    ) -> Result<(Var, SeqLayout), UserModelError> {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(1).max(1);
        let layout = SeqLayout::new(lengths, max_len, causal);
        let idx = seqs.iter().flat_map(|s| (0..max_len).map(move |t| s.get(t).copied())).collect();
        let z = g.gather(item_emb, idx);
        let fused = self.add_positions(g, store, z, &layout)?;
        Ok((self.encode(g, store, fused, &layout), layout))
    }

    /// Final hidden state at each sequence's last real slot.
    pub fn summary(&self, g: &mut Graph, hidden: Var, layout: &SeqLayout) -> Var {
        let idx = (0..layout.batch()).map(|b| Some(layout.last_row(b))).collect();
        g.gather(hidden, idx)
    }

    fn feature_ids(&self, users: &[&BTreeMap<String, u32>]) -> Result<Vec<Vec<Option<usize>>>, UserModelError> {
        let Some(fc) = &self.features else { return Ok(Vec::new()) };
        for u in users {
            if let Some(name) = u.keys().find(|k| !fc.tables.iter().any(|(n, _, _)| n == *k)) {
                return Err(UserModelError::UnknownFeature(name.clone()));
            }
        }
        fc.tables
            .iter()
            .map(|(name, card, _)| {
                users
                    .iter()
                    .map(|u| match u.get(name) {
                        Some(&v) if (v as usize) < *card => Ok(Some(v as usize)),
                        Some(&v) => Err(UserModelError::IndexOutOfRange { feature: name.clone(), index: v as usize, size: *card }),
                        None => Ok(None),
                    })
                    .collect()
            })
            .collect()
    }

    /// Joins user features onto the summaries; identity without features.
    pub fn concat_user_features(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        summary: Var,
        users: &[&BTreeMap<String, u32>],
    ) -> Result<Var, UserModelError> {
        match &self.features {
            None => Ok(summary),
            Some(fc) => {
                let ids = self.feature_ids(users)?;
                Ok(fc.forward(g, store, summary, &ids))
            }
        }
    }
}

/// `score_j = user · candidate_j`.
pub fn relevance(user: &[f64], candidates: &Tensor) -> Result<Vec<f64>, UserModelError> {
    if user.len() != candidates.cols {
        return Err(UserModelError::DimMismatch { expected: candidates.cols, found: user.len() });
    }
    Ok((0..candidates.rows).map(|j| dot(user, candidates.row(j))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Precision;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tower(store: &mut ParameterStore, d: usize) -> UserTower {
        let cfg = UserEncoderConfig { max_positions: 12, ..Default::default() };
        UserTower::new(store, &cfg, d, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn run(t: &UserTower, store: &ParameterStore, x: &[f64], lengths: Vec<usize>, max_len: usize, causal: bool) -> Tensor {
        let mut g = Graph::new();
        let layout = SeqLayout::new(lengths, max_len, causal);
        let z = g.constant(Tensor::from_vec(layout.rows(), t.d, x.to_vec()));
        let f = t.add_positions(&mut g, store, z, &layout).unwrap();
        let h = t.encode(&mut g, store, f, &layout);
        g.value(h).clone()
    }

    #[test]
    fn add_positions_identities() {
        let mut store = ParameterStore::new(Precision::F64);
        let t = tower(&mut store, 8);
        let layout = SeqLayout::new(vec![3], 3, false);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(3, 8));
        let out = t.add_positions(&mut g, &store, z, &layout).unwrap();
        assert_eq!(g.value(out).data, store.get(t.pos).value[..24].to_vec());

        let mut zero_store = ParameterStore::new(Precision::F64);
        let t0 = tower(&mut zero_store, 8);
        zero_store.set_value(POSITION_TABLE, &[12, 8], &[0.0; 96]).unwrap();
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(3, 8, x.clone()));
        let out = t0.add_positions(&mut g, &zero_store, z, &layout).unwrap();
        assert_eq!(g.value(out).data, x);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut store = ParameterStore::new(Precision::F64);
        let t = tower(&mut store, 8);
        let layout = SeqLayout::new(vec![13], 13, false);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(13, 8));
        assert_eq!(
            t.add_positions(&mut g, &store, z, &layout).unwrap_err(),
            UserModelError::SequenceTooLong { len: 13, max: 12 }
        );
    }

    #[test]
    fn swapping_rows_changes_output() {
        let mut store = ParameterStore::new(Precision::F64);
        let t = tower(&mut store, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, 32);
        let mut swapped = x.clone();
        swapped[..8].copy_from_slice(&x[8..16]);
        swapped[8..16].copy_from_slice(&x[..8]);
        let a = run(&t, &store, &x, vec![4], 4, false);
        let b = run(&t, &store, &swapped, vec![4], 4, false);
        assert_ne!(a.row(0), b.row(1));
    }

    #[test]
    fn single_position_masks_agree() {
        let mut store = ParameterStore::new(Precision::F64);
        let t = tower(&mut store, 8);
        let x = randn(&mut ChaCha8Rng::seed_from_u64(1), 8);
        assert_eq!(run(&t, &store, &x, vec![1], 1, true), run(&t, &store, &x, vec![1], 1, false));
    }

    #[test]
    fn mask_validation() {
        assert!(matches!(layout_from_mask(&[vec![true, false]], 3, false), Err(UserModelError::MaskShapeMismatch(_))));
        assert!(matches!(layout_from_mask(&[vec![true, false, true]], 3, false), Err(UserModelError::MaskShapeMismatch(_))));
        let l = layout_from_mask(&[vec![true, true, false], vec![true; 3]], 3, true).unwrap();
        assert_eq!(l.lengths, vec![2, 3]);
        assert!(l.causal);
    }

    #[test]
    fn padded_keys_get_zero_attention() {
        let mut g = Graph::new();
        let layout = SeqLayout::new(vec![2, 4], 4, false);
        let qkv = g.constant(Tensor::from_vec(8, 24, randn(&mut ChaCha8Rng::seed_from_u64(3), 192)));
        let a = g.attention(qkv, &layout, 2);
        let probs = g.attention_probs(a).unwrap();
        for h in 0..2 {
            for q in 0..2 {
                let base = (h * 4 + q) * 4;
                assert_eq!(&probs[base + 2..base + 4], &[0.0, 0.0]);
                assert!((probs[base] + probs[base + 1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn user_features_distinguish_users() {
        let mut store = ParameterStore::new(Precision::F64);
        let cards = BTreeMap::from([("age".to_string(), 4), ("gender".to_string(), 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = tower(&mut store, 16).with_features(&mut store, 4, &cards, &mut rng).unwrap();
        assert_eq!(t.features.as_ref().unwrap().input_dim(), 24);
        // make the feature block live
        let vals: Vec<f64> = randn(&mut rng, 24 * 16);
        store.set_value("user_feat.proj.w", &[24, 16], &vals).unwrap();
        let a = BTreeMap::from([("age".to_string(), 1), ("gender".to_string(), 0)]);
        let b = BTreeMap::from([("age".to_string(), 2), ("gender".to_string(), 0)]);
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(2, 16, vec![0.5; 32]));
        let out = t.concat_user_features(&mut g, &store, s, &[&a, &b]).unwrap();
        let out = g.value(out);
        assert_eq!(out.cols, 16);
        assert_ne!(out.row(0), out.row(1));
        let unknown = BTreeMap::from([("city".to_string(), 0)]);
        let s = g.constant(Tensor::zeros(1, 16));
        assert_eq!(
            t.concat_user_features(&mut g, &store, s, &[&unknown]).unwrap_err(),
            UserModelError::UnknownFeature("city".into())
        );
    }

    #[test]
    fn relevance_cases() {
        let c = Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(relevance(&[1.0, 0.0], &c).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(relevance(&[1.0], &c), Err(UserModelError::DimMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = randn(&mut rng, 8);
        let cand = Tensor::from_vec(5, 8, randn(&mut rng, 40));
        let r = relevance(&u, &cand).unwrap();
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..8 {
                s += u[k] * cand.data[j * 8 + k];
            }
            assert!((r[j] - s).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn causal_prefix_is_bitwise_stable(seed in any::<u64>(), t in 0usize..5, noise in -5.0f64..5.0) {
            let mut store = ParameterStore::new(Precision::F64);
            let tw = tower(&mut store, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, 6 * 8);
            let mut y = x.clone();
            for v in y[(t + 1) * 8..].iter_mut() {
                *v += noise;
            }
            let a = run(&tw, &store, &x, vec![6], 6, true);
            let b = run(&tw, &store, &y, vec![6], 6, true);
            for r in 0..=t {
                prop_assert_eq!(a.row(r), b.row(r));
            }
        }

        #[test]
        fn padding_leaves_real_rows_unchanged(seed in any::<u64>(), len in 1usize..6, extra in 1usize..5, causal in any::<bool>()) {
            let mut store = ParameterStore::new(Precision::F64);
            let tw = tower(&mut store, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, len * 8);
            let mut padded = x.clone();
            padded.extend(randn(&mut rng, extra * 8));
            let a = run(&tw, &store, &x, vec![len], len, causal);
            let b = run(&tw, &store, &padded, vec![len], len + extra, causal);
            for r in 0..len {
                for (p, q) in a.row(r).iter().zip(b.row(r)) {
                    prop_assert!((p - q).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn scaling_the_user_preserves_ranking(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = randn(&mut rng, 8);
            let cand = Tensor::from_vec(20, 8, randn(&mut rng, 160));
            let r = relevance(&u, &cand).unwrap();
            let us: Vec<f64> = u.iter().map(|x| x * c).collect();
            let rs = relevance(&us, &cand).unwrap();
            for (a, b) in r.iter().zip(&rs) {
                prop_assert!((a * c - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let order = |v: &[f64]| {
                let mut i: Vec<usize> = (0..v.len()).collect();
                i.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
                i
            };
            prop_assert_eq!(order(&r), order(&rs));
        }
    }
}
