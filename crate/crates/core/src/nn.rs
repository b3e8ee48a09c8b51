//! Layers shared by the item and user towers.

use rand::Rng;

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::params::{Init, ParamError, ParamId, ParameterStore};

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        Self::with_init(store, name, fan_in, fan_out, Init::TruncNormal(INIT_STD), rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let w = store.add(&format!("{name}.w"), &[fan_in, fan_out], init, rng)?;
        let b = store.add(&format!("{name}.b"), &[fan_out], Init::Zeros, rng)?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, d: usize, rng: &mut R) -> Result<Self, ParamError> {
        let gain = store.add(&format!("{name}.gain"), &[d], Init::Ones, rng)?;
        let bias = store.add(&format!("{name}.bias"), &[d], Init::Zeros, rng)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    qkv: Linear,
    out: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    heads: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng)?,
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, rng)?,
            ff1: Linear::new(store, &format!("{name}.ffn.in"), d, ffn_mult * d, rng)?,
            ff2: Linear::new(store, &format!("{name}.ffn.out"), ffn_mult * d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, layout: &SeqLayout, dropout: f64) -> Var {
        let qkv = self.qkv.forward(g, store, x);
        let a = g.attention(qkv, layout, self.heads);
        let a = self.out.forward(g, store, a);
        let a = g.dropout(a, dropout);
        let h = g.add(x, a);
        let h = self.ln1.forward(g, store, h);
        let f = self.ff1.forward(g, store, h);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f);
        let f = g.dropout(f, dropout);
        let o = g.add(h, f);
        self.ln2.forward(g, store, o)
    }
}

/// Zeroes the rows of padded slots so they never leak into later sums.
pub fn padding_rows(layout: &SeqLayout) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(layout.rows());
    for (b, &len) in layout.lengths.iter().enumerate() {
        for t in 0..layout.max_len {
            idx.push((t < len).then_some(b * layout.max_len + t));
        }
    }
    idx
}

/// Categorical side features joined to a `d`-vector by concatenation and a
/// projection back to `d`.
///
/// The projection starts as the identity on the vector block and zero on
/// the feature block, so adding features to a pretrained model does not
/// perturb its outputs before training.
#[derive(Clone, Debug)]
pub struct FeatureConcat {
    /// `(feature name, cardinality, table)` in name order.
    pub tables: Vec<(String, usize, ParamId)>,
    pub proj: Linear,
    pub d: usize,
}

impl FeatureConcat {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        feature_dim: usize,
        cardinalities: &std::collections::BTreeMap<String, usize>,
        rng: &mut R,
    ) -> Result<Option<Self>, ParamError> {
        if cardinalities.is_empty() {
            return Ok(None);
        }
        let mut tables = Vec::new();
        for (name, &card) in cardinalities {
            let id = store.add(&format!("{prefix}.{name}.table"), &[card, feature_dim], Init::TruncNormal(INIT_STD), rng)?;
            tables.push((name.clone(), card, id));
        }
        let fan_in = d + feature_dim * tables.len();
        let proj = Linear::with_init(store, &format!("{prefix}.proj"), fan_in, d, Init::Identity, rng)?;
        Ok(Some(Self { tables, proj, d }))
    }

    pub fn input_dim(&self) -> usize {
        self.proj.fan_in
    }

    /// `x` is `n × d`; `ids[f][r]` is feature `f`'s id for row `r`, with
    /// `None` contributing a zero feature embedding.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, ids: &[Vec<Option<usize>>]) -> Var {
        let mut parts = vec![x];
        for ((_, _, table), rows) in self.tables.iter().zip(ids) {
            let t = g.param(store, *table);
            parts.push(g.gather(t, rows.clone()));
        }
        let c = g.concat_cols(&parts);
        self.proj.forward(g, store, c)
    }
}
