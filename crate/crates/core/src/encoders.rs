//! The item tower: modality-specific encoders mapping raw item content to a
//! shared `d`-dimensional embedding, and the ID-embedding encoder of the
//! IDRec baseline.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ConvGeom, Graph, SeqLayout, Var};
use crate::corpus::{Catalog, ImageGrid, Item, Modality};
use crate::nn::{FeatureConcat, LayerNorm, Linear, TransformerLayer, INIT_STD};
use crate::params::{Init, ParamError, ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Every tensor of the item encoders lives under this prefix; it is exactly
/// the set frozen by the frozen-features transfer mode.
pub const ITEM_ENCODER_PREFIX: &str = "item_enc.";
pub const ITEM_FEATURE_PREFIX: &str = "item_feat";

/// Catalog blocks encoded per graph at inference time.
const ENCODE_BLOCK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("item `{item_id}`: token {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { item_id: String, token: u32, vocab_size: usize },
    #[error("item `{0}` has an empty token list")]
    EmptyTokenList(String),
    #[error("item `{item_id}`: {len} tokens exceed max_tokens {max}")]
    TooManyTokens { item_id: String, len: usize, max: usize },
    #[error("item `{item_id}`: image shape {found:?} does not match encoder shape {expected:?}")]
    BadImageShape { item_id: String, expected: [usize; 3], found: [usize; 3] },
    #[error("index {index} outside table of {size} rows")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("item `{item_id}` has modality {modality:?} but no encoder is configured for it")]
    UnconfiguredModality { item_id: String, modality: Modality },
    #[error("feature `{0}` has no embedding table")]
    UnknownFeature(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 64, max_tokens: 16, d_model: 32, n_layers: 1, n_heads: 2, ffn_mult: 2, dropout: 0.1 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(format!("text.{m}")));
        if self.vocab_size == 0 || self.max_tokens == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("vocab_size, max_tokens, d_model, n_layers and n_heads must be positive");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionEncoderConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Residual stages as `(out_channels, stride)`.
    pub conv_stages: Vec<(usize, usize)>,
    /// Widths of the MLP after pooling; must end in the model width.
    /// Defaults to one hidden layer of `2d`.
    pub mlp_dims: Option<Vec<usize>>,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, image_h: 8, image_w: 8, conv_stages: vec![(16, 2), (16, 1)], mlp_dims: None }
    }
}

impl VisionEncoderConfig {
    pub fn resolved_mlp_dims(&self, d: usize) -> Vec<usize> {
        self.mlp_dims.clone().unwrap_or_else(|| vec![2 * d, d])
    }

    /// Spatial size after every stage.
    pub fn output_hw(&self) -> (usize, usize) {
        self.conv_stages.iter().fold((self.image_h, self.image_w), |(h, w), &(_, s)| ((h - 1) / s + 1, (w - 1) / s + 1))
    }

    pub fn validate(&self, d: usize) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(format!("vision.{m}")));
        if self.in_channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return bad("in_channels, image_h and image_w must be positive".into());
        }
        if self.conv_stages.is_empty() {
            return bad("conv_stages must not be empty".into());
        }
        if self.conv_stages.iter().any(|&(c, s)| c == 0 || s == 0) {
            return bad("conv_stages entries must be positive".into());
        }
        let (h, w) = self.output_hw();
        if h == 0 || w == 0 {
            return bad("spatial dims vanish after the conv stages".into());
        }
        let mlp = self.resolved_mlp_dims(d);
        if mlp.is_empty() || mlp.iter().any(|&x| x == 0) {
            return bad("mlp_dims must be non-empty and positive".into());
        }
        if *mlp.last().unwrap() != d {
            return bad(format!("mlp_dims must end in d_model ({d}), got {mlp:?}"));
        }
        Ok(())
    }
}

fn check_tokens(item: &Item, tokens: &[u32], cfg: &TextEncoderConfig) -> Result<(), EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyTokenList(item.item_id.clone()));
    }
    if tokens.len() > cfg.max_tokens {
        return Err(EncoderError::TooManyTokens { item_id: item.item_id.clone(), len: tokens.len(), max: cfg.max_tokens });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(EncoderError::TokenOutOfRange { item_id: item.item_id.clone(), token: t, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

/// Token and position embeddings, a post-norm transformer, attention
/// pooling with one learned query, and a projection to `d`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln: LayerNorm,
    layers: Vec<TransformerLayer>,
    pool_query: ParamId,
    proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        cfg: &TextEncoderConfig,
        d: usize,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let p = "item_enc.text";
        let w = cfg.d_model;
        let std = Init::TruncNormal(INIT_STD);
        let tok_emb = store.add(&format!("{p}.tok_emb"), &[cfg.vocab_size, w], std.clone(), rng)?;
        let pos_emb = store.add(&format!("{p}.pos_emb"), &[cfg.max_tokens, w], std.clone(), rng)?;
        let emb_ln = LayerNorm::new(store, &format!("{p}.emb_ln"), w, rng)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{p}.layer{i}"), w, cfg.n_heads, cfg.ffn_mult, rng))
            .collect::<Result<_, _>>()?;
        let pool_query = store.add(&format!("{p}.pool_query"), &[w], std, rng)?;
        let proj = Linear::new(store, &format!("{p}.proj"), w, d, rng)?;
        Ok(Self { cfg: cfg.clone(), tok_emb, pos_emb, emb_ln, layers, pool_query, proj })
    }

    /// Final hidden states of a batch plus its padded layout.
    fn hidden(&self, g: &mut Graph, store: &ParameterStore, batch: &[&[u32]]) -> (Var, SeqLayout) {
        let lengths: Vec<usize> = batch.iter().map(|t| t.len()).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(1);
        let layout = SeqLayout::new(lengths, max_len, false);
        let mut tok_idx = Vec::with_capacity(layout.rows());
        let mut pos_idx = Vec::with_capacity(layout.rows());
        for toks in batch {
            for t in 0..max_len {
                tok_idx.push(toks.get(t).map(|&x| x as usize));
                pos_idx.push((t < toks.len()).then_some(t));
            }
        }
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let x = g.gather(tok, tok_idx);
        let pe = g.gather(pos, pos_idx);
        let x = g.add(x, pe);
        let x = self.emb_ln.forward(g, store, x);
        let mut x = g.dropout(x, self.cfg.dropout);
        for layer in &self.layers {
            x = layer.forward(g, store, x, &layout, self.cfg.dropout);
        }
        (x, layout)
    }

    /// Returns the pooled-and-projected embeddings and the pooling node.
    pub fn forward_with_pool(&self, g: &mut Graph, store: &ParameterStore, batch: &[&[u32]]) -> (Var, Var) {
        let (h, layout) = self.hidden(g, store, batch);
        let q = g.param(store, self.pool_query);
        let pooled = g.attn_pool(h, q, &layout);
        (self.proj.forward(g, store, pooled), pooled)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, batch: &[&[u32]]) -> Var {
        self.forward_with_pool(g, store, batch).0
    }

    /// Inference-mode embedding of one validated token list.
    pub fn encode(&self, store: &ParameterStore, item: &Item) -> Result<Vec<f64>, EncoderError> {
        let tokens = item.text_tokens.as_deref().unwrap_or(&[]);
        check_tokens(item, tokens, &self.cfg)?;
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &[tokens]);
        Ok(g.value(v).data.clone())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let fan_in = in_c * kernel * kernel;
        let w = store.add(&format!("{name}.w"), &[out_c, in_c, kernel, kernel], Init::Kaiming { fan_in }, rng)?;
        let b = store.add(&format!("{name}.b"), &[out_c], Init::Zeros, rng)?;
        let geom = ConvGeom { in_c, in_h: 0, in_w: 0, out_c, kernel, stride, pad: kernel / 2 };
        Ok(Self { w, b, geom })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = ConvGeom { in_h: h, in_w: w, ..self.geom };
        let wv = g.param(store, self.w);
        let bv = g.param(store, self.b);
        (g.conv2d(x, wv, bv, geom), geom.out_h(), geom.out_w())
    }
}

#[derive(Clone, Debug)]
struct ResidualStage {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

/// Residual conv stages, global average pooling, and an MLP to `d`.
/// Pixels enter as `value / 255`.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: VisionEncoderConfig,
    stages: Vec<ResidualStage>,
    mlp: Vec<Linear>,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        cfg: &VisionEncoderConfig,
        d: usize,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        cfg.validate(d)?;
        let p = "item_enc.vision";
        let mut in_c = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &(out_c, stride)) in cfg.conv_stages.iter().enumerate() {
            let conv1 = ConvLayer::new(store, &format!("{p}.stage{i}.conv1"), in_c, out_c, 3, stride, rng)?;
            let conv2 = ConvLayer::new(store, &format!("{p}.stage{i}.conv2"), out_c, out_c, 3, 1, rng)?;
            let shortcut = if in_c != out_c || stride != 1 {
                Some(ConvLayer::new(store, &format!("{p}.stage{i}.shortcut"), in_c, out_c, 1, stride, rng)?)
            } else {
                None
            };
            stages.push(ResidualStage { conv1, conv2, shortcut });
            in_c = out_c;
        }
        let mut mlp = Vec::new();
        for (i, &out) in cfg.resolved_mlp_dims(d).iter().enumerate() {
            mlp.push(Linear::new(store, &format!("{p}.mlp{i}"), in_c, out, rng)?);
            in_c = out;
        }
        Ok(Self { cfg: cfg.clone(), stages, mlp })
    }

    pub fn channels_out(&self) -> usize {
        self.cfg.conv_stages.last().map(|s| s.0).unwrap_or(self.cfg.in_channels)
    }

    fn pixels(images: &[&ImageGrid]) -> Tensor {
        let cols = images.first().map(|i| i.pixels.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(images.len() * cols);
        for img in images {
            data.extend(img.pixels.iter().map(|&p| p as f64 / 255.0));
        }
        Tensor::from_vec(images.len(), cols, data)
    }

    /// Globally pooled conv features, before the MLP.
    pub fn pooled(&self, g: &mut Graph, store: &ParameterStore, images: &[&ImageGrid]) -> Var {
        let [_, mut h, mut w] = images[0].shape();
        let mut x = g.constant(Self::pixels(images));
        for s in &self.stages {
            let (y, oh, ow) = s.conv1.forward(g, store, x, h, w);
            let y = g.relu(y);
            let (y, _, _) = s.conv2.forward(g, store, y, oh, ow);
            let skip = match &s.shortcut {
                Some(sc) => sc.forward(g, store, x, h, w).0,
                None => x,
            };
            let y = g.add(y, skip);
            x = g.relu(y);
            h = oh;
            w = ow;
        }
        g.avg_pool(x, self.channels_out())
    }

    /// All images must share one shape.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, images: &[&ImageGrid]) -> Var {
        let mut x = self.pooled(g, store, images);
        for (i, layer) in self.mlp.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i + 1 < self.mlp.len() {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn check_shape(&self, item: &Item, img: &ImageGrid) -> Result<(), EncoderError> {
        let expected = [self.cfg.in_channels, self.cfg.image_h, self.cfg.image_w];
        if img.shape() != expected {
            return Err(EncoderError::BadImageShape { item_id: item.item_id.clone(), expected, found: img.shape() });
        }
        Ok(())
    }

    pub fn encode(&self, store: &ParameterStore, item: &Item) -> Result<Vec<f64>, EncoderError> {
        let img = item.image.as_ref().ok_or_else(|| EncoderError::UnconfiguredModality {
            item_id: item.item_id.clone(),
            modality: item.modality,
        })?;
        self.check_shape(item, img)?;
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &[img]);
        Ok(g.value(v).data.clone())
    }

    /// Adopts a new input resolution; the weights do not depend on it.
    pub fn set_image_hw(&mut self, h: usize, w: usize) {
        self.cfg.image_h = h;
        self.cfg.image_w = w;
    }
}

/// `|V| × d` lookup table.
#[derive(Clone, Debug)]
pub struct IdEncoder {
    pub table: ParamId,
    pub size: usize,
}

impl IdEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, n_items: usize, d: usize, rng: &mut R) -> Result<Self, EncoderError> {
        let table = store.add("item_enc.id.table", &[n_items, d], Init::TruncNormal(INIT_STD), rng)?;
        Ok(Self { table, size: n_items })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, indices: &[usize]) -> Result<Var, EncoderError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.size) {
            return Err(EncoderError::IndexOutOfRange { index: bad, size: self.size });
        }
        let t = g.param(store, self.table);
        Ok(g.gather(t, indices.iter().map(|&i| Some(i)).collect()))
    }

    pub fn encode(&self, store: &ParameterStore, index: usize) -> Result<Vec<f64>, EncoderError> {
        if index >= self.size {
            return Err(EncoderError::IndexOutOfRange { index, size: self.size });
        }
        let (_, d) = store.get(self.table).matrix_dims();
        Ok(store.get(self.table).value[index * d..(index + 1) * d].to_vec())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemEncoderKind {
    /// Text and vision content encoders (transferable).
    #[default]
    Content,
    /// One embedding row per catalog item (the IDRec baseline).
    Id,
}

/// Modality-dispatching item tower with optional side-feature concat.
#[derive(Clone, Debug)]
pub struct ItemTower {
    pub d: usize,
    pub text: Option<TextEncoder>,
    pub vision: Option<VisionEncoder>,
    pub id: Option<IdEncoder>,
    pub features: Option<FeatureConcat>,
}

impl ItemTower {
    pub fn content<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        d: usize,
        text: &TextEncoderConfig,
        vision: &VisionEncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        Ok(Self {
            d,
            text: Some(TextEncoder::new(store, text, d, rng)?),
            vision: Some(VisionEncoder::new(store, vision, d, rng)?),
            id: None,
            features: None,
        })
    }

    pub fn id_only<R: Rng + ?Sized>(store: &mut ParameterStore, d: usize, n_items: usize, rng: &mut R) -> Result<Self, EncoderError> {
        Ok(Self { d, text: None, vision: None, id: Some(IdEncoder::new(store, n_items, d, rng)?), features: None })
    }

    pub fn with_features<R: Rng + ?Sized>(
        mut self,
        store: &mut ParameterStore,
        feature_dim: usize,
        cardinalities: &BTreeMap<String, usize>,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        self.features = FeatureConcat::new(store, ITEM_FEATURE_PREFIX, self.d, feature_dim, cardinalities, rng)?;
        Ok(self)
    }

    /// Checks that every catalog item can be encoded.
    pub fn validate_catalog(&self, catalog: &Catalog) -> Result<(), EncoderError> {
        for item in catalog.items() {
            self.validate_item(item)?;
        }
        Ok(())
    }

    fn validate_item(&self, item: &Item) -> Result<(), EncoderError> {
        let unconfigured = || EncoderError::UnconfiguredModality { item_id: item.item_id.clone(), modality: item.modality };
        if self.id.is_none() {
            match item.modality {
                Modality::Text => {
                    let enc = self.text.as_ref().ok_or_else(unconfigured)?;
                    check_tokens(item, item.text_tokens.as_deref().unwrap_or(&[]), &enc.cfg)?;
                }
                Modality::Vision => {
                    let enc = self.vision.as_ref().ok_or_else(unconfigured)?;
                    enc.check_shape(item, item.image.as_ref().ok_or_else(unconfigured)?)?;
                }
                Modality::Id => return Err(unconfigured()),
            }
        }
        self.feature_ids(&[item])?;
        Ok(())
    }

    fn feature_ids(&self, items: &[&Item]) -> Result<Vec<Vec<Option<usize>>>, EncoderError> {
        let Some(fc) = &self.features else { return Ok(Vec::new()) };
        for item in items {
            if let Some(name) = item.features.keys().find(|k| !fc.tables.iter().any(|(n, _, _)| n == *k)) {
                return Err(EncoderError::UnknownFeature(name.clone()));
            }
        }
        fc.tables
            .iter()
            .map(|(name, card, _)| {
                items
                    .iter()
                    .map(|it| match it.features.get(name) {
                        Some(&v) if (v as usize) < *card => Ok(Some(v as usize)),
                        Some(&v) => Err(EncoderError::IndexOutOfRange { index: v as usize, size: *card }),
                        None => Ok(None),
                    })
                    .collect()
            })
            .collect()
    }

    /// Embeds catalog items `indices` as an `n × d` matrix in input order.
    /// With `frozen`, encoder parameters are bound as constants.
    pub fn encode_items(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        catalog: &Catalog,
        indices: &[usize],
        frozen: bool,
    ) -> Result<Var, EncoderError> {
        let items: Vec<&Item> = indices.iter().map(|&i| catalog.item(i)).collect();
        let prev = g.set_grad_enabled(!frozen);
        let out = self.encode_raw(g, store, indices, &items);
        g.set_grad_enabled(prev);
        let out = out?;
        match &self.features {
            None => Ok(out),
            Some(fc) => {
                let ids = self.feature_ids(&items)?;
                Ok(fc.forward(g, store, out, &ids))
            }
        }
    }

    fn encode_raw(&self, g: &mut Graph, store: &ParameterStore, indices: &[usize], items: &[&Item]) -> Result<Var, EncoderError> {
        if let Some(id) = &self.id {
            return id.forward(g, store, indices);
        }
        for item in items {
            self.validate_item(item)?;
        }
        let n = items.len();
        let mut parts = Vec::new();
        let text_pos: Vec<usize> = (0..n).filter(|&i| items[i].modality == Modality::Text).collect();
        if !text_pos.is_empty() {
            let enc = self.text.as_ref().expect("validated");
            let batch: Vec<&[u32]> = text_pos.iter().map(|&i| items[i].text_tokens.as_deref().unwrap()).collect();
            parts.push((enc.forward(g, store, &batch), text_pos));
        }
        let vis_pos: Vec<usize> = (0..n).filter(|&i| items[i].modality == Modality::Vision).collect();
        if !vis_pos.is_empty() {
            let enc = self.vision.as_ref().expect("validated");
            let batch: Vec<&ImageGrid> = vis_pos.iter().map(|&i| items[i].image.as_ref().unwrap()).collect();
            parts.push((enc.forward(g, store, &batch), vis_pos));
        }
        // scatter each modality group back to input order; other rows are zero
        let mut out: Option<Var> = None;
        for (v, pos) in parts {
            let mut idx = vec![None; n];
            for (k, &p) in pos.iter().enumerate() {
                idx[p] = Some(k);
            }
            let s = g.gather(v, idx);
            out = Some(match out {
                None => s,
                Some(o) => g.add(o, s),
            });
        }
        Ok(out.unwrap_or_else(|| g.constant(Tensor::zeros(0, self.d))))
    }

    /// Inference embeddings of the whole catalog (`|V| × d`).
    pub fn encode_catalog(&self, store: &ParameterStore, catalog: &Catalog) -> Result<Tensor, EncoderError> {
        let mut out = Tensor::zeros(catalog.len(), self.d);
        let all: Vec<usize> = (0..catalog.len()).collect();
        for block in all.chunks(ENCODE_BLOCK) {
            let mut g = Graph::new();
            let v = self.encode_items(&mut g, store, catalog, block, true)?;
            let t = g.value(v);
            out.data[block[0] * self.d..(block[0] + block.len()) * self.d].copy_from_slice(&t.data);
        }
        Ok(out)
    }
}
