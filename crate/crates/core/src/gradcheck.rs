//! Central finite-difference verification of analytic gradients, plus the
//! standard fragments every model component is checked on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::corpus::ImageGrid;
use crate::encoders::{TextEncoder, TextEncoderConfig, VisionEncoder, VisionEncoderConfig};
use crate::objectives::{cpc_loss, uep_loss, SoftmaxHead};
use crate::params::{Precision, ParameterStore};
use crate::tensor::Tensor;
use crate::user_model::{UserEncoderConfig, UserTower};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("gradient of `{param}` off by relative error {rel_err:.3e}")]
    ToleranceExceeded { param: String, rel_err: f64 },
    #[error("gradient checking needs 64-bit parameters")]
    PrecisionUnsupported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter holding the largest error (empty when every error is zero).
    pub worst_param: String,
    pub n_checked: usize,
}

/// Compares the tape's gradient of `loss_fn` with central differences for
/// every scalar of every trainable parameter. `loss_fn` must be
/// deterministic (it is always given an inference graph).
pub fn grad_check(
    store: &mut ParameterStore,
    loss_fn: impl Fn(&mut Graph, &ParameterStore) -> Var,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if store.precision() != Precision::F64 {
        return Err(GradCheckError::PrecisionUnsupported);
    }
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    g.backward(loss);
    g.accumulate_param_grads(store);
    let eval = |s: &ParameterStore| {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s);
        g.value(l).item()
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), n_checked: 0 };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value[i];
            store.get_mut(id).value[i] = orig + eps;
            let up = eval(store);
            store.get_mut(id).value[i] = orig - eps;
            let down = eval(store);
            store.get_mut(id).value[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = store.get(id).grad[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.get(id).name.clone();
            }
        }
    }
    store.zero_grads();
    if report.max_rel_err >= tolerance {
        return Err(GradCheckError::ToleranceExceeded { param: report.worst_param, rel_err: report.max_rel_err });
    }
    Ok(report)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fixed random projection turning an output matrix into a scalar loss
/// with non-trivial gradients everywhere.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let t = g.value(x);
    let (r, c) = (t.rows, t.cols);
    let w = g.constant(Tensor::from_vec(r, c, randn(&mut ChaCha8Rng::seed_from_u64(seed), r * c)));
    let p = g.mul(x, w);
    g.sum(p)
}

/// Scales every parameter up so layer norms and attention operate away
/// from the near-degenerate small-init regime.
fn perturb(store: &mut ParameterStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += std * e;
        }
    }
}

/// One named standard fragment with its store and loss.
pub struct Fragment {
    pub name: &'static str,
    pub store: ParameterStore,
    pub loss: Box<dyn Fn(&mut Graph, &ParameterStore) -> Var>,
}

impl Fragment {
    pub fn n_params(&self) -> usize {
        self.store.total_count()
    }

    pub fn check(&mut self, eps: f64, tolerance: f64) -> Result<GradCheckReport, GradCheckError> {
        let loss = &self.loss;
        grad_check(&mut self.store, |g, s| loss(g, s), eps, tolerance)
    }
}

fn text_fragment() -> Fragment {
    let mut store = ParameterStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = TextEncoderConfig { vocab_size: 12, max_tokens: 5, d_model: 8, n_layers: 2, n_heads: 2, ffn_mult: 2, dropout: 0.0 };
    let enc = TextEncoder::new(&mut store, &cfg, 8, &mut rng).unwrap();
    perturb(&mut store, 2, 0.3);
    let loss = move |g: &mut Graph, s: &ParameterStore| {
        let batch: Vec<&[u32]> = vec![&[1, 5, 3, 11], &[2, 7]];
        let out = enc.forward(g, s, &batch);
        project(g, out, 3)
    };
    Fragment { name: "encode_text", store, loss: Box::new(loss) }
}

fn image_fragment() -> Fragment {
    let mut store = ParameterStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = VisionEncoderConfig { in_channels: 2, image_h: 4, image_w: 4, conv_stages: vec![(3, 2), (4, 1)], mlp_dims: None };
    let enc = VisionEncoder::new(&mut store, &cfg, 8, &mut rng).unwrap();
    perturb(&mut store, 5, 0.1);
    let mut prng = ChaCha8Rng::seed_from_u64(6);
    let images: Vec<ImageGrid> = (0..2)
        .map(|_| {
            let pixels = (0..32).map(|_| rand::Rng::gen_range(&mut prng, 0..=255u8)).collect();
            ImageGrid { channels: 2, height: 4, width: 4, pixels }
        })
        .collect();
    let loss = move |g: &mut Graph, s: &ParameterStore| {
        let refs: Vec<&ImageGrid> = images.iter().collect();
        let out = enc.forward(g, s, &refs);
        project(g, out, 7)
    };
    Fragment { name: "encode_image", store, loss: Box::new(loss) }
}

fn user_fragment(causal: bool) -> Fragment {
    let mut store = ParameterStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = UserEncoderConfig { n_layers: 2, n_heads: 2, max_positions: 5, causal, ffn_mult: 2, dropout: 0.0 };
    let tower = UserTower::new(&mut store, &cfg, 8, &mut rng).unwrap();
    perturb(&mut store, 9, 0.3);
    let x = randn(&mut ChaCha8Rng::seed_from_u64(10), 2 * 4 * 8);
    let loss = move |g: &mut Graph, s: &ParameterStore| {
        let layout = SeqLayout::new(vec![4, 3], 4, causal);
        let z = g.constant(Tensor::from_vec(8, 8, x.clone()));
        let f = tower.add_positions(g, s, z, &layout).unwrap();
        let h = tower.encode(g, s, f, &layout);
        let rows = crate::nn::padding_rows(&layout);
        let h = g.gather(h, rows);
        project(g, h, 11)
    };
    Fragment { name: if causal { "user_encoder_causal" } else { "user_encoder_bidirectional" }, store, loss: Box::new(loss) }
}

fn uep_fragment() -> Fragment {
    let mut store = ParameterStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let head = SoftmaxHead::new(&mut store, 8, 20, &mut rng).unwrap();
    perturb(&mut store, 13, 0.5);
    let x = randn(&mut ChaCha8Rng::seed_from_u64(14), 5 * 8);
    let loss = move |g: &mut Graph, s: &ParameterStore| {
        let h = g.constant(Tensor::from_vec(5, 8, x.clone()));
        uep_loss(g, s, &head, h, vec![Some(0), Some(3), None, Some(19), Some(7)], true, 2).unwrap()
    };
    Fragment { name: "uep_loss", store, loss: Box::new(loss) }
}

/// CPC over a 2-layer bidirectional user tower: context summaries are
/// scored against fixed candidate embeddings.
fn cpc_fragment() -> Fragment {
    let mut store = ParameterStore::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = UserEncoderConfig { n_layers: 2, n_heads: 2, max_positions: 4, causal: false, ffn_mult: 2, dropout: 0.0 };
    let tower = UserTower::new(&mut store, &cfg, 8, &mut rng).unwrap();
    perturb(&mut store, 16, 0.3);
    let mut drng = ChaCha8Rng::seed_from_u64(17);
    let items = randn(&mut drng, 10 * 8);
    let loss = move |g: &mut Graph, s: &ParameterStore| {
        let emb = g.constant(Tensor::from_vec(10, 8, items.clone()));
        let (h, layout) = tower.encode_sequences(g, s, emb, &[vec![0, 1, 2], vec![3, 4]], false).unwrap();
        let u = tower.summary(g, h, &layout);
        // per user: 2 targets then 3 negatives
        let cands = [[5, 6, 7, 8, 9], [0, 1, 7, 8, 2]];
        let urows = (0..2).flat_map(|b| std::iter::repeat(Some(b)).take(5)).collect();
        let ur = g.gather(u, urows);
        let cr = g.gather(emb, cands.iter().flatten().map(|&c| Some(c)).collect());
        let scores = g.row_dot(ur, cr);
        let positive = (0..2).flat_map(|_| [true, true, false, false, false]).collect();
        cpc_loss(g, scores, positive, 2)
    };
    Fragment { name: "cpc_loss", store, loss: Box::new(loss) }
}

/// The fragments covering text and image encoders, the user encoder under
/// both masks, and both losses.
pub fn standard_fragments() -> Vec<Fragment> {
    vec![text_fragment(), image_fragment(), user_fragment(false), user_fragment(true), uep_fragment(), cpc_fragment()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn standard_fragments_pass() {
        for mut f in standard_fragments() {
            assert!(f.n_params() <= 2000, "{} has {} params", f.name, f.n_params());
            let r = f.check(DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap_or_else(|e| panic!("{}: {e}", f.name));
            assert_eq!(r.n_checked, f.n_params());
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParameterStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add("w", &[3], Init::Ones, &mut rng).unwrap();
        let r = grad_check(&mut store, |g, _| g.constant(Tensor::scalar(2.5)), DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        let mut g = Graph::new();
        let l = g.constant(Tensor::scalar(2.5));
        g.backward(l);
        g.accumulate_param_grads(&mut store);
        assert!(store.iter().all(|(_, p)| p.grad.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn wrong_gradient_is_reported_by_name() {
        let mut store = ParameterStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add("w", &[2], Init::Values(vec![0.5, -1.0]), &mut rng).unwrap();
        // loss = sum(w * w) computed as sum(w * stop_grad(w)): analytic grad is half the truth
        let err = grad_check(
            &mut store,
            |g, s| {
                let a = g.param(s, id);
                let b = g.constant(s.value_tensor(id));
                let p = g.mul(a, b);
                g.sum(p)
            },
            DEFAULT_EPS,
            DEFAULT_TOLERANCE,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::ToleranceExceeded { ref param, .. } if param == "w"));
    }

    #[test]
    fn f32_is_refused() {
        let mut store = ParameterStore::new(Precision::F32);
        assert_eq!(
            grad_check(&mut store, |g, _| g.constant(Tensor::scalar(0.0)), DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap_err(),
            GradCheckError::PrecisionUnsupported
        );
    }
}
