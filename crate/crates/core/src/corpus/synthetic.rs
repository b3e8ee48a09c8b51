//! Latent-factor world generator producing mixture-of-modality source and
//! target domains with disjoint users and items.
//!
//! Every item owns a unit latent vector `z`. Its surface content is rendered
//! from `z` by functions shared across all domains:
//!
//! * text: `text_len` tokens drawn i.i.d. from `softmax(sharpness · E z)`
//!   over the vocabulary, with `E` a fixed random embedding matrix;
//! * vision: a `2×2` tile of `channels·4` intensities `127.5 + 100·tanh(0.8·A z)`
//!   repeated over the grid, plus Gaussian pixel noise. Any grid size renders
//!   the same tile, so the shifted domain can use a different shape.
//!
//! Users own a unit taste vector and draw each interaction from
//! `softmax(taste · z / noise_temperature)` over the domain's items of the
//! chosen modality. Content therefore carries the preference signal across
//! domains while item and user ids never repeat.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogSchema, CorpusError, Dataset, ImageGrid, InteractionSequence, Item, Modality};

pub const SOURCE_DOMAIN: &str = "source";
pub const TARGET_MIXED: &str = "mixed";
pub const TARGET_VISION: &str = "vision";
pub const TARGET_TEXT_FEATURES: &str = "text_features";
pub const TARGET_SHIFTED: &str = "shifted";
pub const TARGET_DOMAINS: [&str; 4] = [TARGET_MIXED, TARGET_VISION, TARGET_TEXT_FEATURES, TARGET_SHIFTED];

const TILE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub n_source_users: usize,
    pub n_target_users: usize,
    pub n_source_items: usize,
    pub n_target_items: usize,
    pub latent_dim: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    /// `[channels, height, width]` of source and ordinary target images.
    pub image_shape: [usize; 3],
    /// Image shape of the shifted vision domain (same channel count).
    pub shifted_image_shape: [usize; 3],
    /// Probability that a draw in a mixed domain picks a vision item.
    pub modality_mix: f64,
    pub noise_temperature: f64,
    pub seed: u64,
    /// Raw stream lengths are uniform in `[min_seq_len, max_raw_seq_len]`.
    pub min_seq_len: usize,
    pub max_raw_seq_len: usize,
    /// Load-time truncation applied to every generated dataset.
    pub max_seq_len: usize,
    pub token_sharpness: f64,
    /// Std of additive pixel noise, in intensity units.
    pub pixel_noise: f64,
    pub n_categories: usize,
    /// Norm of the mean offset of the shifted domain's item latents.
    pub shift_strength: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n_source_users: 2000,
            n_target_users: 1000,
            n_source_items: 200,
            n_target_items: 200,
            latent_dim: 8,
            text_vocab: 64,
            text_len: 8,
            image_shape: [3, 8, 8],
            shifted_image_shape: [3, 12, 12],
            modality_mix: 0.5,
            noise_temperature: 0.1,
            seed: 0,
            min_seq_len: 8,
            max_raw_seq_len: 14,
            max_seq_len: 20,
            token_sharpness: 2.0,
            pixel_noise: 8.0,
            n_categories: 8,
            shift_strength: 0.6,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::ConfigInvalid(msg));
        let positive = [
            ("n_source_users", self.n_source_users),
            ("n_target_users", self.n_target_users),
            ("n_source_items", self.n_source_items),
            ("n_target_items", self.n_target_items),
            ("latent_dim", self.latent_dim),
            ("text_vocab", self.text_vocab),
            ("text_len", self.text_len),
            ("n_categories", self.n_categories),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.image_shape.iter().chain(&self.shifted_image_shape).any(|&d| d == 0) {
            return bad("image shapes must be positive".into());
        }
        if self.shifted_image_shape[0] != self.image_shape[0] {
            return bad("shifted_image_shape must keep the channel count".into());
        }
        if self.image_shape[0] * TILE < self.latent_dim {
            return bad(format!(
                "image channels ({}) x 4 must cover latent_dim ({}) for images to be decodable",
                self.image_shape[0], self.latent_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.modality_mix) {
            return bad("modality_mix must lie in [0, 1]".into());
        }
        if !(self.noise_temperature > 0.0 && self.noise_temperature.is_finite()) {
            return bad("noise_temperature must be positive".into());
        }
        if self.min_seq_len < super::MIN_SPLITTABLE_LEN || self.max_raw_seq_len < self.min_seq_len {
            return bad("need 3 <= min_seq_len <= max_raw_seq_len".into());
        }
        if self.max_seq_len < super::MIN_SPLITTABLE_LEN {
            return bad("max_seq_len must be at least 3".into());
        }
        if self.pixel_noise < 0.0 || self.token_sharpness < 0.0 || self.shift_strength < 0.0 {
            return bad("noise, sharpness and shift must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground-truth latent vectors; `score` is the true preference logit
/// before temperature scaling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceOracle {
    pub users: BTreeMap<String, Vec<f64>>,
    pub items: BTreeMap<String, Vec<f64>>,
}

impl PreferenceOracle {
    pub fn score(&self, user_id: &str, item_id: &str) -> Option<f64> {
        let u = self.users.get(user_id)?;
        let z = self.items.get(item_id)?;
        Some(u.iter().zip(z).map(|(a, b)| a * b).sum())
    }

    /// True scores of every catalog item for one user, in catalog order.
    pub fn scores_for(&self, user_id: &str, catalog: &Catalog) -> Option<Vec<f64>> {
        catalog.items().map(|it| self.score(user_id, &it.item_id)).collect()
    }
}

pub struct SyntheticWorld {
    pub source: Dataset,
    /// In order: mixed, vision, text_features, shifted.
    pub targets: Vec<Dataset>,
    pub oracle: PreferenceOracle,
}

impl SyntheticWorld {
    pub fn target(&self, name: &str) -> Option<&Dataset> {
        self.targets.iter().find(|d| d.domain_name == name)
    }

    pub fn domain(&self, name: &str) -> Option<&Dataset> {
        if name == SOURCE_DOMAIN {
            Some(&self.source)
        } else {
            self.target(name)
        }
    }
}

/// Independent stream per generation stage so changing one domain's size
/// never perturbs another's draws.
fn stream(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Renderer {
    token_emb: Vec<Vec<f64>>,
    pixel_proj: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    gender_dir: Vec<f64>,
    age_dir: Vec<f64>,
}

impl Renderer {
    fn new(cfg: &SyntheticWorldConfig) -> Self {
        let mut rng = stream(cfg.seed, 1);
        let l = cfg.latent_dim;
        let token_emb = (0..cfg.text_vocab).map(|_| gaussian_vec(&mut rng, l)).collect();
        let pixel_proj = (0..cfg.image_shape[0] * TILE).map(|_| gaussian_vec(&mut rng, l)).collect();
        let centroids = (0..cfg.n_categories).map(|_| normalize(gaussian_vec(&mut rng, l))).collect();
        let gender_dir = normalize(gaussian_vec(&mut rng, l));
        let age_dir = normalize(gaussian_vec(&mut rng, l));
        Self { token_emb, pixel_proj, centroids, gender_dir, age_dir }
    }

    fn text(&self, z: &[f64], cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let logits: Vec<f64> = self.token_emb.iter().map(|e| cfg.token_sharpness * dotp(e, z)).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let dist = WeightedIndex::new(&w).expect("finite token weights");
        (0..cfg.text_len).map(|_| dist.sample(rng) as u32).collect()
    }

    fn image(&self, z: &[f64], shape: [usize; 3], noise: f64, rng: &mut ChaCha8Rng) -> ImageGrid {
        let [c, h, w] = shape;
        let tile: Vec<f64> = self.pixel_proj.iter().map(|a| 127.5 + 100.0 * (0.8 * dotp(a, z)).tanh()).collect();
        let mut pixels = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let base = tile[ch * TILE + (y % 2) * 2 + (x % 2)];
                    let eps: f64 = StandardNormal.sample(rng);
                    pixels.push((base + noise * eps).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ImageGrid { channels: c, height: h, width: w, pixels }
    }

    fn category(&self, z: &[f64]) -> u32 {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let v = dotp(c, z);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best as u32
    }

    fn user_features(&self, taste: &[f64]) -> BTreeMap<String, u32> {
        let gender = u32::from(dotp(&self.gender_dir, taste) > 0.0);
        let a = dotp(&self.age_dir, taste);
        let age = [-0.3, 0.0, 0.3].iter().filter(|&&t| a > t).count() as u32;
        BTreeMap::from([("age".to_string(), age), ("gender".to_string(), gender)])
    }
}

struct DomainPlan<'a> {
    name: &'a str,
    label: u64,
    n_users: usize,
    n_items: usize,
    /// `None` alternates text/vision by item index.
    only: Option<Modality>,
    image_shape: [usize; 3],
    shifted: bool,
    features: bool,
}

fn build_domain(
    plan: &DomainPlan<'_>,
    cfg: &SyntheticWorldConfig,
    renderer: &Renderer,
    oracle: &mut PreferenceOracle,
) -> Result<Dataset, CorpusError> {
    let l = cfg.latent_dim;
    let mut rng = stream(cfg.seed, 100 + plan.label);

    let (shift_mean, shift_scale) = if plan.shifted {
        let dir = normalize(gaussian_vec(&mut rng, l));
        let scale: Vec<f64> = (0..l).map(|_| rng.gen_range(0.5..1.5)).collect();
        (dir.iter().map(|d| d * cfg.shift_strength).collect(), scale)
    } else {
        (vec![0.0; l], vec![1.0; l])
    };

    let schema = CatalogSchema { vocab_size: Some(cfg.text_vocab), image_shape: Some(plan.image_shape) };
    let mut catalog = Catalog::new(schema);
    let mut latents = Vec::with_capacity(plan.n_items);
    for i in 0..plan.n_items {
        let g = gaussian_vec(&mut rng, l);
        let z = normalize(g.iter().zip(&shift_scale).zip(&shift_mean).map(|((g, s), m)| g * s + m).collect());
        let modality = plan.only.unwrap_or(if i % 2 == 0 { Modality::Text } else { Modality::Vision });
        let item_id = format!("{}-i{:05}", plan.name, i);
        let (text_tokens, image) = match modality {
            Modality::Text => (Some(renderer.text(&z, cfg, &mut rng)), None),
            Modality::Vision => (None, Some(renderer.image(&z, plan.image_shape, cfg.pixel_noise, &mut rng))),
            Modality::Id => (None, None),
        };
        let mut features = BTreeMap::new();
        if plan.features {
            features.insert("category".to_string(), renderer.category(&z));
        }
        oracle.items.insert(item_id.clone(), z.clone());
        catalog.insert(Item { item_id, modality, text_tokens, image, features })?;
        latents.push((modality, z));
    }

    let groups: Vec<(Modality, Vec<usize>)> = [Modality::Text, Modality::Vision]
        .into_iter()
        .map(|m| (m, (0..plan.n_items).filter(|&i| latents[i].0 == m).collect::<Vec<_>>()))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();

    let mut users = Vec::with_capacity(plan.n_users);
    for u in 0..plan.n_users {
        let taste = normalize(gaussian_vec(&mut rng, l));
        let len = rng.gen_range(cfg.min_seq_len..=cfg.max_raw_seq_len);
        let dists: Vec<WeightedIndex<f64>> = groups
            .iter()
            .map(|(_, idx)| {
                let logits: Vec<f64> = idx.iter().map(|&i| dotp(&taste, &latents[i].1) / cfg.noise_temperature).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                WeightedIndex::new(logits.iter().map(|x| (x - mx).exp())).expect("finite preference weights")
            })
            .collect();
        let items = (0..len)
            .map(|_| {
                let g = if groups.len() == 1 {
                    0
                } else {
                    let vision = rng.gen_bool(cfg.modality_mix);
                    groups.iter().position(|(m, _)| (*m == Modality::Vision) == vision).unwrap_or(0)
                };
                groups[g].1[dists[g].sample(&mut rng)]
            })
            .collect();
        let user_id = format!("{}-u{:05}", plan.name, u);
        let features = if plan.features { renderer.user_features(&taste) } else { BTreeMap::new() };
        oracle.users.insert(user_id.clone(), taste);
        users.push(InteractionSequence { user_id, items, features });
    }
    Dataset::new(Arc::new(catalog), users, plan.name, cfg.max_seq_len)
}

/// Generates the source domain plus the four target domains. A pure
/// function of the config (seed included).
pub fn generate_synthetic_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld, CorpusError> {
    cfg.validate()?;
    let renderer = Renderer::new(cfg);
    let mut oracle = PreferenceOracle::default();
    let plans = [
        DomainPlan {
            name: SOURCE_DOMAIN,
            label: 0,
            n_users: cfg.n_source_users,
            n_items: cfg.n_source_items,
            only: None,
            image_shape: cfg.image_shape,
            shifted: false,
            features: false,
        },
        DomainPlan {
            name: TARGET_MIXED,
            label: 1,
            n_users: cfg.n_target_users,
            n_items: cfg.n_target_items,
            only: None,
            image_shape: cfg.image_shape,
            shifted: false,
            features: false,
        },
        DomainPlan {
            name: TARGET_VISION,
            label: 2,
            n_users: cfg.n_target_users,
            n_items: cfg.n_target_items,
            only: Some(Modality::Vision),
            image_shape: cfg.image_shape,
            shifted: false,
            features: false,
        },
        DomainPlan {
            name: TARGET_TEXT_FEATURES,
            label: 3,
            n_users: cfg.n_target_users,
            n_items: cfg.n_target_items,
            only: Some(Modality::Text),
            image_shape: cfg.image_shape,
            shifted: false,
            features: true,
        },
        DomainPlan {
            name: TARGET_SHIFTED,
            label: 4,
            n_users: cfg.n_target_users,
            n_items: cfg.n_target_items,
            only: Some(Modality::Vision),
            image_shape: cfg.shifted_image_shape,
            shifted: true,
            features: false,
        },
    ];
    let mut datasets = Vec::with_capacity(plans.len());
    for plan in &plans {
        datasets.push(build_domain(plan, cfg, &renderer, &mut oracle)?);
    }
    let source = datasets.remove(0);
    Ok(SyntheticWorld { source, targets: datasets, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            n_source_users: 60,
            n_target_users: 40,
            n_source_items: 30,
            n_target_items: 24,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_world(&small()).unwrap();
        let b = generate_synthetic_world(&small()).unwrap();
        assert_eq!(a.source.users, b.source.users);
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(x.users, y.users);
            assert!(x.catalog.items().zip(y.catalog.items()).all(|(p, q)| p == q));
        }
        assert_eq!(a.oracle, b.oracle);
    }

    #[test]
    fn domains_share_no_item_or_user_ids() {
        let w = generate_synthetic_world(&small()).unwrap();
        let src_items: HashSet<&str> = w.source.catalog.items().map(|i| i.item_id.as_str()).collect();
        let src_users: HashSet<&str> = w.source.users.iter().map(|u| u.user_id.as_str()).collect();
        for t in &w.targets {
            assert!(t.catalog.items().all(|i| !src_items.contains(i.item_id.as_str())));
            assert!(t.users.iter().all(|u| !src_users.contains(u.user_id.as_str())));
        }
    }

    #[test]
    fn target_domains_have_the_promised_shape() {
        let cfg = small();
        let w = generate_synthetic_world(&cfg).unwrap();
        let names: Vec<&str> = w.targets.iter().map(|d| d.domain_name.as_str()).collect();
        assert_eq!(names, TARGET_DOMAINS.to_vec());
        assert_eq!(w.source.catalog.modalities(), vec![Modality::Text, Modality::Vision]);
        assert_eq!(w.target(TARGET_MIXED).unwrap().catalog.modalities(), vec![Modality::Text, Modality::Vision]);
        assert_eq!(w.target(TARGET_VISION).unwrap().catalog.modalities(), vec![Modality::Vision]);
        let tf = w.target(TARGET_TEXT_FEATURES).unwrap();
        assert_eq!(tf.catalog.modalities(), vec![Modality::Text]);
        assert!(tf.catalog.items().all(|i| i.features.contains_key("category")));
        assert!(tf.users.iter().all(|u| u.features.contains_key("age") && u.features.contains_key("gender")));
        let sh = w.target(TARGET_SHIFTED).unwrap();
        assert_eq!(sh.catalog.image_shape(), Some(cfg.shifted_image_shape));
        assert_ne!(cfg.shifted_image_shape, cfg.image_shape);
    }

    #[test]
    fn lengths_respect_bounds() {
        let cfg = small();
        let w = generate_synthetic_world(&cfg).unwrap();
        for u in &w.source.users {
            assert!(u.items.len() >= cfg.min_seq_len && u.items.len() <= cfg.max_raw_seq_len.min(cfg.max_seq_len));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.noise_temperature = 0.0;
        assert!(matches!(generate_synthetic_world(&cfg), Err(CorpusError::ConfigInvalid(_))));
        let mut cfg = small();
        cfg.image_shape = [1, 8, 8];
        cfg.shifted_image_shape = [1, 12, 12];
        assert!(matches!(generate_synthetic_world(&cfg), Err(CorpusError::ConfigInvalid(_))));
    }
}
