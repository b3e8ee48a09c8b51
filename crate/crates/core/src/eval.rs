//! Full-catalog leave-one-out evaluation, HR@K / NDCG@K, and run-to-run
//! comparison.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Split, SplitView};
use crate::tensor::Tensor;

/// Users scored per call into the model.
const USER_BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split has no users")]
    EmptySplit,
    #[error("reports differ in {0}")]
    MismatchedReports(String),
    #[error("baseline {metric} is zero")]
    ZeroBaseline { metric: String },
    #[error("item {0} cannot be encoded: {1}")]
    UnencodableItem(usize, String),
    #[error("model failed: {0}")]
    Model(String),
    #[error("metrics file {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Anything that can score every catalog item for a batch of contexts.
pub trait Scorer {
    /// Returns a `contexts.len() × |V|` score matrix. `users` indexes the
    /// dataset's users (for side features).
    fn score(&self, dataset: &Dataset, users: &[usize], contexts: &[Vec<usize>]) -> Result<Tensor, EvalError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user_id: String,
    pub target: usize,
    pub rank: usize,
}

/// 1-based rank of `target` when items are sorted by descending score,
/// ties broken by ascending item index.
pub fn rank_full(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&i| i == target).expect("target inside catalog") + 1
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Removes the user's context items (other than the target) from the
    /// candidates.
    pub mask_history: bool,
}

impl EvalOptions {
    pub fn new(k: usize) -> Self {
        Self { k, mask_history: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub domain: String,
    pub split: Split,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub n_users: usize,
    pub config_hash: String,
    #[serde(default)]
    pub wall_clock_secs: f64,
}

pub const METRICS_CSV_HEADER: &str = "run_id,domain,split,K,hr,ndcg,n_users,config_hash";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{}",
            self.run_id, self.domain, self.split, self.k, self.hr, self.ndcg, self.n_users, self.config_hash
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields, found {}", f.len()));
        }
        let split = match f[2] {
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(format!("unknown split `{other}`")),
        };
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|e| format!("{what}: {e}"));
        Ok(Self {
            run_id: f[0].into(),
            domain: f[1].into(),
            split,
            k: f[3].parse().map_err(|e| format!("K: {e}"))?,
            hr: num(f[4], "hr")?,
            ndcg: num(f[5], "ndcg")?,
            n_users: f[6].parse().map_err(|e| format!("n_users: {e}"))?,
            config_hash: f[7].into(),
            wall_clock_secs: 0.0,
        })
    }

    pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<(), EvalError> {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| EvalError::Io { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricsReport>, EvalError> {
        let io = |reason: String| EvalError::Io { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_CSV_HEADER) {
            return Err(io("missing header".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| Self::parse_csv_row(l).map_err(|e| io(format!("row {}: {e}", i + 1))))
            .collect()
    }
}

/// Per-user ranks of the held-out targets of `split`.
pub fn rank_users(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    view: &SplitView,
    split: Split,
    opts: &EvalOptions,
) -> Result<Vec<RankingResult>, EvalError> {
    let held = view.held_out(split);
    if held.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut out = Vec::with_capacity(held.len());
    for block in held.chunks(USER_BLOCK) {
        let users: Vec<usize> = block.iter().map(|h| h.user).collect();
        let contexts: Vec<Vec<usize>> = block.iter().map(|h| h.context.clone()).collect();
        let scores = scorer.score(dataset, &users, &contexts)?;
        for (r, h) in block.iter().enumerate() {
            let mut s = scores.row(r).to_vec();
            if opts.mask_history {
                for &c in &h.context {
                    if c != h.target {
                        s[c] = f64::NEG_INFINITY;
                    }
                }
            }
            out.push(RankingResult { user_id: dataset.users[h.user].user_id.clone(), target: h.target, rank: rank_full(&s, h.target) });
        }
    }
    Ok(out)
}

/// Mean HR@K and NDCG@K over ranks, in a fixed order.
pub fn summarize(ranks: &[RankingResult], k: usize) -> (f64, f64) {
    let n = ranks.len().max(1) as f64;
    let hr = ranks.iter().map(|r| hr_at_k(r.rank, k)).sum::<f64>() / n;
    let ndcg = ranks.iter().map(|r| ndcg_at_k(r.rank, k)).sum::<f64>() / n;
    (hr, ndcg)
}

pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    view: &SplitView,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let start = Instant::now();
    let ranks = rank_users(scorer, dataset, view, split, opts)?;
    let (hr, ndcg) = summarize(&ranks, opts.k);
    Ok(MetricsReport {
        run_id: String::new(),
        domain: dataset.domain_name.clone(),
        split,
        k: opts.k,
        hr,
        ndcg,
        n_users: ranks.len(),
        config_hash: String::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// HR@K / NDCG@K against `n_negatives` uniformly sampled non-target items
/// instead of the full catalog. Shipped only to show how sampling inflates
/// metrics.
pub fn evaluate_sampled(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    view: &SplitView,
    split: Split,
    k: usize,
    n_negatives: usize,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    let held = view.held_out(split);
    if held.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let n_items = dataset.num_items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = Vec::with_capacity(held.len());
    for block in held.chunks(USER_BLOCK) {
        let users: Vec<usize> = block.iter().map(|h| h.user).collect();
        let contexts: Vec<Vec<usize>> = block.iter().map(|h| h.context.clone()).collect();
        let scores = scorer.score(dataset, &users, &contexts)?;
        for (r, h) in block.iter().enumerate() {
            let row = scores.row(r);
            let mut cands = vec![h.target];
            let want = n_negatives.min(n_items - 1);
            while cands.len() < want + 1 {
                let c = rng.gen_range(0..n_items);
                if !cands.contains(&c) {
                    cands.push(c);
                }
            }
            cands.sort_unstable();
            let sub: Vec<f64> = cands.iter().map(|&c| row[c]).collect();
            let t = cands.iter().position(|&c| c == h.target).unwrap();
            ranks.push(RankingResult { user_id: String::new(), target: h.target, rank: rank_full(&sub, t) });
        }
    }
    Ok(summarize(&ranks, k))
}

/// Relative change `(b − a) / a` of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub relative: f64,
}

impl Improvement {
    pub fn percent(&self) -> String {
        format!("{:+.2}%", self.relative * 100.0)
    }
}

pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<Improvement>, EvalError> {
    if a.domain != b.domain {
        return Err(EvalError::MismatchedReports("domain".into()));
    }
    if a.split != b.split {
        return Err(EvalError::MismatchedReports("split".into()));
    }
    if a.k != b.k {
        return Err(EvalError::MismatchedReports("K".into()));
    }
    [("HR", a.hr, b.hr), ("NDCG", a.ndcg, b.ndcg)]
        .into_iter()
        .map(|(m, x, y)| {
            let metric = format!("{m}@{}", a.k);
            if x == 0.0 {
                return Err(EvalError::ZeroBaseline { metric });
            }
            Ok(Improvement { metric, baseline: x, candidate: y, relative: (y - x) / x })
        })
        .collect()
}

/// Markdown table of a comparison.
pub fn comparison_table(a: &MetricsReport, b: &MetricsReport, rows: &[Improvement]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| metric | {} | {} | improvement |", a.run_id, b.run_id);
    let _ = writeln!(s, "|---|---|---|---|");
    for r in rows {
        let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} |", r.metric, r.baseline, r.candidate, r.percent());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_one_out_split, Catalog, CatalogSchema, InteractionSequence, Item, Modality};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn count_rank(scores: &[f64], t: usize) -> usize {
        let higher = scores.iter().filter(|&&s| s > scores[t]).count();
        let tied_before = (0..t).filter(|&j| scores[j] == scores[t]).count();
        higher + tied_before + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_full(&[0.1, 0.9, 0.3], 1), 1);
        assert_eq!(rank_full(&[0.5; 6], 4), 5);
    }

    #[test]
    fn hr_and_ndcg_examples() {
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(12, 10), 0.0);
    }

    #[test]
    fn two_user_summary() {
        let ranks = vec![
            RankingResult { user_id: "a".into(), target: 0, rank: 1 },
            RankingResult { user_id: "b".into(), target: 0, rank: 3 },
        ];
        assert_eq!(summarize(&ranks, 10), (1.0, 0.75));
    }

    fn report(hr: f64, ndcg: f64) -> MetricsReport {
        MetricsReport {
            run_id: "r".into(),
            domain: "mixed".into(),
            split: Split::Test,
            k: 10,
            hr,
            ndcg,
            n_users: 1,
            config_hash: "h".into(),
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn compare_examples() {
        let rows = compare(&report(0.0428, 0.02), &report(0.0485, 0.02)).unwrap();
        assert_eq!(rows[0].percent(), "+13.32%");
        assert_eq!(rows[1].percent(), "+0.00%");
        assert!(matches!(compare(&report(0.0, 0.1), &report(0.1, 0.1)), Err(EvalError::ZeroBaseline { .. })));
        let mut other = report(0.1, 0.1);
        other.k = 5;
        assert!(matches!(compare(&report(0.1, 0.1), &other), Err(EvalError::MismatchedReports(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = vec![report(0.25, 0.125), report(0.5, 0.375)];
        MetricsReport::write_csv(&r, &p).unwrap();
        let back = MetricsReport::read_csv(&p).unwrap();
        assert_eq!(back, r);
    }

    struct Fixed(Tensor);

    impl Scorer for Fixed {
        fn score(&self, _: &Dataset, users: &[usize], _: &[Vec<usize>]) -> Result<Tensor, EvalError> {
            let rows: Vec<f64> = users.iter().flat_map(|&u| self.0.row(u).to_vec()).collect();
            Ok(Tensor::from_vec(users.len(), self.0.cols, rows))
        }
    }

    fn dataset(n_users: usize, n_items: usize, seed: u64) -> Dataset {
        let mut cat = Catalog::new(CatalogSchema::default());
        for i in 0..n_items {
            cat.insert(Item { item_id: format!("i{i}"), modality: Modality::Id, text_tokens: None, image: None, features: BTreeMap::new() })
                .unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = (0..n_users)
            .map(|u| InteractionSequence {
                user_id: format!("u{u}"),
                items: (0..5).map(|_| rng.gen_range(0..n_items)).collect(),
                features: BTreeMap::new(),
            })
            .collect();
        Dataset::new(Arc::new(cat), users, "d", 50).unwrap()
    }

    #[test]
    fn random_scores_hit_the_binomial_band() {
        let (n_users, n_items) = (600, 100);
        let ds = dataset(n_users, n_items, 1);
        let view = leave_one_out_split(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores = Tensor::from_vec(n_users, n_items, (0..n_users * n_items).map(|_| rng.gen::<f64>()).collect());
        let r = evaluate(&Fixed(scores), &ds, &view, Split::Test, &EvalOptions::new(10)).unwrap();
        let p = 0.1;
        let sigma = (p * (1.0 - p) / n_users as f64).sqrt();
        assert!((r.hr - p).abs() < 3.0 * sigma, "hr {}", r.hr);
    }

    #[test]
    fn sampled_metrics_overstate_full_ranking() {
        let (n_users, n_items) = (300, 400);
        let ds = dataset(n_users, n_items, 3);
        let view = leave_one_out_split(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores = Tensor::from_vec(n_users, n_items, (0..n_users * n_items).map(|_| rng.gen::<f64>()).collect());
        let s = Fixed(scores);
        let full = evaluate(&s, &ds, &view, Split::Test, &EvalOptions::new(10)).unwrap();
        let (hr_s, _) = evaluate_sampled(&s, &ds, &view, Split::Test, 10, 99, 5).unwrap();
        assert!(hr_s >= full.hr);
    }

    #[test]
    fn history_masking_only_lifts_ranks() {
        let ds = dataset(50, 30, 6);
        let view = leave_one_out_split(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Fixed(Tensor::from_vec(50, 30, (0..1500).map(|_| rng.gen::<f64>()).collect()));
        let plain = rank_users(&s, &ds, &view, Split::Test, &EvalOptions::new(10)).unwrap();
        let masked = rank_users(&s, &ds, &view, Split::Test, &EvalOptions { k: 10, mask_history: true }).unwrap();
        assert!(plain.iter().zip(&masked).all(|(p, m)| m.rank <= p.rank));
    }

    proptest! {
        #[test]
        fn rank_matches_counting_oracle(scores in proptest::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -1.0f64..1.0], 50), t in 0usize..50) {
            prop_assert_eq!(rank_full(&scores, t), count_rank(&scores, t));
        }

        #[test]
        fn metrics_bounded_and_monotone(rank in 1usize..300, k in 1usize..100) {
            let (h, n) = (hr_at_k(rank, k), ndcg_at_k(rank, k));
            prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&n));
            prop_assert!(n <= h);
            prop_assert!(hr_at_k(rank, k + 1) >= h);
            prop_assert!(ndcg_at_k(rank, k + 1) >= n);
        }

        #[test]
        fn shifting_scores_keeps_ranks(scores in proptest::collection::vec(-10.0f64..10.0, 1..60), c in 0.0f64..5.0, t in 0usize..60) {
            let t = t % scores.len();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            prop_assert_eq!(rank_full(&scores, t), rank_full(&shifted, t));
        }
    }
}
