//! Leave-one-out splitting and whole-user subsampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, Dataset, MIN_SPLITTABLE_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One user's leave-one-out partition.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    /// Index into `Dataset::users`.
    pub user: usize,
    /// All but the last two interactions.
    pub train: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl UserSplit {
    pub fn valid_context(&self) -> &[usize] {
        &self.train
    }

    pub fn test_context(&self) -> Vec<usize> {
        let mut c = self.train.clone();
        c.push(self.valid_target);
        c
    }

    /// Original sequence: train, then the two held-out targets.
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut c = self.test_context();
        c.push(self.test_target);
        c
    }
}

/// A context/target pair drawn from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOut {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitView {
    pub users: Vec<UserSplit>,
}

impl SplitView {
    pub fn held_out(&self, split: Split) -> Vec<HeldOut> {
        self.users
            .iter()
            .map(|u| match split {
                Split::Valid => HeldOut { user: u.user, context: u.train.clone(), target: u.valid_target },
                Split::Test => HeldOut { user: u.user, context: u.test_context(), target: u.test_target },
            })
            .collect()
    }
}

/// Deterministic leave-one-out: last item is the test target, the one
/// before it the validation target.
pub fn leave_one_out_split(dataset: &Dataset) -> Result<SplitView, CorpusError> {
    let users = dataset
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let n = u.items.len();
            if n < MIN_SPLITTABLE_LEN {
                return Err(CorpusError::SequenceTooShort(u.user_id.clone()));
            }
            Ok(UserSplit { user: i, train: u.items[..n - 2].to_vec(), valid_target: u.items[n - 2], test_target: u.items[n - 1] })
        })
        .collect::<Result<_, _>>()?;
    Ok(SplitView { users })
}

/// Keeps `round(fraction · |users|)` whole users chosen by a seeded
/// permutation prefix, so a smaller fraction always selects a subset of a
/// larger one under the same seed. Selected users keep their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let n = dataset.users.len();
    let keep = (fraction * n as f64).round() as usize;
    if keep == 0 {
        return Err(CorpusError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(Dataset {
        catalog: dataset.catalog.clone(),
        users: chosen.into_iter().map(|i| dataset.users[i].clone()).collect(),
        domain_name: dataset.domain_name.clone(),
        max_seq_len: dataset.max_seq_len,
        dropped_users: 0,
    })
}
