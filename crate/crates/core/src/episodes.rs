// SPDX-License-Identifier: Apache-2.0

//! N-way K-shot task construction.
//!
//! Support sets are stored class-major: `support[k * K + j]` is shot `j` of
//! episode class `k`, and shot `j` is encoded with prompt block `j`.
//! Sample references are bank row indices.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embank::{ClassId, EmbeddingBank, Partition, Split};
use crate::error::{Result, SgvaError};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Training tasks over base classes, disjoint support and query.
    MetaTrainBase,
    /// Validation tasks over held-out novel classes.
    MetaValNovel,
    /// Test tasks over novel classes.
    MetaTestNovel,
    /// Query set is the support set (training without base classes).
    SelfSupport,
    /// Every class at once; see [`all_class_split`].
    AllClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episode_count: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::MetaTestNovel,
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            episode_count: 600,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(SgvaError::Config("n_way and k_shot must be positive".into()));
        }
        if self.episode_count == 0 {
            return Err(SgvaError::Config("episode_count must be at least 1".into()));
        }
        if self.queries_per_class == 0 && self.mode != SamplingMode::SelfSupport {
            return Err(SgvaError::Config("queries_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// One N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Episode-local label `k` refers to `class_ids[k]`.
    pub class_ids: Vec<ClassId>,
    /// Class-major support rows, `n_way * k_shot` long.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Episode-local label of each query.
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_of(&self, class: usize) -> &[usize] {
        &self.support[class * self.k_shot..(class + 1) * self.k_shot]
    }

    pub fn support_label(&self, i: usize) -> usize {
        i / self.k_shot
    }

    pub fn shot_index(&self, i: usize) -> usize {
        i % self.k_shot
    }

    /// A copy whose query set is the support set itself.
    pub fn self_supported(&self) -> Episode {
        Episode {
            query: self.support.clone(),
            query_labels: (0..self.support.len()).map(|i| self.support_label(i)).collect(),
            ..self.clone()
        }
    }

    pub fn check(&self, bank: &EmbeddingBank) -> Result<()> {
        if self.class_ids.len() != self.n_way || self.support.len() != self.n_way * self.k_shot {
            return Err(SgvaError::Contract("episode roster and support size disagree".into()));
        }
        if self.query.len() != self.query_labels.len() {
            return Err(SgvaError::Contract("query labels missing".into()));
        }
        let owner = |row: usize| bank.samples().get(row).map(|s| s.class_id);
        for (i, &row) in self.support.iter().enumerate() {
            if owner(row) != Some(self.class_ids[self.support_label(i)]) {
                return Err(SgvaError::Contract(format!("support row {row} is not of its class")));
            }
        }
        for (&row, &label) in self.query.iter().zip(&self.query_labels) {
            if label >= self.n_way || owner(row) != Some(self.class_ids[label]) {
                return Err(SgvaError::Contract(format!("query row {row} is mislabelled")));
            }
        }
        Ok(())
    }
}

fn split_for(mode: SamplingMode) -> Option<Split> {
    match mode {
        SamplingMode::MetaTrainBase => Some(Split::Base),
        SamplingMode::MetaValNovel => Some(Split::NovelVal),
        SamplingMode::MetaTestNovel | SamplingMode::SelfSupport => Some(Split::NovelTest),
        SamplingMode::AllClass => None,
    }
}

/// Classes a mode draws from: the mode's split when the bank declares one,
/// otherwise every class.
pub fn candidate_classes(bank: &EmbeddingBank, mode: SamplingMode) -> Vec<ClassId> {
    match split_for(mode) {
        Some(split) if bank.has_split() => bank.classes_in(split),
        _ => bank.classes().iter().map(|c| c.id).collect(),
    }
}

pub fn sample_episode<R: Rng + ?Sized>(bank: &EmbeddingBank, cfg: &SamplingConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    if cfg.mode == SamplingMode::AllClass {
        return Err(SgvaError::Config("all_class mode uses all_class_split, not sample_episode".into()));
    }
    let self_support = cfg.mode == SamplingMode::SelfSupport;
    let per_class = cfg.k_shot + if self_support { 0 } else { cfg.queries_per_class };
    let by_class = bank.samples_by_class();
    let eligible: Vec<ClassId> = candidate_classes(bank, cfg.mode)
        .into_iter()
        .filter(|c| by_class.get(c).map_or(0, Vec::len) >= per_class)
        .collect();
    if eligible.len() < cfg.n_way {
        return Err(SgvaError::Sampling(format!(
            "{:?} needs {} classes with >= {} samples each, found {}",
            cfg.mode,
            cfg.n_way,
            per_class,
            eligible.len()
        )));
    }
    let class_ids: Vec<ClassId> = eligible.choose_multiple(rng, cfg.n_way).copied().collect();

    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::new();
    let mut query_labels = Vec::new();
    for (label, class) in class_ids.iter().enumerate() {
        let mut rows = by_class[class].clone();
        let (picked, _) = rows.partial_shuffle(rng, per_class);
        support.extend_from_slice(&picked[..cfg.k_shot]);
        if !self_support {
            query.extend_from_slice(&picked[cfg.k_shot..]);
            query_labels.extend(std::iter::repeat_n(label, cfg.queries_per_class));
        }
    }
    let episode = Episode {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        class_ids,
        support,
        query,
        query_labels,
    };
    Ok(if self_support { episode.self_supported() } else { episode })
}

/// Episode `index` of a reproducible sequence keyed by `cfg.seed`.
pub fn nth_episode(bank: &EmbeddingBank, cfg: &SamplingConfig, purpose: Purpose, index: u64) -> Result<Episode> {
    let mut rng = rng::stream(cfg.seed, purpose, index);
    sample_episode(bank, cfg, &mut rng)
}

/// Support and test rows for the all-class protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllClassSplit {
    pub shots: usize,
    pub class_ids: Vec<ClassId>,
    /// Class-major, `shots` rows per class.
    pub support: Vec<usize>,
    pub test: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl AllClassSplit {
    /// One task over every class with the full test partition as queries.
    pub fn test_episode(&self) -> Episode {
        Episode {
            n_way: self.class_ids.len(),
            k_shot: self.shots,
            class_ids: self.class_ids.clone(),
            support: self.support.clone(),
            query: self.test.clone(),
            query_labels: self.test_labels.clone(),
        }
    }

    /// The labelled pool as a self-supported training task.
    pub fn train_episode(&self) -> Episode {
        self.test_episode().self_supported()
    }
}

pub fn all_class_split(bank: &EmbeddingBank, shots: usize, seed: u64) -> Result<AllClassSplit> {
    if shots == 0 {
        return Err(SgvaError::Config("shots must be positive".into()));
    }
    if !bank.has_partition() {
        return Err(SgvaError::Sampling("bank declares no test partition".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Split, shots as u64);
    let class_ids: Vec<ClassId> = bank.classes().iter().map(|c| c.id).collect();
    let mut train: Vec<Vec<usize>> = vec![Vec::new(); class_ids.len()];
    let mut test = Vec::new();
    let mut test_labels = Vec::new();
    for (row, s) in bank.samples().iter().enumerate() {
        let pos = bank.class_position(s.class_id)?;
        if s.partition == Some(Partition::Test) {
            test.push(row);
            test_labels.push(pos);
        } else {
            train[pos].push(row);
        }
    }
    let mut support = Vec::with_capacity(shots * class_ids.len());
    for (pos, rows) in train.iter_mut().enumerate() {
        if rows.len() < shots {
            return Err(SgvaError::Sampling(format!(
                "class {} has {} train samples, {} shots requested",
                class_ids[pos],
                rows.len(),
                shots
            )));
        }
        let (picked, _) = rows.partial_shuffle(&mut rng, shots);
        support.extend_from_slice(picked);
    }
    Ok(AllClassSplit {
        shots,
        class_ids,
        support,
        test,
        test_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embank::{generate_synthetic_bank, SyntheticBankSpec};
    use std::collections::HashSet;

    fn bank() -> EmbeddingBank {
        generate_synthetic_bank(&SyntheticBankSpec {
            n_classes: 20,
            samples_per_class: 20,
            ..SyntheticBankSpec::small()
        })
        .unwrap()
    }

    fn cfg(mode: SamplingMode, n: usize, k: usize, q: usize) -> SamplingConfig {
        SamplingConfig {
            mode,
            n_way: n,
            k_shot: k,
            queries_per_class: q,
            episode_count: 1,
            seed: 3,
        }
    }

    #[test]
    fn five_way_one_shot_standard() {
        let b = bank();
        let ep = nth_episode(&b, &cfg(SamplingMode::MetaTrainBase, 5, 1, 15), Purpose::TrainEpisodes, 0).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let s: HashSet<_> = ep.support.iter().collect();
        assert!(ep.query.iter().all(|q| !s.contains(q)));
        ep.check(&b).unwrap();
        let base: HashSet<_> = b.classes_in(Split::Base).into_iter().collect();
        assert!(ep.class_ids.iter().all(|c| base.contains(c)));
    }

    #[test]
    fn self_support_query_equals_support() {
        let b = bank();
        let ep = nth_episode(&b, &cfg(SamplingMode::SelfSupport, 4, 2, 0), Purpose::TrainEpisodes, 0).unwrap();
        assert_eq!(ep.support.len(), 8);
        assert_eq!(ep.query, ep.support);
        ep.check(&b).unwrap();
    }

    #[test]
    fn deterministic_per_stream() {
        let b = bank();
        let c = cfg(SamplingMode::MetaTestNovel, 4, 2, 3);
        let a = nth_episode(&b, &c, Purpose::EvalEpisodes, 9).unwrap();
        assert_eq!(a, nth_episode(&b, &c, Purpose::EvalEpisodes, 9).unwrap());
    }

    #[test]
    fn too_few_classes_is_sampling_error() {
        let b = bank();
        // 20 classes at 0.2 test fraction leaves 4 novel test classes.
        let err = nth_episode(&b, &cfg(SamplingMode::MetaTestNovel, 5, 1, 1), Purpose::EvalEpisodes, 0).unwrap_err();
        assert!(matches!(err, SgvaError::Sampling(_)));
        let err = nth_episode(&b, &cfg(SamplingMode::MetaTrainBase, 5, 10, 11), Purpose::EvalEpisodes, 0).unwrap_err();
        assert!(matches!(err, SgvaError::Sampling(_)));
    }

    #[test]
    fn all_class_split_counts_and_errors() {
        let b = generate_synthetic_bank(&SyntheticBankSpec {
            n_classes: 10,
            samples_per_class: 100,
            test_fraction: 0.5,
            ..SyntheticBankSpec::small()
        })
        .unwrap();
        let split = all_class_split(&b, 16, 1).unwrap();
        assert_eq!(split.support.len(), 160);
        assert_eq!(split.test.len(), 500);
        assert_eq!(split, all_class_split(&b, 16, 1).unwrap());
        let test: HashSet<_> = split.test.iter().collect();
        assert!(split.support.iter().all(|s| !test.contains(s)));
        split.test_episode().check(&b).unwrap();
        assert!(matches!(all_class_split(&b, 51, 1), Err(SgvaError::Sampling(_))));
    }
}
