// SPDX-License-Identifier: Apache-2.0

//! Prototype construction, similarity vectors and fused prediction.
//!
//! A query is described by `d = [d_a ‖ d_c_t]`: its cosine similarities to
//! the vision prototypes (adapted space) followed by its cosine similarities
//! to the cross-modal text prototypes. The fused Naive Bayes mode fits a
//! per-dimension Gaussian on the support set's own similarity vectors.

use serde::{Deserialize, Serialize};

use crate::embank::{ClassId, EmbeddingBank};
use crate::episodes::Episode;
use crate::error::{Result, SgvaError};
use crate::linalg;
use crate::model;
use crate::optim::SgvaParams;

/// Variance floor for the pooled Naive Bayes fit.
pub const NB_VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    FusedNb,
    FusedLogsum,
    VisionOnly,
    CrossModalOnly,
}

impl PredictMode {
    pub const ALL: [PredictMode; 4] = [
        PredictMode::FusedNb,
        PredictMode::FusedLogsum,
        PredictMode::VisionOnly,
        PredictMode::CrossModalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictMode::FusedNb => "fused_nb",
            PredictMode::FusedLogsum => "fused_logsum",
            PredictMode::VisionOnly => "vision_only",
            PredictMode::CrossModalOnly => "cross_modal_only",
        }
    }
}

impl std::str::FromStr for PredictMode {
    type Err = SgvaError;

    fn from_str(s: &str) -> Result<Self> {
        PredictMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SgvaError::Config(format!("unknown inference mode `{s}`")))
    }
}

/// Unit prototypes of one episode, in roster order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_ids: Vec<ClassId>,
    /// Cross-modal text prototypes `p_c_t`.
    pub text: Vec<Vec<f64>>,
    /// Vision prototypes `p_a`.
    pub vision: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }
}

pub fn build_prototypes(episode: &Episode, params: &SgvaParams, bank: &EmbeddingBank) -> Result<PrototypeSet> {
    let support = model::support_forward(params, bank, episode)?;
    Ok(PrototypeSet {
        class_ids: episode.class_ids.clone(),
        text: support.text_protos,
        vision: support.vision_protos,
    })
}

/// `[cos(x_a, p_a(k)) ‖ cos(x_c_v, p_c_t(k))]` for the sample with visual
/// feature `x_v`.
pub fn similarity_vector(x_v: &[f64], protos: &PrototypeSet, params: &SgvaParams, bank: &EmbeddingBank) -> Result<Vec<f64>> {
    let entry = model::vision_entry(params, x_v)?;
    let x_c_v = bank.cross_modal_visual(x_v)?;
    let mut d = Vec::with_capacity(2 * protos.n_way());
    d.extend(protos.vision.iter().map(|p| linalg::dot(&entry.unit, p)));
    d.extend(protos.text.iter().map(|p| linalg::dot(&x_c_v, p)));
    Ok(d)
}

/// Per-dimension Gaussian Naive Bayes over similarity vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    pub means: Vec<Vec<f64>>,
    /// Pooled within-class variance per dimension; all ones when every class
    /// has a single support vector.
    pub variances: Vec<f64>,
}

impl NaiveBayes {
    pub fn fit(vectors: &[Vec<f64>], labels: &[usize], n_way: usize) -> Result<Self> {
        if vectors.len() != labels.len() || vectors.is_empty() {
            return Err(SgvaError::Contract("support vectors and labels must be non-empty and aligned".into()));
        }
        let dim = vectors[0].len();
        let mut means = vec![vec![0.0; dim]; n_way];
        let mut counts = vec![0usize; n_way];
        for (v, &y) in vectors.iter().zip(labels) {
            if v.len() != dim {
                return Err(SgvaError::shape(dim, v.len()));
            }
            if y >= n_way {
                return Err(SgvaError::Contract(format!("label {y} outside {n_way}-way roster")));
            }
            linalg::axpy(1.0, v, &mut means[y]);
            counts[y] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(SgvaError::Contract(format!("class {k} has no support vectors")));
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|x| *x /= c as f64);
        }
        let dof = vectors.len() - n_way;
        let variances = if dof == 0 {
            vec![1.0; dim]
        } else {
            let mut ss = vec![0.0; dim];
            for (v, &y) in vectors.iter().zip(labels) {
                for ((s, x), m) in ss.iter_mut().zip(v).zip(&means[y]) {
                    *s += (x - m) * (x - m);
                }
            }
            ss.iter().map(|s| (s / dof as f64).max(NB_VARIANCE_FLOOR)).collect()
        };
        Ok(NaiveBayes { means, variances })
    }

    /// `Σ_j log N(d_j; μ_kj, σ²_j)` for every class `k`.
    pub fn log_likelihoods(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.variances.len() {
            return Err(SgvaError::shape(self.variances.len(), d.len()));
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(self
            .means
            .iter()
            .map(|mu| {
                d.iter()
                    .zip(mu)
                    .zip(&self.variances)
                    .map(|((x, m), var)| -0.5 * (ln_2pi + var.ln() + (x - m) * (x - m) / var))
                    .sum()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub d_a: Vec<f64>,
    pub d_c_t: Vec<f64>,
    pub d: Vec<f64>,
    pub class_scores: Vec<f64>,
    pub predicted: usize,
    pub mode: PredictMode,
}

/// Scores the similarity vector `d` (length `2N`) under `mode`. The fused
/// Naive Bayes mode requires a model fitted on the support vectors.
pub fn predict(d: &[f64], mode: PredictMode, nb: Option<&NaiveBayes>, tau1: f64) -> Result<Prediction> {
    if d.is_empty() || !d.len().is_multiple_of(2) {
        return Err(SgvaError::Contract(format!("similarity vector must have even length 2N, got {}", d.len())));
    }
    let n = d.len() / 2;
    let (d_a, d_c_t) = d.split_at(n);
    let class_scores = match mode {
        PredictMode::FusedNb => {
            let nb = nb.ok_or_else(|| SgvaError::Config("fused_nb needs support similarity vectors".into()))?;
            if nb.means.len() != n {
                return Err(SgvaError::Config(format!(
                    "Naive Bayes fitted for {} classes, query scored against {n}",
                    nb.means.len()
                )));
            }
            nb.log_likelihoods(d)?
        }
        PredictMode::FusedLogsum => {
            let scaled = |v: &[f64]| linalg::log_softmax(&v.iter().map(|x| x / tau1).collect::<Vec<_>>());
            scaled(d_a).iter().zip(scaled(d_c_t)).map(|(a, c)| a + c).collect()
        }
        PredictMode::VisionOnly => d_a.to_vec(),
        PredictMode::CrossModalOnly => d_c_t.to_vec(),
    };
    Ok(Prediction {
        d_a: d_a.to_vec(),
        d_c_t: d_c_t.to_vec(),
        d: d.to_vec(),
        predicted: linalg::argmax(&class_scores),
        class_scores,
        mode,
    })
}

/// One value per prediction mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeValues {
    pub fused_nb: f64,
    pub fused_logsum: f64,
    pub vision_only: f64,
    pub cross_modal_only: f64,
}

impl ModeValues {
    pub fn get(&self, mode: PredictMode) -> f64 {
        match mode {
            PredictMode::FusedNb => self.fused_nb,
            PredictMode::FusedLogsum => self.fused_logsum,
            PredictMode::VisionOnly => self.vision_only,
            PredictMode::CrossModalOnly => self.cross_modal_only,
        }
    }

    pub fn get_mut(&mut self, mode: PredictMode) -> &mut f64 {
        match mode {
            PredictMode::FusedNb => &mut self.fused_nb,
            PredictMode::FusedLogsum => &mut self.fused_logsum,
            PredictMode::VisionOnly => &mut self.vision_only,
            PredictMode::CrossModalOnly => &mut self.cross_modal_only,
        }
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode: u64,
    pub query: u64,
    pub d: Vec<f64>,
    pub scores: ModeScores,
    pub predicted: ModePicks,
    #[serde(rename = "true")]
    pub truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScores {
    pub fused_nb: Vec<f64>,
    pub fused_logsum: Vec<f64>,
    pub vision_only: Vec<f64>,
    pub cross_modal_only: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePicks {
    pub fused_nb: usize,
    pub fused_logsum: usize,
    pub vision_only: usize,
    pub cross_modal_only: usize,
}

/// Accuracy of every mode on one episode, plus optional per-query records.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEval {
    pub accuracy: ModeValues,
    pub records: Vec<PredictionRecord>,
}

/// Classifies every query of `episode` in all modes at once.
pub fn evaluate_episode(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    episode: &Episode,
    episode_index: u64,
    keep_records: bool,
) -> Result<EpisodeEval> {
    if episode.query.is_empty() {
        return Err(SgvaError::Contract("episode has no queries".into()));
    }
    let tau1 = bank.tau1();
    let protos = build_prototypes(episode, params, bank)?;
    let support_d = episode
        .support
        .iter()
        .map(|&row| similarity_vector(bank.feature(row), &protos, params, bank))
        .collect::<Result<Vec<_>>>()?;
    let support_labels: Vec<usize> = (0..episode.support.len()).map(|i| episode.support_label(i)).collect();
    let nb = NaiveBayes::fit(&support_d, &support_labels, episode.n_way)?;

    let mut correct = ModeValues::default();
    let mut records = Vec::new();
    for (&row, &label) in episode.query.iter().zip(&episode.query_labels) {
        let d = similarity_vector(bank.feature(row), &protos, params, bank)?;
        let preds = PredictMode::ALL
            .into_iter()
            .map(|m| predict(&d, m, Some(&nb), tau1))
            .collect::<Result<Vec<_>>>()?;
        for p in &preds {
            if p.predicted == label {
                *correct.get_mut(p.mode) += 1.0;
            }
        }
        if keep_records {
            let [nb_p, ls, vo, co] = <[Prediction; 4]>::try_from(preds).expect("four modes");
            records.push(PredictionRecord {
                episode: episode_index,
                query: bank.samples()[row].id,
                d,
                predicted: ModePicks {
                    fused_nb: nb_p.predicted,
                    fused_logsum: ls.predicted,
                    vision_only: vo.predicted,
                    cross_modal_only: co.predicted,
                },
                scores: ModeScores {
                    fused_nb: nb_p.class_scores,
                    fused_logsum: ls.class_scores,
                    vision_only: vo.class_scores,
                    cross_modal_only: co.class_scores,
                },
                truth: label,
            });
        }
    }
    let q = episode.query.len() as f64;
    for m in PredictMode::ALL {
        *correct.get_mut(m) /= q;
    }
    Ok(EpisodeEval { accuracy: correct, records })
}
