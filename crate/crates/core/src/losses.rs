// SPDX-License-Identifier: Apache-2.0

//! Training losses and their gradients.
//!
//! All similarities are dot products of unit vectors. Logits are
//! similarities divided by `tau1`; distillation further softens both sides
//! by `tau2`. Every softmax goes through log-sum-exp.
//!
//! Gradient routing:
//! - cross-modal contrastive: into the text prototypes only (`x_c_v` is frozen);
//! - vision contrastive: into `x_a` and the vision prototypes;
//! - implicit KD: into the proxy `x_c_a` only (teacher and text prototypes stopped);
//! - direct KD: into `x_a` and the vision prototypes (teacher stopped).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgvaError};
use crate::linalg::{self, dot};
use crate::optim::ParamGrads;

pub const DEFAULT_TAU2: f64 = 5.0;
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdVariant {
    Implicit,
    Direct,
}

/// Which loss terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossFlags {
    pub i2t: bool,
    pub i2i: bool,
    pub kd: bool,
    pub kd_variant: KdVariant,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            i2t: true,
            i2i: true,
            kd: true,
            kd_variant: KdVariant::Implicit,
        }
    }
}

impl LossFlags {
    /// Whether any enabled term sends gradient into the adapter.
    pub fn reaches_adapter(&self) -> bool {
        self.i2i || self.kd
    }

    /// Whether any enabled term sends gradient into the prompts.
    pub fn reaches_prompts(&self) -> bool {
        self.i2t
    }
}

/// Query-averaged loss terms and the gradient of their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_i2t: f64,
    pub l_i2i: f64,
    pub l_kd: f64,
    pub total: f64,
    pub grads: ParamGrads,
}

/// Sum of the enabled terms; disabled terms contribute nothing.
pub fn total_loss(l_i2t: f64, l_i2i: f64, l_kd: f64, flags: &LossFlags) -> f64 {
    let mut total = 0.0;
    if flags.i2t {
        total += l_i2t;
    }
    if flags.i2i {
        total += l_i2i;
    }
    if flags.kd {
        total += l_kd;
    }
    total
}

fn require_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = linalg::norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(SgvaError::Contract(format!("{name} must be unit norm, has norm {n}")));
    }
    Ok(())
}

fn require_units(name: &str, vs: &[Vec<f64>]) -> Result<()> {
    vs.iter().try_for_each(|v| require_unit(name, v))
}

fn require_temperature(name: &str, t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(SgvaError::Contract(format!("{name} must be positive, got {t}")));
    }
    Ok(())
}

fn scaled_logits(x: &[f64], prototypes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    prototypes.iter().map(|p| dot(x, p) / tau).collect()
}

/// `-log softmax(logits)[positive]` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], positive: usize) -> Result<(f64, Vec<f64>)> {
    if positive >= logits.len() {
        return Err(SgvaError::Contract(format!("positive index {positive} out of {}", logits.len())));
    }
    let log_p = linalg::log_softmax(logits);
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[positive] -= 1.0;
    Ok((-log_p[positive], grad))
}

/// Cross-entropy of `softmax(student / tau2)` under `softmax(teacher / tau2)`,
/// the teacher's entropy, and the gradient w.r.t. the student logits.
pub fn softened_cross_entropy(student: &[f64], teacher: &[f64], tau2: f64) -> (f64, f64, Vec<f64>) {
    let t_log: Vec<f64> = linalg::log_softmax(&teacher.iter().map(|d| d / tau2).collect::<Vec<_>>());
    let s_log: Vec<f64> = linalg::log_softmax(&student.iter().map(|d| d / tau2).collect::<Vec<_>>());
    let mut ce = 0.0;
    let mut entropy = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (tl, sl) in t_log.iter().zip(&s_log) {
        let t = tl.exp();
        if t > 0.0 {
            ce -= t * sl;
            entropy -= t * tl;
        }
        grad.push((sl.exp() - t) / tau2);
    }
    (ce, entropy, grad)
}

/// Vision-side gradients: w.r.t. the raw (unnormalized) query feature and
/// each unit prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionGrads {
    pub loss: f64,
    pub grad_x: Vec<f64>,
    pub grad_prototypes: Vec<Vec<f64>>,
}

/// Text-prototype gradients of the cross-modal contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalGrads {
    pub loss: f64,
    pub grad_prototypes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitKdGrads {
    pub loss: f64,
    /// Entropy of the softened teacher distribution (the loss's lower bound).
    pub teacher_entropy: f64,
    pub grad_student_logits: Vec<f64>,
    /// Gradient w.r.t. the unit proxy `x_c_a`.
    pub grad_proxy: Vec<f64>,
}

/// Image-to-text contrastive loss of one query against text prototypes.
pub fn cross_modal_contrastive(
    x_c_v: &[f64],
    prototypes: &[Vec<f64>],
    positive: usize,
    tau1: f64,
) -> Result<CrossModalGrads> {
    require_temperature("tau1", tau1)?;
    require_unit("x_c_v", x_c_v)?;
    require_units("p_c_t", prototypes)?;
    let (loss, g) = softmax_cross_entropy(&scaled_logits(x_c_v, prototypes, tau1), positive)?;
    let grad_prototypes = g.iter().map(|gk| x_c_v.iter().map(|x| gk * x / tau1).collect()).collect();
    Ok(CrossModalGrads { loss, grad_prototypes })
}

fn unit_query(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    linalg::normalize(x).ok_or_else(|| SgvaError::DegenerateFeature("query feature has zero norm".into()))
}

/// Routes gradients of `logits_k = <x̂, p_k>/tau` back to `x` (raw) and `p_k`.
fn vision_backward(unit: &[f64], norm: f64, prototypes: &[Vec<f64>], g: &[f64], tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut grad_unit = vec![0.0; unit.len()];
    for (gk, p) in g.iter().zip(prototypes) {
        linalg::axpy(gk / tau, p, &mut grad_unit);
    }
    let grad_x = linalg::normalize_backward(unit, norm, &grad_unit);
    let grad_prototypes = g.iter().map(|gk| unit.iter().map(|u| gk * u / tau).collect()).collect();
    (grad_x, grad_prototypes)
}

/// Image-to-image contrastive loss of one adapted query against vision
/// prototypes; the query is normalized internally.
pub fn vision_contrastive(x_a: &[f64], prototypes: &[Vec<f64>], positive: usize, tau1: f64) -> Result<VisionGrads> {
    require_temperature("tau1", tau1)?;
    require_units("p_a", prototypes)?;
    let (unit, norm) = unit_query(x_a)?;
    let (loss, g) = softmax_cross_entropy(&scaled_logits(&unit, prototypes, tau1), positive)?;
    let (grad_x, grad_prototypes) = vision_backward(&unit, norm, prototypes, &g, tau1);
    Ok(VisionGrads {
        loss,
        grad_x,
        grad_prototypes,
    })
}

/// Distillation inside the cross-modal space: the frozen visual embedding's
/// relation to the text prototypes teaches the adapted proxy's relation.
pub fn implicit_kd(x_c_v: &[f64], x_c_a: &[f64], prototypes: &[Vec<f64>], tau1: f64, tau2: f64) -> Result<ImplicitKdGrads> {
    require_temperature("tau1", tau1)?;
    require_temperature("tau2", tau2)?;
    require_unit("x_c_v", x_c_v)?;
    require_unit("x_c_a", x_c_a)?;
    require_units("p_c_t", prototypes)?;
    let teacher = scaled_logits(x_c_v, prototypes, tau1);
    let student = scaled_logits(x_c_a, prototypes, tau1);
    let (loss, teacher_entropy, g) = softened_cross_entropy(&student, &teacher, tau2);
    let mut grad_proxy = vec![0.0; x_c_a.len()];
    for (gk, p) in g.iter().zip(prototypes) {
        linalg::axpy(gk / tau1, p, &mut grad_proxy);
    }
    Ok(ImplicitKdGrads {
        loss,
        teacher_entropy,
        grad_student_logits: g,
        grad_proxy,
    })
}

/// Baseline distillation: KL from cross-modal relations (teacher) to
/// vision-space relations (student).
pub fn direct_kd(
    x_c_v: &[f64],
    text_prototypes: &[Vec<f64>],
    x_a: &[f64],
    vision_prototypes: &[Vec<f64>],
    tau1: f64,
    tau2: f64,
) -> Result<VisionGrads> {
    require_temperature("tau1", tau1)?;
    require_temperature("tau2", tau2)?;
    require_unit("x_c_v", x_c_v)?;
    require_units("p_c_t", text_prototypes)?;
    require_units("p_a", vision_prototypes)?;
    if text_prototypes.len() != vision_prototypes.len() {
        return Err(SgvaError::Contract("prototype counts differ between spaces".into()));
    }
    let (unit, norm) = unit_query(x_a)?;
    let teacher = scaled_logits(x_c_v, text_prototypes, tau1);
    let student = scaled_logits(&unit, vision_prototypes, tau1);
    let (ce, entropy, g) = softened_cross_entropy(&student, &teacher, tau2);
    let (grad_x, grad_prototypes) = vision_backward(&unit, norm, vision_prototypes, &g, tau1);
    Ok(VisionGrads {
        loss: (ce - entropy).max(0.0),
        grad_x,
        grad_prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        linalg::normalize(&v).unwrap().0
    }

    /// Naive softmax cross-entropy without max-shifting.
    fn naive_ce(logits: &[f64], positive: usize) -> f64 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[positive].exp() / z).ln()
    }

    fn naive_softmax(logits: &[f64]) -> Vec<f64> {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    #[test]
    fn uniform_similarities_give_log_n() {
        let x = vec![1.0, 0.0, 0.0];
        let p = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, -1.0]];
        let out = cross_modal_contrastive(&x, &p, 2, 0.07).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        let out = vision_contrastive(&[3.0, 0.0, 0.0], &p, 1, 0.07).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sharper_positive_lowers_loss() {
        let (strong, _) = softmax_cross_entropy(&[10.0, 0.0, 0.0], 0).unwrap();
        let (weak, _) = softmax_cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap();
        assert!(strong < weak);
    }

    #[test]
    fn three_way_matches_naive_oracle() {
        // sims [0.9, 0.1, -0.2] realized as unit vectors in R^2 pairs.
        let sims = [0.9f64, 0.1, -0.2];
        let x = vec![1.0, 0.0];
        let p: Vec<Vec<f64>> = sims.iter().map(|s| vec![*s, (1.0 - s * s).sqrt()]).collect();
        let out = cross_modal_contrastive(&x, &p, 0, 0.07).unwrap();
        let logits: Vec<f64> = sims.iter().map(|s| s / 0.07).collect();
        assert!((out.loss - naive_ce(&logits, 0)).abs() < 1e-12);
    }

    #[test]
    fn non_unit_inputs_are_contract_errors() {
        let p = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert!(matches!(cross_modal_contrastive(&[1.0, 0.0], &p, 0, 0.07), Err(SgvaError::Contract(_))));
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(cross_modal_contrastive(&[2.0, 0.0], &p, 0, 0.07), Err(SgvaError::Contract(_))));
        assert!(matches!(implicit_kd(&[1.0, 0.0], &[0.5, 0.0], &p, 0.07, 5.0), Err(SgvaError::Contract(_))));
        assert!(matches!(vision_contrastive(&[0.0, 0.0], &p, 0, 0.07), Err(SgvaError::DegenerateFeature(_))));
    }

    #[test]
    fn implicit_kd_at_teacher_equals_entropy_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = unit(&mut rng, 6);
        let p: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 6)).collect();
        let out = implicit_kd(&x, &x, &p, 0.07, 5.0).unwrap();
        assert!((out.loss - out.teacher_entropy).abs() < 1e-12);
        assert!(out.grad_student_logits.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn implicit_kd_large_tau2_tends_to_log_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = unit(&mut rng, 6);
        let y = unit(&mut rng, 6);
        let p: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let out = implicit_kd(&x, &y, &p, 0.07, 1e9).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn implicit_kd_matches_softened_ce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = unit(&mut rng, 5);
        let y = unit(&mut rng, 5);
        let p: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
        let (tau1, tau2) = (0.07, 5.0);
        let out = implicit_kd(&x, &y, &p, tau1, tau2).unwrap();
        let t = naive_softmax(&p.iter().map(|pk| dot(&x, pk) / tau1 / tau2).collect::<Vec<_>>());
        let s = naive_softmax(&p.iter().map(|pk| dot(&y, pk) / tau1 / tau2).collect::<Vec<_>>());
        let oracle: f64 = -t.iter().zip(&s).map(|(a, b)| a * b.ln()).sum::<f64>();
        assert!((out.loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn direct_kd_is_nonnegative_and_zero_when_matched() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
        let x = unit(&mut rng, 5);
        let matched = direct_kd(&x, &p, &x, &p, 0.07, 5.0).unwrap();
        assert!(matched.loss.abs() < 1e-12);
        assert!(matched.grad_x.iter().all(|g| g.abs() < 1e-12));
        for _ in 0..20 {
            let xa: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let pa: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
            assert!(direct_kd(&x, &p, &xa, &pa, 0.07, 5.0).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn direct_kd_matches_kl_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pt: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
        let pa: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 7)).collect();
        let x = unit(&mut rng, 5);
        let xa: Vec<f64> = (0..7).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xa_n = linalg::normalize(&xa).unwrap().0;
        let out = direct_kd(&x, &pt, &xa, &pa, 0.07, 5.0).unwrap();
        let t = naive_softmax(&pt.iter().map(|p| dot(&x, p) / 0.35).collect::<Vec<_>>());
        let s = naive_softmax(&pa.iter().map(|p| dot(&xa_n, p) / 0.35).collect::<Vec<_>>());
        let kl: f64 = t.iter().zip(&s).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((out.loss - kl).abs() < 1e-12);
    }

    #[test]
    fn logits_up_to_1e4_stay_finite() {
        let (l, g) = softmax_cross_entropy(&[1e4, -1e4, 0.0], 1).unwrap();
        assert!(l.is_finite() && g.iter().all(|x| x.is_finite()));
        let (ce, h, g) = softened_cross_entropy(&[1e4, -1e4], &[-1e4, 1e4], 1.0);
        assert!(ce.is_finite() && h.is_finite() && g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let all = LossFlags::default();
        assert_eq!(total_loss(0.5, 0.25, 0.125, &all), 0.875);
        let no_kd = LossFlags { kd: false, ..all };
        assert_eq!(total_loss(0.5, 0.25, 0.125, &no_kd), 0.75);
        let i2t_only = LossFlags { i2i: false, kd: false, ..all };
        assert_eq!(total_loss(0.5, 0.25, 0.125, &i2t_only), 0.5);
        assert!(!i2t_only.reaches_adapter());
    }

    #[test]
    fn vision_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pa: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
        let xa: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let out = vision_contrastive(&xa, &pa, 1, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut a = xa.clone();
            a[i] += h;
            let mut b = xa.clone();
            b[i] -= h;
            let fd = (vision_contrastive(&a, &pa, 1, 0.5).unwrap().loss - vision_contrastive(&b, &pa, 1, 0.5).unwrap().loss) / (2.0 * h);
            assert!((fd - out.grad_x[i]).abs() < 1e-8);
        }
    }
}
