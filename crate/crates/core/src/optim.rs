// SPDX-License-Identifier: Apache-2.0

//! Learnable state, SGD with momentum and weight decay, and the
//! finite-difference gradient audit.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, AdapterParams};
use crate::embank::EmbeddingBank;
use crate::episodes::Episode;
use crate::error::{Result, SgvaError};
use crate::losses::{KdVariant, LossFlags};
use crate::model;
use crate::rng::{self, Purpose};
use crate::textpath::PromptSet;

/// Everything that training may change.
///
/// `adapter: None` means the visual branch is the identity (`x_a = x_v`);
/// `prompts: None` means the bank's hand-crafted prompt is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgvaParams {
    pub adapter: Option<AdapterParams>,
    pub prompts: Option<PromptSet>,
    pub step_count: u64,
}

impl SgvaParams {
    /// Named views of every learnable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("W1", a.w1.as_slice()));
            out.push(("W2", a.w2.as_slice()));
            out.push(("Wa", &a.wa[..]));
        }
        if let Some(p) = &self.prompts {
            out.push(("prompts", p.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.adapter {
            out.push(("W1", a.w1.as_mut_slice()));
            out.push(("W2", a.w2.as_mut_slice()));
            out.push(("Wa", &mut a.wa[..]));
        }
        if let Some(p) = &mut self.prompts {
            out.push(("prompts", p.as_mut_slice()));
        }
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients (or momentum buffers) shaped like [`SgvaParams`]. A `None`
/// group is not updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub adapter: Option<AdapterGrads>,
    pub prompts: Option<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &SgvaParams) -> Self {
        ParamGrads {
            adapter: p.adapter.as_ref().map(AdapterGrads::zeros_like),
            prompts: p.prompts.as_ref().map(|p| vec![0.0; p.as_slice().len()]),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("W1", a.w1.as_slice()));
            out.push(("W2", a.w2.as_slice()));
            out.push(("Wa", &a.wa[..]));
        }
        if let Some(p) = &self.prompts {
            out.push(("prompts", p.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.adapter {
            out.push(("W1", a.w1.as_mut_slice()));
            out.push(("W2", a.w2.as_mut_slice()));
            out.push(("Wa", &mut a.wa[..]));
        }
        if let Some(p) = &mut self.prompts {
            out.push(("prompts", p.as_mut_slice()));
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Momentum buffers.
pub type Velocity = ParamGrads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SgvaError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SgvaError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(SgvaError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for step `t` of `total` steps.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine if total > 0 => {
                let frac = (t as f64 / total as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Cosine => self.lr,
        }
    }
}

/// One SGD update with the given learning rate:
/// `v ← momentum·v + (g + weight_decay·θ)`, `θ ← θ − lr·v`.
///
/// Groups whose gradient is `None` are left untouched (no decay either).
/// On non-finite gradients nothing is modified.
pub fn step(params: &mut SgvaParams, grads: &ParamGrads, cfg: &OptimConfig, lr: f64, velocity: &mut Velocity) -> Result<()> {
    if !grads.is_finite() {
        return Err(SgvaError::Numerics(format!(
            "non-finite gradient at step {}",
            params.step_count
        )));
    }
    let mut vel = velocity.tensors_mut();
    for (name, g) in grads.tensors() {
        let theta = params
            .tensor_mut(name)
            .ok_or_else(|| SgvaError::Contract(format!("gradient for absent parameter {name}")))?;
        let v = vel
            .iter_mut()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| &mut **v)
            .ok_or_else(|| SgvaError::Contract(format!("no velocity buffer for {name}")))?;
        if theta.len() != g.len() || v.len() != g.len() {
            return Err(SgvaError::shape(theta.len(), g.len()));
        }
        for ((t, gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *t);
            *t -= lr * *vi;
        }
    }
    params.step_count += 1;
    if !params.is_finite() {
        return Err(SgvaError::Numerics(format!("parameters diverged at step {}", params.step_count)));
    }
    Ok(())
}

/// Which objective the audit differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    I2t,
    I2i,
    KdImplicit,
    KdDirect,
    Total,
}

impl LossSelector {
    pub fn flags(self) -> LossFlags {
        let none = LossFlags {
            i2t: false,
            i2i: false,
            kd: false,
            kd_variant: KdVariant::Implicit,
        };
        match self {
            LossSelector::I2t => LossFlags { i2t: true, ..none },
            LossSelector::I2i => LossFlags { i2i: true, ..none },
            LossSelector::KdImplicit => LossFlags { kd: true, ..none },
            LossSelector::KdDirect => LossFlags {
                kd: true,
                kd_variant: KdVariant::Direct,
                ..none
            },
            LossSelector::Total => LossFlags::default(),
        }
    }

    pub const ALL: [LossSelector; 5] = [
        LossSelector::I2t,
        LossSelector::I2i,
        LossSelector::KdImplicit,
        LossSelector::KdDirect,
        LossSelector::Total,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorAudit {
    pub tensor: String,
    pub checked: usize,
    /// Coordinates skipped because the stencil crossed a ReLU kink.
    pub skipped_kinks: usize,
    /// `max |a − n|` over checked coordinates divided by the tensor's
    /// gradient scale `max(max |a|, max |n|, AUDIT_SCALE_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub selector: LossSelector,
    pub epsilon: f64,
    pub tensors: Vec<TensorAudit>,
    /// Digest of the bank's frozen tensors before and after the audit.
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

impl AuditReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Gradient scale below which a tensor is judged on absolute error.
pub const AUDIT_SCALE_FLOOR: f64 = 1e-4;

/// Compares analytic gradients with a fourth-order central difference
/// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h` on a seeded random
/// subset of coordinates of every learnable tensor.
///
/// Errors are relative to each tensor's gradient scale: coordinates whose
/// gradient is many orders below the tensor's largest entry would otherwise
/// be judged on `f64` roundoff alone. Stop-gradient inputs of the
/// distillation terms are held at their unperturbed values.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_audit(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    episode: &Episode,
    selector: LossSelector,
    tau2: f64,
    epsilon: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<AuditReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(SgvaError::Config(format!("epsilon must lie in [1e-6, 1e-4], got {epsilon}")));
    }
    let frozen_digest_before = bank.frozen_digest();
    let flags = selector.flags();
    let center = model::episode_loss_traced(params, bank, episode, &flags, tau2, None)?;
    let mut rng = rng::stream(seed, Purpose::Audit, 0);
    let mut tensors = Vec::new();
    let mut probe = params.clone();

    for (t_idx, (name, values)) in params.tensors().into_iter().enumerate() {
        let analytic = center
            .bundle
            .grads
            .tensor(name)
            .ok_or_else(|| SgvaError::Contract(format!("no analytic gradient for {name}")))?;
        let n = values.len();
        let picks = index::sample(&mut rng, n, coords_per_tensor.min(n)).into_vec();
        let mut audit = TensorAudit {
            tensor: name.to_string(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
            max_abs_numeric: 0.0,
        };
        for i in picks {
            let original = values[i];
            let mut eval = |offset: f64| -> Result<(f64, Vec<bool>)> {
                probe.tensors_mut()[t_idx].1[i] = original + offset;
                let t = model::episode_loss_traced(&probe, bank, episode, &flags, tau2, Some(&center.text_protos))?;
                Ok((t.bundle.total, t.pattern))
            };
            let stencil = [2.0 * epsilon, epsilon, -epsilon, -2.0 * epsilon];
            let mut f = [0.0; 4];
            let mut crosses_kink = false;
            for (slot, offset) in f.iter_mut().zip(stencil) {
                let (value, pattern) = eval(offset)?;
                *slot = value;
                crosses_kink |= pattern != center.pattern;
            }
            probe.tensors_mut()[t_idx].1[i] = original;
            if crosses_kink {
                audit.skipped_kinks += 1;
                continue;
            }
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * epsilon);
            let a = analytic[i];
            audit.checked += 1;
            audit.max_abs_error = audit.max_abs_error.max((a - numeric).abs());
            audit.max_abs_grad = audit.max_abs_grad.max(a.abs());
            audit.max_abs_numeric = audit.max_abs_numeric.max(numeric.abs());
        }
        let scale = audit.max_abs_grad.max(audit.max_abs_numeric).max(AUDIT_SCALE_FLOOR);
        audit.max_rel_error = audit.max_abs_error / scale;
        tensors.push(audit);
    }
    Ok(AuditReport {
        selector,
        epsilon,
        tensors,
        frozen_digest_before,
        frozen_digest_after: bank.frozen_digest(),
    })
}

/// Adapter parameters with the residual fixed at identity.
pub fn identity_adapter(d_v: usize, hidden: usize, seed: u64) -> Result<AdapterParams> {
    AdapterParams::init(d_v, hidden, [0.0, 1.0], seed)
}
