// SPDX-License-Identifier: Apache-2.0

//! The visual adapting layer.
//!
//! `new_v = ReLU(x_vᵀ W1) W2` and `x_a = wa[0]·new_v + wa[1]·x_v`. `x_v`
//! and the projection `phi` are frozen; gradients reach `W1`, `W2` and `wa`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embank::EmbeddingBank;
use crate::error::{Result, SgvaError};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Purpose};

pub const DEFAULT_HIDDEN: usize = 4096;
pub const DEFAULT_WA_INIT: [f64; 2] = [0.2, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub wa: [f64; 2],
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl AdapterParams {
    /// Fan-in scaled uniform init, no biases.
    pub fn init(d_v: usize, hidden: usize, wa: [f64; 2], seed: u64) -> Result<Self> {
        if d_v == 0 || hidden == 0 {
            return Err(SgvaError::Config("adapter dimensions must be positive".into()));
        }
        let mut rng = rng::stream(seed, Purpose::AdapterInit, 0);
        let w1 = uniform_matrix(&mut rng, d_v, hidden, 1.0 / (d_v as f64).sqrt());
        let w2 = uniform_matrix(&mut rng, hidden, d_v, 1.0 / (hidden as f64).sqrt());
        Ok(AdapterParams { w1, w2, wa })
    }

    pub fn d_v(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn check(&self) -> Result<()> {
        let (d_v, h) = self.w1.shape();
        if self.w2.shape() != (h, d_v) {
            return Err(SgvaError::shape(format!("W2 {h}x{d_v}"), format!("{:?}", self.w2.shape())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub wa: [f64; 2],
}

impl AdapterGrads {
    pub fn zeros_like(p: &AdapterParams) -> Self {
        AdapterGrads {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            wa: [0.0; 2],
        }
    }
}

/// Forward cache for one sample.
#[derive(Debug, Clone)]
pub struct AdapterForward {
    pre: Vec<f64>,
    activ: Vec<f64>,
    new_v: Vec<f64>,
    pub x_a: Vec<f64>,
}

impl AdapterForward {
    /// Sign pattern of the hidden pre-activations; changes only when an
    /// input crosses a ReLU kink.
    pub fn active_units(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().map(|p| *p > 0.0)
    }
}

pub fn adapt_forward(x_v: &[f64], params: &AdapterParams) -> Result<AdapterForward> {
    if x_v.len() != params.d_v() {
        return Err(SgvaError::shape(params.d_v(), x_v.len()));
    }
    let pre = params.w1.vecmat(x_v);
    let activ: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
    let new_v = params.w2.vecmat(&activ);
    let [a0, a1] = params.wa;
    let x_a = new_v.iter().zip(x_v).map(|(n, x)| a0 * n + a1 * x).collect();
    Ok(AdapterForward { pre, activ, new_v, x_a })
}

/// Adapted feature `x_a`.
pub fn adapt(x_v: &[f64], params: &AdapterParams) -> Result<Vec<f64>> {
    adapt_forward(x_v, params).map(|f| f.x_a)
}

/// Accumulates `∂L/∂{W1, W2, wa}` given `∂L/∂x_a`.
pub fn adapt_backward(
    x_v: &[f64],
    params: &AdapterParams,
    fwd: &AdapterForward,
    grad_xa: &[f64],
    grads: &mut AdapterGrads,
) {
    grads.wa[0] += linalg::dot(grad_xa, &fwd.new_v);
    grads.wa[1] += linalg::dot(grad_xa, x_v);
    let grad_new: Vec<f64> = grad_xa.iter().map(|g| params.wa[0] * g).collect();
    grads.w2.add_outer(&fwd.activ, &grad_new);
    let grad_activ = params.w2.matvec(&grad_new);
    let grad_pre: Vec<f64> = grad_activ
        .iter()
        .zip(&fwd.pre)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    grads.w1.add_outer(x_v, &grad_pre);
}

/// Unit proxy `x_c_a = normalize(phiᵀ x_a)` together with `‖phiᵀ x_a‖`.
pub fn project_proxy_forward(x_a: &[f64], bank: &EmbeddingBank) -> Result<(Vec<f64>, f64)> {
    let d_v = bank.dims().d_v;
    if x_a.len() != d_v {
        return Err(SgvaError::shape(d_v, x_a.len()));
    }
    if x_a.iter().any(|v| !v.is_finite()) {
        return Err(SgvaError::Numerics("adapted feature is not finite".into()));
    }
    linalg::normalize(&bank.phi().vecmat(x_a))
        .ok_or_else(|| SgvaError::DegenerateFeature("adapted feature projects to zero".into()))
}

pub fn project_proxy(x_a: &[f64], bank: &EmbeddingBank) -> Result<Vec<f64>> {
    project_proxy_forward(x_a, bank).map(|(u, _)| u)
}

/// `∂L/∂x_a` from `∂L/∂x_c_a`; `phi` itself receives nothing.
pub fn project_proxy_backward(bank: &EmbeddingBank, unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let grad_projected = linalg::normalize_backward(unit, norm, grad_unit);
    bank.phi().matvec(&grad_projected)
}

/// Cross-modal visual embedding `x_c_v = normalize(phiᵀ x_v)`.
pub fn embed_cross_visual(x_v: &[f64], bank: &EmbeddingBank) -> Result<Vec<f64>> {
    bank.cross_modal_visual(x_v)
}
