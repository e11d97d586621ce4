// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::BankDims;
use crate::error::{Result, SgvaError};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Purpose};

/// Layer sizes of the frozen text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubShape {
    /// Number of prompt vectors `L` preceding the class embedding.
    pub prompt_len: usize,
    pub d_e: usize,
    pub hidden: usize,
    pub d_t: usize,
    pub d_c: usize,
}

impl StubShape {
    pub fn input_dim(&self) -> usize {
        (self.prompt_len + 1) * self.d_e
    }
}

/// Frozen two-layer text encoder plus the text projection `psi`.
///
/// Input is the token sequence `[V_1 .. V_L, CLS]` flattened to
/// `(L + 1)·d_e` values. `x_t = tanh(uᵀ W_in + b_in)ᵀ W_out`, and the
/// cross-modal text embedding is `normalize(x_tᵀ psi)`.
///
/// The encoder also carries a fixed hand-crafted prompt (`L × d_e`) used
/// when prompt learning is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    seed: u64,
    shape: StubShape,
    w_in: Matrix,
    b_in: Matrix,
    w_out: Matrix,
    psi: Matrix,
    handcrafted: Matrix,
}

/// Forward cache for one prompt/class pair.
#[derive(Debug, Clone)]
pub struct TextForward {
    hidden: Vec<f64>,
    projected_norm: f64,
    /// Unit cross-modal text embedding `x_c_t`.
    pub embedding: Vec<f64>,
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl FrozenTextEncoder {
    pub fn from_seed(shape: StubShape, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::TextStub, 0);
        let in_std = 1.0 / (shape.d_e as f64).sqrt();
        let w_in = gaussian_matrix(&mut rng, shape.input_dim(), shape.hidden, in_std);
        let b_in = gaussian_matrix(&mut rng, 1, shape.hidden, 0.1);
        let w_out = gaussian_matrix(&mut rng, shape.hidden, shape.d_t, 1.0 / (shape.hidden as f64).sqrt());
        let psi = gaussian_matrix(&mut rng, shape.d_t, shape.d_c, 1.0 / (shape.d_t as f64).sqrt());
        let handcrafted = gaussian_matrix(&mut rng, shape.prompt_len, shape.d_e, 0.02);
        FrozenTextEncoder {
            seed,
            shape,
            w_in,
            b_in,
            w_out,
            psi,
            handcrafted,
        }
    }

    /// Rebuilds an encoder from stored tensors (the file path).
    pub fn from_tensors(
        seed: u64,
        shape: StubShape,
        w_in: Matrix,
        b_in: Matrix,
        w_out: Matrix,
        handcrafted: Matrix,
        psi: Matrix,
    ) -> Result<Self> {
        let stub = FrozenTextEncoder {
            seed,
            shape,
            w_in,
            b_in,
            w_out,
            psi,
            handcrafted,
        };
        stub.check_shapes()?;
        Ok(stub)
    }

    /// Replaces the text projection; used when aligning a synthetic stub.
    pub(crate) fn with_psi(mut self, psi: Matrix) -> Self {
        self.psi = psi;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> StubShape {
        self.shape
    }

    pub fn psi(&self) -> &Matrix {
        &self.psi
    }

    /// Flattened `L × d_e` hand-crafted prompt.
    pub fn handcrafted_prompt(&self) -> &[f64] {
        self.handcrafted.as_slice()
    }

    /// Tensors in file order: `w_in`, `b_in`, `w_out`, `handcrafted`, `psi`.
    pub fn named_tensors(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("stub.w_in", &self.w_in),
            ("stub.b_in", &self.b_in),
            ("stub.w_out", &self.w_out),
            ("stub.handcrafted", &self.handcrafted),
            ("psi", &self.psi),
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let s = self.shape;
        let checks = [
            ("stub.w_in", self.w_in.shape(), (s.input_dim(), s.hidden)),
            ("stub.b_in", self.b_in.shape(), (1, s.hidden)),
            ("stub.w_out", self.w_out.shape(), (s.hidden, s.d_t)),
            ("stub.handcrafted", self.handcrafted.shape(), (s.prompt_len, s.d_e)),
            ("psi", self.psi.shape(), (s.d_t, s.d_c)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(SgvaError::validation(name, format!("expected shape {want:?}, got {got:?}")));
            }
        }
        let all_finite = self.w_in.is_finite()
            && self.b_in.is_finite()
            && self.w_out.is_finite()
            && self.psi.is_finite()
            && self.handcrafted.is_finite();
        if !all_finite {
            return Err(SgvaError::validation("text_stub", "non-finite weight"));
        }
        Ok(())
    }

    pub(crate) fn validate(&self, dims: &BankDims) -> Result<()> {
        if self.shape.prompt_len == 0 || self.shape.hidden == 0 {
            return Err(SgvaError::validation("text_stub", "prompt_len and hidden must be positive"));
        }
        if self.shape.d_e != dims.d_e || self.shape.d_t != dims.d_t || self.shape.d_c != dims.d_c {
            return Err(SgvaError::validation(
                "text_stub",
                format!("stub shape {:?} disagrees with bank dims {:?}", self.shape, dims),
            ));
        }
        self.check_shapes()
    }

    /// Encodes `[prompt, cls]` into a unit cross-modal text embedding.
    pub fn forward(&self, prompt: &[f64], cls: &[f64]) -> Result<TextForward> {
        let s = self.shape;
        if prompt.len() != s.prompt_len * s.d_e {
            return Err(SgvaError::shape(s.prompt_len * s.d_e, prompt.len()));
        }
        if cls.len() != s.d_e {
            return Err(SgvaError::shape(s.d_e, cls.len()));
        }
        let hidden = self.hidden(prompt, cls);
        let text = self.w_out.vecmat(&hidden);
        let projected = self.psi.vecmat(&text);
        let (embedding, projected_norm) = linalg::normalize(&projected)
            .ok_or_else(|| SgvaError::DegenerateFeature("text embedding projects to zero".into()))?;
        Ok(TextForward {
            hidden,
            projected_norm,
            embedding,
        })
    }

    /// Gradient of a loss w.r.t. the prompt part of the input, given the
    /// gradient w.r.t. the unit embedding. The frozen weights get nothing.
    pub fn backward_prompt(&self, fwd: &TextForward, grad_embedding: &[f64]) -> Vec<f64> {
        let grad_projected = linalg::normalize_backward(&fwd.embedding, fwd.projected_norm, grad_embedding);
        let grad_text = self.psi.matvec(&grad_projected);
        let grad_hidden = self.w_out.matvec(&grad_text);
        let grad_pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&fwd.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let n_prompt = self.shape.prompt_len * self.shape.d_e;
        (0..n_prompt).map(|r| linalg::dot(self.w_in.row(r), &grad_pre)).collect()
    }

    /// Uni-modal text feature `x_t` (pre-projection), used to fit `psi`.
    pub(crate) fn text_feature(&self, prompt: &[f64], cls: &[f64]) -> Vec<f64> {
        self.w_out.vecmat(&self.hidden(prompt, cls))
    }

    fn hidden(&self, prompt: &[f64], cls: &[f64]) -> Vec<f64> {
        let mut pre = self.b_in.as_slice().to_vec();
        for (r, &x) in prompt.iter().chain(cls).enumerate() {
            linalg::axpy(x, self.w_in.row(r), &mut pre);
        }
        pre.into_iter().map(f64::tanh).collect()
    }
}
