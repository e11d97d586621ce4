// SPDX-License-Identifier: Apache-2.0

//! Shot-specific learnable prompts and the frozen text route into the
//! cross-modal space.
//!
//! Prompt block `j` (`L` vectors of width `d_e`) is shared by every class
//! and used for the `j`-th support shot of each class. The text input for
//! shot `j` of class `c` is `[V_j1 .. V_jL, CLS_c]`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embank::{ClassId, EmbeddingBank, FrozenTextEncoder, TextForward, TextPath};
use crate::error::{Result, SgvaError};
use crate::rng::{self, Purpose};

pub const DEFAULT_PROMPT_LEN: usize = 4;
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    blocks: usize,
    prompt_len: usize,
    d_e: usize,
    /// `blocks × prompt_len × d_e`, row-major.
    vectors: Vec<f64>,
}

impl PromptSet {
    /// `blocks` independent prompts, entries drawn from `N(0, 0.02²)`.
    pub fn init(blocks: usize, prompt_len: usize, d_e: usize, seed: u64) -> Result<Self> {
        if blocks == 0 || prompt_len == 0 || d_e == 0 {
            return Err(SgvaError::Config("prompt shape must be positive".into()));
        }
        let mut rng = rng::stream(seed, Purpose::PromptInit, 0);
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let vectors = (0..blocks * prompt_len * d_e).map(|_| normal.sample(&mut rng)).collect();
        Ok(PromptSet {
            blocks,
            prompt_len,
            d_e,
            vectors,
        })
    }

    pub fn from_vec(blocks: usize, prompt_len: usize, d_e: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != blocks * prompt_len * d_e {
            return Err(SgvaError::shape(blocks * prompt_len * d_e, vectors.len()));
        }
        Ok(PromptSet {
            blocks,
            prompt_len,
            d_e,
            vectors,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.blocks, self.prompt_len, self.d_e)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_len(&self) -> usize {
        self.prompt_len * self.d_e
    }

    /// Block used for support shot `shot`. A single-block set is shared by
    /// every shot.
    pub fn block_index(&self, shot: usize) -> Result<usize> {
        match self.blocks {
            1 => Ok(0),
            k if shot < k => Ok(shot),
            k => Err(SgvaError::Contract(format!("shot index {shot} out of range for {k} prompts"))),
        }
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.block_len()..(j + 1) * self.block_len()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vectors
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.vectors
    }
}

/// `init_prompts` under its conventional name.
pub fn init_prompts(k: usize, prompt_len: usize, d_e: usize, seed: u64) -> Result<PromptSet> {
    PromptSet::init(k, prompt_len, d_e, seed)
}

fn require_stub(bank: &EmbeddingBank) -> Result<&FrozenTextEncoder> {
    bank.text_stub()
        .ok_or_else(|| SgvaError::Config("bank ships precomputed text embeddings; prompt learning unavailable".into()))
}

/// Forward pass for shot `shot_index` of `class_id`, kept for backprop.
pub fn encode_text_forward(
    prompts: &PromptSet,
    shot_index: usize,
    class_id: ClassId,
    bank: &EmbeddingBank,
) -> Result<TextForward> {
    let stub = require_stub(bank)?;
    if stub.shape().prompt_len != prompts.prompt_len || stub.shape().d_e != prompts.d_e {
        return Err(SgvaError::shape(
            format!("prompt {}x{}", stub.shape().prompt_len, stub.shape().d_e),
            format!("{}x{}", prompts.prompt_len, prompts.d_e),
        ));
    }
    let block = prompts.block_index(shot_index)?;
    let cls = bank.class_embedding(class_id)?;
    stub.forward(prompts.block(block), cls)
}

/// Unit cross-modal text embedding `x_c_t` for one support shot.
pub fn encode_text(prompts: &PromptSet, shot_index: usize, class_id: ClassId, bank: &EmbeddingBank) -> Result<Vec<f64>> {
    encode_text_forward(prompts, shot_index, class_id, bank).map(|f| f.embedding)
}

/// Cross-modal text embedding under the bank's fixed hand-crafted prompt.
pub fn handcrafted_text(bank: &EmbeddingBank, class_id: ClassId) -> Result<Vec<f64>> {
    match bank.text() {
        TextPath::Stub(stub) => Ok(stub.forward(stub.handcrafted_prompt(), bank.class_embedding(class_id)?)?.embedding),
        TextPath::Precomputed { embeddings, .. } => Ok(embeddings.row(bank.class_position(class_id)?).to_vec()),
    }
}
