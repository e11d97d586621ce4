// SPDX-License-Identifier: Apache-2.0

//! Episode-level forward and backward passes.
//!
//! Prototypes are built from the support set (text prototypes through the
//! prompt pathway, vision prototypes through the adapter), every query is
//! scored against them, and the enabled loss terms are averaged over the
//! queries. The backward pass is written out by hand for this fixed graph.

use crate::adapter::{self, AdapterForward};
use crate::embank::{EmbeddingBank, TextForward};
use crate::episodes::Episode;
use crate::error::{Result, SgvaError};
use crate::linalg;
use crate::losses::{self, KdVariant, LossBundle, LossFlags};
use crate::optim::{ParamGrads, SgvaParams};
use crate::textpath;

pub(crate) struct TextEntry {
    fwd: Option<TextForward>,
    pub embedding: Vec<f64>,
}

pub(crate) struct VisionEntry {
    fwd: Option<AdapterForward>,
    pub x_a: Vec<f64>,
    pub unit: Vec<f64>,
    norm: f64,
}

/// Support-side forward state: per-shot embeddings and unit prototypes.
pub(crate) struct SupportForward {
    text: Vec<TextEntry>,
    pub text_protos: Vec<Vec<f64>>,
    text_norms: Vec<f64>,
    pub vision: Vec<VisionEntry>,
    pub vision_protos: Vec<Vec<f64>>,
    vision_norms: Vec<f64>,
}

pub(crate) fn vision_entry(params: &SgvaParams, x_v: &[f64]) -> Result<VisionEntry> {
    let (fwd, x_a) = match &params.adapter {
        Some(a) => {
            let f = adapter::adapt_forward(x_v, a)?;
            let x_a = f.x_a.clone();
            (Some(f), x_a)
        }
        None => (None, x_v.to_vec()),
    };
    let (unit, norm) = linalg::normalize(&x_a)
        .ok_or_else(|| SgvaError::DegenerateFeature("adapted feature has zero norm".into()))?;
    Ok(VisionEntry { fwd, x_a, unit, norm })
}

/// Renormalized mean of unit vectors.
fn unit_mean<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<(Vec<f64>, f64)> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        linalg::axpy(1.0, v, &mut sum);
        count += 1;
    }
    if count == 0 {
        return Err(SgvaError::Contract("class has no support samples".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    linalg::normalize(&mean).ok_or_else(|| SgvaError::DegenerateFeature("prototype mean is zero".into()))
}

pub(crate) fn support_forward(params: &SgvaParams, bank: &EmbeddingBank, episode: &Episode) -> Result<SupportForward> {
    if episode.k_shot == 0 || episode.support.len() != episode.n_way * episode.k_shot {
        return Err(SgvaError::Contract("episode has an empty or ragged support set".into()));
    }
    let dims = bank.dims();
    let k = episode.k_shot;
    let mut text = Vec::with_capacity(episode.support.len());
    for &class in &episode.class_ids {
        match &params.prompts {
            Some(prompts) => {
                for shot in 0..k {
                    let fwd = textpath::encode_text_forward(prompts, shot, class, bank)?;
                    let embedding = fwd.embedding.clone();
                    text.push(TextEntry { fwd: Some(fwd), embedding });
                }
            }
            None => {
                let embedding = textpath::handcrafted_text(bank, class)?;
                for _ in 0..k {
                    text.push(TextEntry { fwd: None, embedding: embedding.clone() });
                }
            }
        }
    }
    let mut text_protos = Vec::with_capacity(episode.n_way);
    let mut text_norms = Vec::with_capacity(episode.n_way);
    for c in 0..episode.n_way {
        let (p, n) = unit_mean(text[c * k..(c + 1) * k].iter().map(|t| t.embedding.as_slice()), dims.d_c)?;
        text_protos.push(p);
        text_norms.push(n);
    }

    let vision = episode
        .support
        .iter()
        .map(|&row| vision_entry(params, bank.feature(row)))
        .collect::<Result<Vec<_>>>()?;
    let mut vision_protos = Vec::with_capacity(episode.n_way);
    let mut vision_norms = Vec::with_capacity(episode.n_way);
    for c in 0..episode.n_way {
        let (p, n) = unit_mean(vision[c * k..(c + 1) * k].iter().map(|v| v.unit.as_slice()), dims.d_v)?;
        vision_protos.push(p);
        vision_norms.push(n);
    }
    Ok(SupportForward {
        text,
        text_protos,
        text_norms,
        vision,
        vision_protos,
        vision_norms,
    })
}

/// Query-averaged losses and gradients of the enabled terms for one episode.
pub fn episode_loss(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    episode: &Episode,
    flags: &LossFlags,
    tau2: f64,
) -> Result<LossBundle> {
    episode_loss_traced(params, bank, episode, flags, tau2, None).map(|t| t.bundle)
}

/// Forward/backward trace used by the gradient audit.
pub(crate) struct Trace {
    pub bundle: LossBundle,
    /// ReLU activation pattern of every adapter evaluation.
    pub pattern: Vec<bool>,
    pub text_protos: Vec<Vec<f64>>,
}

/// As [`episode_loss`], with an optional override for the text prototypes
/// seen by the distillation terms. Passing the prototypes of an unperturbed
/// evaluation reproduces their stop-gradient as a constant.
pub(crate) fn episode_loss_traced(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    episode: &Episode,
    flags: &LossFlags,
    tau2: f64,
    kd_text_protos: Option<&[Vec<f64>]>,
) -> Result<Trace> {
    if episode.query.is_empty() {
        return Err(SgvaError::Contract("episode has no queries".into()));
    }
    let tau1 = bank.tau1();
    let support = support_forward(params, bank, episode)?;
    let n = episode.n_way;
    let q_scale = 1.0 / episode.query.len() as f64;

    let mut grads = ParamGrads::zeros_like(params);
    let mut grad_text_protos = vec![vec![0.0; bank.dims().d_c]; n];
    let mut grad_vision_protos = vec![vec![0.0; bank.dims().d_v]; n];
    let (mut l_i2t, mut l_i2i, mut l_kd) = (0.0, 0.0, 0.0);
    let mut pattern = Vec::new();
    let kd_protos = kd_text_protos.unwrap_or(&support.text_protos);

    for (&row, &label) in episode.query.iter().zip(&episode.query_labels) {
        let x_v = bank.feature(row);
        let x_c_v = bank.cross_modal_visual(x_v)?;
        let query = vision_entry(params, x_v)?;
        if let Some(f) = &query.fwd {
            pattern.extend(f.active_units());
        }
        let mut grad_xa = vec![0.0; x_v.len()];

        let i2t = losses::cross_modal_contrastive(&x_c_v, &support.text_protos, label, tau1)?;
        l_i2t += i2t.loss * q_scale;
        if flags.i2t {
            for (acc, g) in grad_text_protos.iter_mut().zip(&i2t.grad_prototypes) {
                linalg::axpy(q_scale, g, acc);
            }
        }

        let i2i = losses::vision_contrastive(&query.x_a, &support.vision_protos, label, tau1)?;
        l_i2i += i2i.loss * q_scale;
        if flags.i2i {
            linalg::axpy(q_scale, &i2i.grad_x, &mut grad_xa);
            for (acc, g) in grad_vision_protos.iter_mut().zip(&i2i.grad_prototypes) {
                linalg::axpy(q_scale, g, acc);
            }
        }

        match flags.kd_variant {
            KdVariant::Implicit => {
                let (proxy, proxy_norm) = adapter::project_proxy_forward(&query.x_a, bank)?;
                let kd = losses::implicit_kd(&x_c_v, &proxy, kd_protos, tau1, tau2)?;
                l_kd += kd.loss * q_scale;
                if flags.kd {
                    let scaled: Vec<f64> = kd.grad_proxy.iter().map(|g| g * q_scale).collect();
                    let g = adapter::project_proxy_backward(bank, &proxy, proxy_norm, &scaled);
                    linalg::axpy(1.0, &g, &mut grad_xa);
                }
            }
            KdVariant::Direct => {
                let kd = losses::direct_kd(&x_c_v, kd_protos, &query.x_a, &support.vision_protos, tau1, tau2)?;
                l_kd += kd.loss * q_scale;
                if flags.kd {
                    linalg::axpy(q_scale, &kd.grad_x, &mut grad_xa);
                    for (acc, g) in grad_vision_protos.iter_mut().zip(&kd.grad_prototypes) {
                        linalg::axpy(q_scale, g, acc);
                    }
                }
            }
        }

        if let (Some(a), Some(f), Some(g)) = (&params.adapter, &query.fwd, grads.adapter.as_mut()) {
            adapter::adapt_backward(x_v, a, f, &grad_xa, g);
        }
    }

    for entry in &support.vision {
        if let Some(f) = &entry.fwd {
            pattern.extend(f.active_units());
        }
    }
    backprop_support(params, bank, episode, &support, &grad_text_protos, &grad_vision_protos, &mut grads)?;

    let total = losses::total_loss(l_i2t, l_i2i, l_kd, flags);
    Ok(Trace {
        bundle: LossBundle {
            l_i2t,
            l_i2i,
            l_kd,
            total,
            grads,
        },
        pattern,
        text_protos: support.text_protos,
    })
}

#[allow(clippy::needless_range_loop)]
fn backprop_support(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    episode: &Episode,
    support: &SupportForward,
    grad_text_protos: &[Vec<f64>],
    grad_vision_protos: &[Vec<f64>],
    grads: &mut ParamGrads,
) -> Result<()> {
    let k = episode.k_shot;
    let inv_k = 1.0 / k as f64;

    if let (Some(prompts), Some(prompt_grads), Some(stub)) = (&params.prompts, grads.prompts.as_mut(), bank.text_stub()) {
        let block_len = prompts.block_len();
        for c in 0..episode.n_way {
            let grad_mean = linalg::normalize_backward(&support.text_protos[c], support.text_norms[c], &grad_text_protos[c]);
            let grad_embedding: Vec<f64> = grad_mean.iter().map(|g| g * inv_k).collect();
            for shot in 0..k {
                let entry = &support.text[c * k + shot];
                let fwd = entry.fwd.as_ref().expect("prompt forward cached");
                let g = stub.backward_prompt(fwd, &grad_embedding);
                let block = prompts.block_index(shot)?;
                linalg::axpy(1.0, &g, &mut prompt_grads[block * block_len..(block + 1) * block_len]);
            }
        }
    }

    if let (Some(a), Some(adapter_grads)) = (&params.adapter, grads.adapter.as_mut()) {
        for c in 0..episode.n_way {
            let grad_mean = linalg::normalize_backward(&support.vision_protos[c], support.vision_norms[c], &grad_vision_protos[c]);
            let grad_unit: Vec<f64> = grad_mean.iter().map(|g| g * inv_k).collect();
            for i in c * k..(c + 1) * k {
                let entry = &support.vision[i];
                let grad_xa = linalg::normalize_backward(&entry.unit, entry.norm, &grad_unit);
                let fwd = entry.fwd.as_ref().expect("adapter forward cached");
                adapter::adapt_backward(bank.feature(episode.support[i]), a, fwd, &grad_xa, adapter_grads);
            }
        }
    }
    Ok(())
}

/// Zeroes the gradient groups that no enabled loss term reaches.
pub fn mask_unreached(grads: &mut ParamGrads, flags: &LossFlags) {
    if !flags.reaches_adapter() {
        grads.adapter = None;
    }
    if !flags.reaches_prompts() {
        grads.prompts = None;
    }
}
