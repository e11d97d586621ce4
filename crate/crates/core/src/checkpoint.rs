// SPDX-License-Identifier: Apache-2.0

//! The `SGVP` parameter checkpoint: learnable tensors, momentum buffers and
//! the step counter, in the same container layout as `SGVB` banks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, AdapterParams};
use crate::embank::format::{expect_eof, read_container_header, read_tensor, write_container, TensorHeader};
use crate::error::{Result, SgvaError};
use crate::linalg::Matrix;
use crate::optim::{ParamGrads, SgvaParams, Velocity};
use crate::textpath::PromptSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGVP";
pub const CHECKPOINT_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SgvaParams,
    pub velocity: Velocity,
    /// Frozen digest of the bank the parameters were trained against.
    pub bank_digest: String,
    pub epochs_done: u64,
    /// Config echo of the producing run.
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    d_v: usize,
    hidden: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptHeader {
    blocks: usize,
    prompt_len: usize,
    d_e: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    adapter: Option<AdapterHeader>,
    prompts: Option<PromptHeader>,
    step_count: u64,
    epochs_done: u64,
    bank_digest: String,
    config: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

fn group_shapes(params: &SgvaParams) -> Vec<(&'static str, [usize; 2])> {
    let mut out = Vec::new();
    if let Some(a) = &params.adapter {
        out.push(("W1", [a.w1.rows(), a.w1.cols()]));
        out.push(("W2", [a.w2.rows(), a.w2.cols()]));
        out.push(("Wa", [1, 2]));
    }
    if let Some(p) = &params.prompts {
        let (k, l, d_e) = p.shape();
        out.push(("prompts", [k, l * d_e]));
    }
    out
}

fn check_velocity(params: &SgvaParams, velocity: &Velocity) -> Result<()> {
    let p: Vec<_> = params.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    let v: Vec<_> = velocity.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    if p != v {
        return Err(SgvaError::shape(format!("{p:?}"), format!("{v:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        check_velocity(&self.params, &self.velocity)?;
        let shapes = group_shapes(&self.params);
        let mut tensors: Vec<TensorHeader> = shapes
            .iter()
            .map(|(n, s)| TensorHeader {
                name: n.to_string(),
                shape: *s,
            })
            .collect();
        tensors.extend(shapes.iter().map(|(n, s)| TensorHeader {
            name: format!("velocity.{n}"),
            shape: *s,
        }));
        let header = Header {
            adapter: self.params.adapter.as_ref().map(|a| AdapterHeader {
                d_v: a.d_v(),
                hidden: a.hidden(),
            }),
            prompts: self.params.prompts.as_ref().map(|p| {
                let (blocks, prompt_len, d_e) = p.shape();
                PromptHeader { blocks, prompt_len, d_e }
            }),
            step_count: self.params.step_count,
            epochs_done: self.epochs_done,
            bank_digest: self.bank_digest.clone(),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| SgvaError::Format(e.to_string()))?;
        let mut data: Vec<&[f64]> = self.params.tensors().into_iter().map(|(_, t)| t).collect();
        data.extend(self.velocity.tensors().into_iter().map(|(_, t)| t));
        write_container(w, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, &header, &data)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let raw = read_container_header(r, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let header: Header =
            serde_json::from_slice(&raw).map_err(|e| SgvaError::Format(format!("checkpoint header: {e}")))?;

        let mut shapes = Vec::new();
        if let Some(a) = &header.adapter {
            shapes.push(("W1".to_string(), [a.d_v, a.hidden]));
            shapes.push(("W2".to_string(), [a.hidden, a.d_v]));
            shapes.push(("Wa".to_string(), [1, 2]));
        }
        if let Some(p) = &header.prompts {
            shapes.push(("prompts".to_string(), [p.blocks, p.prompt_len * p.d_e]));
        }
        let velocity_shapes: Vec<_> = shapes.iter().map(|(n, s)| (format!("velocity.{n}"), *s)).collect();
        shapes.extend(velocity_shapes);
        let declared: Vec<_> = header.tensors.iter().map(|t| (t.name.clone(), t.shape)).collect();
        if declared != shapes {
            return Err(SgvaError::validation("tensors", format!("expected {shapes:?}, header declares {declared:?}")));
        }

        let mut mats = Vec::with_capacity(shapes.len());
        for (name, [rows, cols]) in &shapes {
            let m = read_tensor(r, name, *rows, *cols)?;
            if !m.is_finite() {
                return Err(SgvaError::validation(name.clone(), "non-finite value"));
            }
            mats.push(m);
        }
        expect_eof(r)?;

        let half = mats.len() / 2;
        let velocity_mats = mats.split_off(half);
        let assemble = |mut m: std::vec::IntoIter<Matrix>| {
            let adapter = match header.adapter {
                Some(_) => {
                    let w1 = m.next().expect("W1 read");
                    let w2 = m.next().expect("W2 read");
                    let wa = m.next().expect("Wa read");
                    Some((w1, w2, [wa.get(0, 0), wa.get(0, 1)]))
                }
                None => None,
            };
            let prompts = header.prompts.as_ref().map(|_| m.next().expect("prompts read").as_slice().to_vec());
            (adapter, prompts)
        };
        let (adapter, prompts) = assemble(mats.into_iter());
        let (v_adapter, v_prompts) = assemble(velocity_mats.into_iter());

        let prompts = match (&header.prompts, prompts) {
            (Some(h), Some(v)) => Some(PromptSet::from_vec(h.blocks, h.prompt_len, h.d_e, v)?),
            _ => None,
        };
        Ok(Checkpoint {
            params: SgvaParams {
                adapter: adapter.map(|(w1, w2, wa)| AdapterParams { w1, w2, wa }),
                prompts,
                step_count: header.step_count,
            },
            velocity: ParamGrads {
                adapter: v_adapter.map(|(w1, w2, wa)| AdapterGrads { w1, w2, wa }),
                prompts: v_prompts,
            },
            bank_digest: header.bank_digest,
            epochs_done: header.epochs_done,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}
