// SPDX-License-Identifier: Apache-2.0

//! The embedding bank: everything upstream of the visual adapter, frozen
//! into a single value (and file).
//!
//! A bank holds per-sample visual features taken before the cross-modal
//! projection, the frozen visual projection `phi`, the class table with
//! class-name embeddings, the logit temperature `tau1`, and the text
//! pathway. The text pathway is either a seeded [`FrozenTextEncoder`]
//! (prompt learning available) or a matrix of precomputed cross-modal text
//! embeddings, one per class (hand-crafted prompt only).

pub(crate) mod format;
mod stub;
mod synth;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SgvaError};
use crate::linalg::{self, Matrix};

pub use format::{load_bank, read_bank, save_bank, write_bank, BANK_FORMAT_VERSION, BANK_MAGIC};
pub use stub::{FrozenTextEncoder, StubShape, TextForward};
pub use synth::{generate_synthetic_bank, SyntheticBankSpec};

pub const DEFAULT_TAU1: f64 = 0.07;

pub type ClassId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    NovelVal,
    NovelTest,
}

/// Which side of an all-class train/test partition a sample sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub class_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankDims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub d_e: usize,
}

/// The frozen route from class names to the cross-modal space.
#[derive(Debug, Clone, PartialEq)]
pub enum TextPath {
    Stub(FrozenTextEncoder),
    /// Unit cross-modal text embeddings, one row per class in class-table
    /// order, produced offline with a fixed hand-crafted prompt.
    Precomputed { prompt: String, embeddings: Matrix },
}

/// Parts from which a bank is assembled and validated.
#[derive(Debug, Clone)]
pub struct BankParts {
    pub dims: BankDims,
    pub samples: Vec<Sample>,
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<ClassInfo>,
    pub class_embeddings: Vec<Vec<f64>>,
    pub phi: Matrix,
    pub text: TextPath,
    pub tau1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dims: BankDims,
    samples: Vec<Sample>,
    features: Matrix,
    classes: Vec<ClassInfo>,
    class_embeddings: Matrix,
    phi: Matrix,
    text: TextPath,
    tau1: f64,
    class_index: HashMap<ClassId, usize>,
}

fn check_finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SgvaError::validation(field, format!("non-finite value at entry {i}"))),
        None => Ok(()),
    }
}

fn check_shape(field: &str, m: &Matrix, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(SgvaError::validation(
            field,
            format!("expected shape {:?}, got {:?}", expected, m.shape()),
        ));
    }
    check_finite(field, m.as_slice())
}

fn stack_rows(field: &str, rows: Vec<Vec<f64>>, width: usize) -> Result<Matrix> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * width);
    for (i, row) in rows.into_iter().enumerate() {
        let name = format!("{field}[{i}]");
        if row.len() != width {
            return Err(SgvaError::validation(
                name,
                format!("expected length {width}, got {}", row.len()),
            ));
        }
        check_finite(&name, &row)?;
        data.extend(row);
    }
    Matrix::from_vec(n, width, data)
}

impl EmbeddingBank {
    pub fn from_parts(parts: BankParts) -> Result<Self> {
        let BankParts {
            dims,
            samples,
            features,
            classes,
            class_embeddings,
            phi,
            text,
            tau1,
        } = parts;
        if features.len() != samples.len() {
            return Err(SgvaError::validation(
                "samples",
                format!("{} samples but {} feature rows", samples.len(), features.len()),
            ));
        }
        let features = stack_rows("samples.x_v", features, dims.d_v)?;
        if class_embeddings.len() != classes.len() {
            return Err(SgvaError::validation(
                "class_table",
                format!(
                    "{} classes but {} class embeddings",
                    classes.len(),
                    class_embeddings.len()
                ),
            ));
        }
        let class_embeddings = stack_rows("class_table.cls_embedding", class_embeddings, dims.d_e)?;
        Self::assemble(dims, samples, features, classes, class_embeddings, phi, text, tau1)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        dims: BankDims,
        samples: Vec<Sample>,
        features: Matrix,
        classes: Vec<ClassInfo>,
        class_embeddings: Matrix,
        phi: Matrix,
        text: TextPath,
        tau1: f64,
    ) -> Result<Self> {
        for (name, d) in [("d_v", dims.d_v), ("d_t", dims.d_t), ("d_c", dims.d_c), ("d_e", dims.d_e)] {
            if d == 0 {
                return Err(SgvaError::validation(name, "dimension must be positive"));
            }
        }
        if !(tau1.is_finite() && tau1 > 0.0) {
            return Err(SgvaError::validation("tau1", format!("must be positive and finite, got {tau1}")));
        }
        check_shape("samples.x_v", &features, (samples.len(), dims.d_v))?;
        check_shape("class_table.cls_embedding", &class_embeddings, (classes.len(), dims.d_e))?;
        check_shape("phi", &phi, (dims.d_v, dims.d_c))?;

        let mut class_index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if class_index.insert(c.id, i).is_some() {
                return Err(SgvaError::validation("class_table", format!("duplicate class id {}", c.id)));
            }
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(SgvaError::validation("samples", format!("duplicate sample id {}", s.id)));
            }
            if !class_index.contains_key(&s.class_id) {
                return Err(SgvaError::validation(
                    "samples",
                    format!("sample {} references unknown class {}", s.id, s.class_id),
                ));
            }
        }

        match &text {
            TextPath::Stub(stub) => stub.validate(&dims)?,
            TextPath::Precomputed { embeddings, .. } => {
                check_shape("text_embeddings", embeddings, (classes.len(), dims.d_c))?;
            }
        }

        Ok(EmbeddingBank {
            dims,
            samples,
            features,
            classes,
            class_embeddings,
            phi,
            text,
            tau1,
            class_index,
        })
    }

    pub fn dims(&self) -> BankDims {
        self.dims
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Visual feature `x_v` of the sample at row `idx`.
    pub fn feature(&self, idx: usize) -> &[f64] {
        self.features.row(idx)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class_position(&self, id: ClassId) -> Result<usize> {
        self.class_index
            .get(&id)
            .copied()
            .ok_or_else(|| SgvaError::Key(format!("class {id}")))
    }

    pub fn class_embedding(&self, id: ClassId) -> Result<&[f64]> {
        Ok(self.class_embeddings.row(self.class_position(id)?))
    }

    pub fn class_embeddings(&self) -> &Matrix {
        &self.class_embeddings
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn text(&self) -> &TextPath {
        &self.text
    }

    pub fn text_stub(&self) -> Option<&FrozenTextEncoder> {
        match &self.text {
            TextPath::Stub(s) => Some(s),
            TextPath::Precomputed { .. } => None,
        }
    }

    pub fn has_split(&self) -> bool {
        self.classes.iter().any(|c| c.split.is_some())
    }

    pub fn has_partition(&self) -> bool {
        self.samples.iter().any(|s| s.partition == Some(Partition::Test))
    }

    /// Class ids belonging to `split`, in class-table order.
    pub fn classes_in(&self, split: Split) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.split == Some(split))
            .map(|c| c.id)
            .collect()
    }

    /// Row indices of every sample, grouped by class id.
    pub fn samples_by_class(&self) -> HashMap<ClassId, Vec<usize>> {
        let mut map: HashMap<ClassId, Vec<usize>> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.class_id).or_default().push(i);
        }
        map
    }

    /// Unit cross-modal visual embedding `x_c_v = normalize(phiᵀ x)`.
    pub fn cross_modal_visual(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.d_v {
            return Err(SgvaError::shape(self.dims.d_v, x.len()));
        }
        let projected = self.phi.vecmat(x);
        linalg::normalize(&projected)
            .map(|(u, _)| u)
            .ok_or_else(|| SgvaError::DegenerateFeature("visual feature projects to zero".into()))
    }

    /// SHA-256 over every frozen tensor (features, class embeddings, phi,
    /// text pathway) and the temperature, hex encoded.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(self.features.as_slice());
        feed(self.class_embeddings.as_slice());
        feed(self.phi.as_slice());
        match &self.text {
            TextPath::Stub(s) => {
                for (_, t) in s.named_tensors() {
                    feed(t.as_slice());
                }
            }
            TextPath::Precomputed { embeddings, .. } => feed(embeddings.as_slice()),
        }
        feed(&[self.tau1]);
        hex::encode(h.finalize())
    }

    /// Per-tensor SHA-256 digests, keyed by tensor name.
    pub fn frozen_tensor_digests(&self) -> Vec<(String, String)> {
        fn digest(m: &Matrix) -> String {
            let mut h = Sha256::new();
            for x in m.as_slice() {
                h.update(x.to_le_bytes());
            }
            hex::encode(h.finalize())
        }
        let mut out = vec![
            ("features".to_string(), digest(&self.features)),
            ("class_embeddings".to_string(), digest(&self.class_embeddings)),
            ("phi".to_string(), digest(&self.phi)),
        ];
        match &self.text {
            TextPath::Stub(s) => {
                for (name, t) in s.named_tensors() {
                    out.push((name.to_string(), digest(t)));
                }
            }
            TextPath::Precomputed { embeddings, .. } => {
                out.push(("text_embeddings".to_string(), digest(embeddings)));
            }
        }
        out
    }
}
