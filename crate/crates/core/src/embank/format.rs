// SPDX-License-Identifier: Apache-2.0

//! The `SGVB` bank container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGVB"
//! 4       2     format version, u16 LE (currently 1)
//! 6       8     header length H, u64 LE
//! 14      H     header, compact UTF-8 JSON
//! 14+H    ...   tensors, f64 LE, row-major, in header order, no padding
//! ```
//!
//! See `FORMAT.md` at the repository root for the header schema.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BankDims, ClassInfo, EmbeddingBank, FrozenTextEncoder, Sample, StubShape, TextPath, DEFAULT_TAU1,
};
use crate::error::{Result, SgvaError};
use crate::linalg::Matrix;

pub const BANK_MAGIC: &[u8; 4] = b"SGVB";
pub const BANK_FORMAT_VERSION: u16 = 1;

fn default_tau1() -> f64 {
    DEFAULT_TAU1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TextHeader {
    Stub {
        seed: u64,
        prompt_len: usize,
        hidden: usize,
    },
    Precomputed {
        prompt: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TensorHeader {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: BankDims,
    #[serde(default = "default_tau1")]
    tau1: f64,
    classes: Vec<ClassInfo>,
    samples: Vec<Sample>,
    text: TextHeader,
    tensors: Vec<TensorHeader>,
}

pub(crate) fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    version: u16,
    header: &[u8],
    tensors: &[&[f64]],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    for t in tensors {
        for x in *t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads magic, version and header; leaves the reader at the tensor block.
pub(crate) fn read_container_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u16) -> Result<Vec<u8>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| SgvaError::Format("file too short for magic".into()))?;
    if &m != magic {
        return Err(SgvaError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| SgvaError::Format("truncated version".into()))?;
    let got = u16::from_le_bytes(v);
    if got != version {
        return Err(SgvaError::Format(format!("unsupported version {got}, expected {version}")));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l)
        .map_err(|_| SgvaError::Format("truncated header length".into()))?;
    let len = u64::from_le_bytes(l);
    if len > (1 << 32) {
        return Err(SgvaError::Format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)
        .map_err(|_| SgvaError::Format("truncated header".into()))?;
    Ok(header)
}

pub(crate) fn read_tensor<R: Read>(r: &mut R, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows * cols;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| SgvaError::Format(format!("truncated tensor `{name}`")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(SgvaError::Format("trailing bytes after last tensor".into())),
    }
}

fn expected_tensors(bank: &EmbeddingBank) -> Vec<(String, &Matrix)> {
    let mut out = vec![
        ("features".to_string(), bank.features()),
        ("class_embeddings".to_string(), bank.class_embeddings()),
        ("phi".to_string(), bank.phi()),
    ];
    match bank.text() {
        TextPath::Stub(s) => {
            for (name, t) in s.named_tensors() {
                out.push((name.to_string(), t));
            }
        }
        TextPath::Precomputed { embeddings, .. } => out.push(("text_embeddings".to_string(), embeddings)),
    }
    out
}

pub fn write_bank<W: Write>(bank: &EmbeddingBank, w: &mut W) -> Result<()> {
    let tensors = expected_tensors(bank);
    let text = match bank.text() {
        TextPath::Stub(s) => TextHeader::Stub {
            seed: s.seed(),
            prompt_len: s.shape().prompt_len,
            hidden: s.shape().hidden,
        },
        TextPath::Precomputed { prompt, .. } => TextHeader::Precomputed { prompt: prompt.clone() },
    };
    let header = Header {
        dims: bank.dims(),
        tau1: bank.tau1(),
        classes: bank.classes().to_vec(),
        samples: bank.samples().to_vec(),
        text,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorHeader {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| SgvaError::Format(e.to_string()))?;
    let payload: Vec<&[f64]> = tensors.iter().map(|(_, m)| m.as_slice()).collect();
    write_container(w, BANK_MAGIC, BANK_FORMAT_VERSION, &header, &payload)
}

pub fn save_bank(bank: &EmbeddingBank, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bank(bank, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_bank<R: Read>(r: &mut R) -> Result<EmbeddingBank> {
    let header = read_container_header(r, BANK_MAGIC, BANK_FORMAT_VERSION)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| SgvaError::Format(format!("bad header: {e}")))?;
    let dims = header.dims;
    let n_samples = header.samples.len();
    let n_classes = header.classes.len();

    let mut expected: Vec<(&str, [usize; 2])> = vec![
        ("features", [n_samples, dims.d_v]),
        ("class_embeddings", [n_classes, dims.d_e]),
        ("phi", [dims.d_v, dims.d_c]),
    ];
    let stub_shape = match &header.text {
        TextHeader::Stub { prompt_len, hidden, .. } => {
            let s = StubShape {
                prompt_len: *prompt_len,
                d_e: dims.d_e,
                hidden: *hidden,
                d_t: dims.d_t,
                d_c: dims.d_c,
            };
            expected.extend([
                ("stub.w_in", [s.input_dim(), s.hidden]),
                ("stub.b_in", [1, s.hidden]),
                ("stub.w_out", [s.hidden, s.d_t]),
                ("stub.handcrafted", [s.prompt_len, s.d_e]),
                ("psi", [s.d_t, s.d_c]),
            ]);
            Some(s)
        }
        TextHeader::Precomputed { .. } => {
            expected.push(("text_embeddings", [n_classes, dims.d_c]));
            None
        }
    };

    if header.tensors.len() != expected.len() {
        return Err(SgvaError::Format(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for (declared, (name, shape)) in header.tensors.iter().zip(&expected) {
        if declared.name != *name {
            return Err(SgvaError::Format(format!(
                "tensor order: expected `{name}`, found `{}`",
                declared.name
            )));
        }
        if declared.shape != *shape {
            return Err(SgvaError::validation(
                *name,
                format!("declared shape {:?} disagrees with dims {:?}", declared.shape, shape),
            ));
        }
    }

    let mut tensors = Vec::with_capacity(expected.len());
    for (name, [rows, cols]) in &expected {
        tensors.push(read_tensor(r, name, *rows, *cols)?);
    }
    expect_eof(r)?;

    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    let features = next();
    let class_embeddings = next();
    let phi = next();
    let text = match (header.text, stub_shape) {
        (TextHeader::Stub { seed, .. }, Some(shape)) => {
            let w_in = next();
            let b_in = next();
            let w_out = next();
            let handcrafted = next();
            let psi = next();
            TextPath::Stub(FrozenTextEncoder::from_tensors(
                seed,
                shape,
                w_in,
                b_in,
                w_out,
                handcrafted,
                psi,
            )?)
        }
        (TextHeader::Precomputed { prompt }, _) => TextPath::Precomputed {
            prompt,
            embeddings: next(),
        },
        _ => unreachable!("stub shape derived from stub header"),
    };
    EmbeddingBank::assemble(
        dims,
        header.samples,
        features,
        header.classes,
        class_embeddings,
        phi,
        text,
        header.tau1,
    )
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<EmbeddingBank> {
    let mut r = BufReader::new(File::open(path)?);
    read_bank(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embank::{generate_synthetic_bank, SyntheticBankSpec};

    fn small() -> EmbeddingBank {
        generate_synthetic_bank(&SyntheticBankSpec {
            n_classes: 6,
            samples_per_class: 4,
            ..SyntheticBankSpec::small()
        })
        .unwrap()
    }

    fn bytes(bank: &EmbeddingBank) -> Vec<u8> {
        let mut buf = Vec::new();
        write_bank(bank, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_identity_and_canonical() {
        let bank = small();
        let a = bytes(&bank);
        let back = read_bank(&mut a.as_slice()).unwrap();
        assert_eq!(back, bank);
        assert_eq!(bytes(&back), a);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let mut b = bytes(&small());
        let mut truncated = b.clone();
        truncated.truncate(b.len() - 3);
        assert!(matches!(read_bank(&mut truncated.as_slice()), Err(SgvaError::Format(_))));
        b[0] = b'X';
        assert!(matches!(read_bank(&mut b.as_slice()), Err(SgvaError::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = bytes(&small());
        b.push(0);
        assert!(matches!(read_bank(&mut b.as_slice()), Err(SgvaError::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let bank = small();
        let mut b = bytes(&bank);
        let header_len = u64::from_le_bytes(b[6..14].try_into().unwrap()) as usize;
        let first = 14 + header_len;
        b[first..first + 8].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(read_bank(&mut b.as_slice()), Err(SgvaError::Validation { .. })));
    }
}
