// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot head over a library of unit-norm concept embeddings.
//!
//! Head file layout (little-endian):
//!
//! ```text
//! magic "SAEHEAD1" | n_vocab u32 | d_out u32 | logit_scale f32 | meta_len u64
//! | meta JSON {"names": [...], "template": "..."} | n_vocab·d_out f32
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::activation_store::check_finite;
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 8] = b"SAEHEAD1";
const HEAD_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;
const NORM_TOLERANCE: f32 = 1e-4;

pub const DEFAULT_LOGIT_SCALE: f32 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    names: Vec<String>,
    #[serde(default)]
    template: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyHead {
    /// `[n_vocab, d_out]`, unit rows.
    pub embeddings: Array2<f32>,
    pub logit_scale: f32,
    pub names: Vec<String>,
    /// Prompt template the embeddings were produced with, if any.
    pub template: String,
}

impl VocabularyHead {
    /// Builds a head, normalising rows. Zero rows and duplicate names are
    /// rejected.
    pub fn new(mut embeddings: Array2<f32>, names: Vec<String>, logit_scale: f32) -> Result<Self> {
        check_finite(embeddings.iter().copied())?;
        for (i, mut row) in embeddings.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("embedding {i} is zero")));
            }
            row /= norm;
        }
        Self::from_unit_rows(embeddings, names, logit_scale)
    }

    /// Takes rows as given; callers have already normalised them.
    fn from_unit_rows(embeddings: Array2<f32>, names: Vec<String>, logit_scale: f32) -> Result<Self> {
        if embeddings.nrows() < 2 {
            return Err(Error::invalid("a head needs at least two concepts"));
        }
        if names.len() != embeddings.nrows() {
            return Err(Error::shape(format!(
                "{} names for {} embeddings",
                names.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate concept name {dup:?}")));
        }
        if !logit_scale.is_finite() || logit_scale < 0.0 {
            return Err(Error::invalid("logit_scale must be finite and non-negative"));
        }
        Ok(Self {
            embeddings,
            logit_scale,
            names,
            template: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn d_out(&self) -> usize {
        self.embeddings.ncols()
    }

    /// `softmax(logit_scale · cos(embedding, t_v))` over the vocabulary.
    pub fn zero_shot_probs(&self, embedding: ArrayView1<'_, f32>) -> Result<Array1<f64>> {
        if embedding.len() != self.d_out() {
            return Err(Error::shape(format!(
                "embedding width {} != head width {}",
                embedding.len(),
                self.d_out()
            )));
        }
        let e = embedding.mapv(f64::from);
        let norm = e.dot(&e).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate("zero or non-finite embedding".into()));
        }
        let scale = f64::from(self.logit_scale) / norm;
        let logits: Vec<f64> = self
            .embeddings
            .outer_iter()
            .map(|t| scale * t.iter().zip(e.iter()).map(|(&a, &b)| f64::from(a) * b).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = Array1::from_iter(logits.iter().map(|l| (l - max).exp()));
        let z = p.sum();
        p /= z;
        Ok(p)
    }

    /// Index of the most probable concept.
    pub fn predict(&self, embedding: ArrayView1<'_, f32>) -> Result<usize> {
        let p = self.zero_shot_probs(embedding)?;
        Ok(argmax(p.view()))
    }

    /// Sub-head over the given concept indices, in that order.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "concept index {bad} out of range for {} concepts",
                self.len()
            )));
        }
        let embeddings = self.embeddings.select(ndarray::Axis(0), indices);
        let names = indices.iter().map(|&i| self.names[i].clone()).collect();
        let mut head = Self::from_unit_rows(embeddings, names, self.logit_scale)?;
        head.template = self.template.clone();
        Ok(head)
    }

    /// Mean concept vector `μ_V`.
    pub fn mean_embedding(&self) -> Array1<f32> {
        self.embeddings
            .mean_axis(ndarray::Axis(0))
            .expect("head is non-empty")
    }
}

pub(crate) fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn encode_head(head: &VocabularyHead) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&HeadMeta {
        names: head.names.clone(),
        template: head.template.clone(),
    })?;
    let mut buf = Vec::with_capacity(HEAD_HEADER_LEN + meta.len() + 4 * head.embeddings.len());
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(head.d_out() as u32).to_le_bytes());
    buf.extend_from_slice(&head.logit_scale.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for v in head.embeddings.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses a head file. Rows must already be unit-norm to within `1e-4`.
pub fn decode_head(bytes: &[u8]) -> Result<VocabularyHead> {
    if bytes.len() < 8 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(HEAD_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    if bytes.len() < HEAD_HEADER_LEN {
        return Err(Error::TruncatedHeader {
            needed: HEAD_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let scale = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let meta_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let rest = &bytes[HEAD_HEADER_LEN..];
    if rest.len() < meta_len {
        return Err(Error::TruncatedMeta {
            needed: meta_len,
            available: rest.len(),
        });
    }
    let meta: HeadMeta = serde_json::from_slice(&rest[..meta_len])?;
    if meta.names.len() != n {
        return Err(Error::MetaInconsistent(format!(
            "{} names for {n} rows",
            meta.names.len()
        )));
    }
    let payload = &rest[meta_len..];
    let expected = 4 * n * d;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let embeddings = Array2::from_shape_vec((n, d), values).map_err(|e| Error::shape(e.to_string()))?;
    check_finite(embeddings.iter().copied())?;
    for (i, row) in embeddings.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::MetaInconsistent(format!(
                "row {i} has norm {norm}, expected unit rows"
            )));
        }
    }
    let mut head = VocabularyHead::from_unit_rows(embeddings, meta.names, scale)?;
    head.template = meta.template;
    Ok(head)
}

pub fn write_head(head: &VocabularyHead, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = encode_head(head)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_head(path: impl AsRef<Path>) -> Result<VocabularyHead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}
