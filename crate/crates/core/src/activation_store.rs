// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation shards: the on-disk format for residual-stream activations,
//! batching over tokens, and a synthetic ground-truth dictionary generator.
//!
//! # Shard layout (little-endian)
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SAESHARD"
//! 8       4     version (u32, currently 1)
//! 12      4     n_samples (u32)
//! 16      4     n_tokens (u32, CLS + spatial patches)
//! 20      4     d_model (u32)
//! 24      4     layer_id (u32)
//! 28      1     sublayer tag (0 = resid_post, 1 = mlp_out)
//! 29      8     metadata length in bytes (u64)
//! 37      m     metadata, UTF-8 JSON: {"samples": [SampleMeta, ...]}
//! 37+m    4·N   payload, f32, row-major [n_samples, n_tokens, d_model]
//! ```
//!
//! Token 0 of every sample is CLS; the remaining tokens are the spatial
//! patches in row-major order over a `grid_rows × grid_cols` grid.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"SAESHARD";
pub const SHARD_VERSION: u32 = 1;
/// Fixed header size in bytes, excluding the metadata length prefix.
pub const SHARD_HEADER_LEN: usize = 29;

/// Which sublayer output the activations were captured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    ResidPost = 0,
    MlpOut = 1,
}

impl Sublayer {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::ResidPost),
            1 => Ok(Self::MlpOut),
            other => Err(Error::UnknownSublayer(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub n_samples: u32,
    pub n_tokens: u32,
    pub d_model: u32,
    pub layer_id: u32,
    pub sublayer: Sublayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// Per-sample metadata carried in the shard's JSON block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub class_label: i64,
    /// Presence of the spurious attribute (or the typographic attack).
    pub attribute_flag: bool,
    pub split_tag: Split,
    pub grid_rows: u16,
    pub grid_cols: u16,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaBlock {
    samples: Vec<SampleMeta>,
}

/// A validated shard held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub header: ShardHeader,
    /// `[n_samples, n_tokens, d_model]`
    pub activations: Array3<f32>,
    pub meta: Vec<SampleMeta>,
}

impl ActivationDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        layer_id: u32,
        sublayer: Sublayer,
        activations: Array3<f32>,
        meta: Vec<SampleMeta>,
    ) -> Result<Self> {
        let (n, t, d) = activations.dim();
        let header = ShardHeader {
            version: SHARD_VERSION,
            n_samples: to_u32(n, "n_samples")?,
            n_tokens: to_u32(t, "n_tokens")?,
            d_model: to_u32(d, "d_model")?,
            layer_id,
            sublayer,
        };
        let ds = Self {
            header,
            activations: activations.as_standard_layout().into_owned(),
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, d) = self.activations.dim();
        let h = &self.header;
        if (h.n_samples as usize, h.n_tokens as usize, h.d_model as usize) != (n, t, d) {
            return Err(Error::MetaInconsistent(format!(
                "header dims ({}, {}, {}) disagree with tensor ({n}, {t}, {d})",
                h.n_samples, h.n_tokens, h.d_model
            )));
        }
        if self.meta.len() != n {
            return Err(Error::MetaInconsistent(format!(
                "{} metadata records for {n} samples",
                self.meta.len()
            )));
        }
        let mut ids = HashSet::with_capacity(n);
        for m in &self.meta {
            let grid = m.grid_rows as usize * m.grid_cols as usize;
            if grid + 1 != t {
                return Err(Error::MetaInconsistent(format!(
                    "sample {}: grid {}x{} + CLS != {t} tokens",
                    m.sample_id, m.grid_rows, m.grid_cols
                )));
            }
            if !ids.insert(m.sample_id) {
                return Err(Error::MetaInconsistent(format!(
                    "duplicate sample_id {}",
                    m.sample_id
                )));
            }
        }
        check_finite(self.activations.iter().copied())
    }

    pub fn n_samples(&self) -> usize {
        self.activations.dim().0
    }

    pub fn n_tokens(&self) -> usize {
        self.activations.dim().1
    }

    pub fn d_model(&self) -> usize {
        self.activations.dim().2
    }

    pub fn layer(&self) -> usize {
        self.header.layer_id as usize
    }

    /// `(grid_rows, grid_cols)` of the first sample, or `None` when empty.
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.meta
            .first()
            .map(|m| (m.grid_rows as usize, m.grid_cols as usize))
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f32> {
        self.activations.index_axis(Axis(0), i)
    }

    pub fn token(&self, sample: usize, token: usize) -> ArrayView1<'_, f32> {
        self.activations.slice(s![sample, token, ..])
    }

    /// Every sample as an owned `[n_tokens, d_model]` matrix.
    pub fn samples(&self) -> Vec<Array2<f32>> {
        self.activations
            .outer_iter()
            .map(|a| a.to_owned())
            .collect()
    }

    /// Keeps the samples for which `keep` returns true, preserving order.
    pub fn subset(&self, mut keep: impl FnMut(&SampleMeta) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_samples())
            .filter(|&i| keep(&self.meta[i]))
            .collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let acts = self.activations.select(Axis(0), indices);
        let meta = indices.iter().map(|&i| self.meta[i].clone()).collect();
        Self::new(self.header.layer_id, self.header.sublayer, acts, meta)
    }

    /// Gathers the given `(sample, token)` rows into a `[rows, d_model]` matrix.
    pub fn gather(&self, rows: &[(usize, usize)]) -> Array2<f32> {
        let d = self.d_model();
        let mut out = Array2::zeros((rows.len(), d));
        for (mut dst, &(si, ti)) in out.outer_iter_mut().zip(rows) {
            dst.assign(&self.token(si, ti));
        }
        out
    }

    /// All tokens selected by `filter`, as rows.
    pub fn rows(&self, filter: TokenFilter) -> Array2<f32> {
        self.gather(&selected_rows(self, filter))
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}

pub(crate) fn check_finite(values: impl IntoIterator<Item = f32>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Serialises a dataset into the shard byte layout.
pub fn encode_shard(dataset: &ActivationDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let h = &dataset.header;
    let meta = serde_json::to_vec(&MetaBlock {
        samples: dataset.meta.clone(),
    })?;
    let payload_len = dataset.activations.len() * 4;
    let mut buf = Vec::with_capacity(SHARD_HEADER_LEN + 8 + meta.len() + payload_len);
    buf.extend_from_slice(SHARD_MAGIC);
    for v in [SHARD_VERSION, h.n_samples, h.n_tokens, h.d_model, h.layer_id] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(h.sublayer.tag());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for v in dataset.activations.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses and validates shard bytes.
pub fn decode_shard(bytes: &[u8]) -> Result<ActivationDataset> {
    if bytes.len() < SHARD_MAGIC.len() {
        return Err(Error::TruncatedHeader {
            needed: SHARD_HEADER_LEN + 8,
            available: bytes.len(),
        });
    }
    if &bytes[..8] != SHARD_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(SHARD_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < SHARD_HEADER_LEN + 8 {
        return Err(Error::TruncatedHeader {
            needed: SHARD_HEADER_LEN + 8,
            available: bytes.len(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != SHARD_VERSION {
        return Err(Error::VersionMismatch {
            expected: SHARD_VERSION,
            found: version,
        });
    }
    let header = ShardHeader {
        version,
        n_samples: u32_at(12),
        n_tokens: u32_at(16),
        d_model: u32_at(20),
        layer_id: u32_at(24),
        sublayer: Sublayer::from_tag(bytes[28])?,
    };
    let meta_len = u64::from_le_bytes(bytes[29..37].try_into().unwrap());
    let rest = &bytes[SHARD_HEADER_LEN + 8..];
    let meta_len = usize::try_from(meta_len)
        .ok()
        .filter(|&m| m <= rest.len())
        .ok_or(Error::TruncatedMeta {
            needed: meta_len as usize,
            available: rest.len(),
        })?;
    let block: MetaBlock = serde_json::from_slice(&rest[..meta_len])?;
    let payload = &rest[meta_len..];

    let (n, t, d) = (
        header.n_samples as usize,
        header.n_tokens as usize,
        header.d_model as usize,
    );
    let expected = n
        .checked_mul(t)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::MetaInconsistent("header dims overflow".into()))?;
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
    let activations = Array3::from_shape_vec((n, t, d), values)
        .map_err(|e| Error::shape(e.to_string()))?;
    let ds = ActivationDataset {
        header,
        activations,
        meta: block.samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `dataset` to `path`; returns the number of bytes written.
///
/// Non-finite activations are rejected before anything touches the disk.
pub fn write_shard(dataset: &ActivationDataset, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = encode_shard(dataset)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes)
}

/// Which tokens of each sample take part in an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFilter {
    #[default]
    All,
    ClsOnly,
    SpatialOnly,
}

impl TokenFilter {
    pub fn keeps(self, token: usize) -> bool {
        match self {
            Self::All => true,
            Self::ClsOnly => token == 0,
            Self::SpatialOnly => token != 0,
        }
    }
}

/// `(sample, token)` pairs selected by `filter`, in sample-major order.
pub fn selected_rows(dataset: &ActivationDataset, filter: TokenFilter) -> Vec<(usize, usize)> {
    let t = dataset.n_tokens();
    (0..dataset.n_samples())
        .flat_map(|s| (0..t).filter(move |&k| filter.keeps(k)).map(move |k| (s, k)))
        .collect()
}

/// One epoch over the selected token rows, in seeded random order.
pub struct Batches<'a> {
    dataset: &'a ActivationDataset,
    order: Vec<(usize, usize)>,
    batch_size: usize,
    cursor: usize,
}

impl Batches<'_> {
    pub fn total_rows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for Batches<'_> {
    type Item = Array2<f32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Deterministic token batches; the final partial batch is emitted.
pub fn iterate_batches(
    dataset: &ActivationDataset,
    batch_size: usize,
    shuffle_seed: u64,
    token_filter: TokenFilter,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order = selected_rows(dataset, token_filter);
    if order.is_empty() {
        return Err(Error::EmptySelection(format!(
            "filter {token_filter:?} selects no tokens from {} samples x {} tokens",
            dataset.n_samples(),
            dataset.n_tokens()
        )));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Ground truth behind a synthetic dictionary dataset.
#[derive(Debug, Clone)]
pub struct GroundTruthDictionary {
    /// `[n_true_features, d_model]`, unit-norm rows.
    pub atoms: Array2<f32>,
    /// Active `(atom, coefficient)` pairs per token, indexed `sample * n_tokens + token`.
    pub codes: Vec<Vec<(usize, f32)>>,
    pub noise_sigma: f32,
}

impl GroundTruthDictionary {
    /// Samples whose tokens use `atom` at least once.
    pub fn samples_using(&self, atom: usize, n_tokens: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .codes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.iter().any(|&(a, _)| a == atom))
            .map(|(i, _)| i / n_tokens)
            .collect();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthDictSpec {
    pub n_true_features: usize,
    pub d_model: usize,
    pub tokens_per_sample: usize,
    pub n_samples: usize,
    pub active_per_token: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

/// Near-square `rows × cols` layout holding `spatial` patches.
pub fn grid_for(spatial: usize) -> (u16, u16) {
    if spatial == 0 {
        return (0, 0);
    }
    let mut rows = (spatial as f64).sqrt() as usize;
    while !spatial.is_multiple_of(rows) {
        rows -= 1;
    }
    (rows as u16, (spatial / rows) as u16)
}

pub(crate) fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f32> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.sample::<f32, _>(StandardNormal));
    for mut row in m.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

/// Tokens built as sparse nonnegative combinations of random unit atoms.
///
/// Every token sums `active_per_token` distinct atoms with coefficients in
/// `[0.5, 1.5]`, plus isotropic Gaussian noise of scale `noise_sigma`.
pub fn synth_dictionary_dataset(
    spec: &SynthDictSpec,
) -> Result<(ActivationDataset, GroundTruthDictionary)> {
    if spec.d_model < 2 {
        return Err(Error::invalid("d_model must be at least 2"));
    }
    if spec.active_per_token > spec.n_true_features {
        return Err(Error::invalid(format!(
            "active_per_token {} exceeds n_true_features {}",
            spec.active_per_token, spec.n_true_features
        )));
    }
    if spec.tokens_per_sample == 0 {
        return Err(Error::invalid("tokens_per_sample must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let atoms = random_unit_rows(&mut rng, spec.n_true_features, spec.d_model);
    let (n, t, d) = (spec.n_samples, spec.tokens_per_sample, spec.d_model);
    let mut acts = Array3::<f32>::zeros((n, t, d));
    let mut codes = Vec::with_capacity(n * t);
    for si in 0..n {
        for ti in 0..t {
            let chosen =
                rand::seq::index::sample(&mut rng, spec.n_true_features, spec.active_per_token);
            let mut code: Vec<(usize, f32)> = chosen
                .into_iter()
                .map(|a| (a, rng.random_range(0.5f32..=1.5)))
                .collect();
            code.sort_unstable_by_key(|&(a, _)| a);
            let mut tok = acts.slice_mut(s![si, ti, ..]);
            for &(a, c) in &code {
                tok.scaled_add(c, &atoms.row(a));
            }
            if spec.noise_sigma > 0.0 {
                for v in tok.iter_mut() {
                    *v += spec.noise_sigma * rng.sample::<f32, _>(StandardNormal);
                }
            }
            codes.push(code);
        }
    }
    let (grid_rows, grid_cols) = grid_for(t - 1);
    let meta = (0..n)
        .map(|i| SampleMeta {
            sample_id: i as u64,
            class_label: 0,
            attribute_flag: false,
            split_tag: Split::Train,
            grid_rows,
            grid_cols,
        })
        .collect();
    let ds = ActivationDataset::new(0, Sublayer::ResidPost, acts, meta)?;
    Ok((
        ds,
        GroundTruthDictionary {
            atoms,
            codes,
            noise_sigma: spec.noise_sigma,
        },
    ))
}
