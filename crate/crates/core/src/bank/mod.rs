//! Per-(class, scale) memory banks of real patches.
//!
//! A bank keeps every patch of one class at one scale together with the
//! centering mean used by the cosine distance. Large banks (at or above the
//! PCA threshold) additionally carry a PCA model for the coarse search space
//! and store their vectors 8-bit quantized.

mod pca;
mod quant;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use pca::{PcaModel, DEFAULT_PCA_DIM};
pub use quant::QuantParams;

use crate::error::{Error, Result};
use crate::imaging::{extract_patches, Image, LabelMaskSet, ScaleSpec, DEFAULT_COVERAGE};

/// Banks at or above this many vectors are PCA-reduced and quantized.
pub const DEFAULT_PCA_THRESHOLD: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Raw(Vec<f32>),
    Quantized { params: QuantParams, codes: Vec<u8> },
}

#[derive(Debug, Clone)]
pub struct BankOptions {
    pub coverage_threshold: f64,
    pub pca_threshold: usize,
    /// Retained PCA components; `None` means `min(64, dim)`.
    pub pca_dim: Option<usize>,
    pub force_pca: bool,
    pub force_quantize: bool,
}

impl Default for BankOptions {
    fn default() -> Self {
        Self {
            coverage_threshold: DEFAULT_COVERAGE,
            pca_threshold: DEFAULT_PCA_THRESHOLD,
            pca_dim: None,
            force_pca: false,
            force_quantize: false,
        }
    }
}

/// Immutable set of real patches for one class at one scale.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    class_id: u32,
    scale: ScaleSpec,
    dim: usize,
    count: usize,
    mean: Vec<f32>,
    storage: Storage,
    pca: Option<PcaModel>,
    // Derived on construction.
    mean64: Vec<f64>,
    centered_norms: Vec<f64>,
    fingerprint: u32,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.class_id == other.class_id
            && self.scale == other.scale
            && self.dim == other.dim
            && self.count == other.count
            && self
                .mean
                .iter()
                .map(|m| m.to_bits())
                .eq(other.mean.iter().map(|m| m.to_bits()))
            && self.storage == other.storage
            && self.pca == other.pca
    }
}

impl MemoryBank {
    /// Assembles a bank from already-built parts, validating shapes.
    pub fn from_parts(
        class_id: u32,
        scale: ScaleSpec,
        mean: Vec<f32>,
        storage: Storage,
        pca: Option<PcaModel>,
    ) -> Result<Self> {
        let dim = scale.dim();
        if mean.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: mean.len(),
            });
        }
        let len = match &storage {
            Storage::Raw(v) => v.len(),
            Storage::Quantized { params, codes } => {
                if params.dim() != dim || params.hi.len() != dim {
                    return Err(Error::invalid("quantizer dimension does not match bank"));
                }
                codes.len()
            }
        };
        if len == 0 || len % dim != 0 {
            return Err(Error::invalid("a bank needs at least one whole vector"));
        }
        if let Some(p) = &pca {
            if p.input_dim != dim
                || p.output_dim == 0
                || p.output_dim > dim
                || p.components.len() != p.output_dim * dim
                || p.mean.len() != dim
            {
                return Err(Error::invalid("pca model does not match bank"));
            }
        }
        let mut bank = Self {
            class_id,
            scale,
            dim,
            count: len / dim,
            mean64: mean.iter().map(|&m| f64::from(m)).collect(),
            mean,
            storage,
            pca,
            centered_norms: Vec::new(),
            fingerprint: 0,
        };
        let mut buf = vec![0.0; dim];
        bank.centered_norms = (0..bank.count)
            .map(|i| {
                bank.centered_into(i, &mut buf);
                norm(&buf)
            })
            .collect();
        bank.fingerprint = bank.compute_fingerprint();
        Ok(bank)
    }

    /// Builds a bank from raw row-major vectors, computing the mean first and
    /// then applying PCA and quantization as requested.
    pub fn from_vectors(
        class_id: u32,
        scale: ScaleSpec,
        vectors: Vec<f32>,
        pca_dim: Option<usize>,
        quantize: bool,
    ) -> Result<Self> {
        let dim = scale.dim();
        if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(Error::invalid("a bank needs at least one whole vector"));
        }
        let mean = mean_of(&vectors, dim);
        let pca = pca_dim
            .map(|out| PcaModel::fit(&vectors, &mean, out))
            .transpose()?;
        let storage = if quantize {
            let params = QuantParams::fit(&vectors, dim);
            let mut codes = Vec::with_capacity(vectors.len());
            for row in vectors.chunks_exact(dim) {
                params.quantize_into(row, &mut codes);
            }
            Storage::Quantized { params, codes }
        } else {
            Storage::Raw(vectors)
        };
        Self::from_parts(class_id, scale, mean, storage, pca)
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn scale(&self) -> ScaleSpec {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.storage, Storage::Quantized { .. })
    }

    /// Checksum of the bank contents; indexes record it to bind themselves
    /// to the bank they were trained on.
    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    /// Writes the stored (dequantized) vector `i`.
    pub fn vector_into(&self, i: usize, out: &mut [f64]) {
        let range = i * self.dim..(i + 1) * self.dim;
        match &self.storage {
            Storage::Raw(v) => {
                for (o, &x) in out.iter_mut().zip(&v[range]) {
                    *o = f64::from(x);
                }
            }
            Storage::Quantized { params, codes } => {
                for (d, (o, &c)) in out.iter_mut().zip(&codes[range]).enumerate() {
                    *o = f64::from(params.dequantize_one(d, c));
                }
            }
        }
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.vector_into(i, &mut out);
        out
    }

    /// Stored vector `i` minus the bank mean.
    pub fn centered_into(&self, i: usize, out: &mut [f64]) {
        self.vector_into(i, out);
        for (o, m) in out.iter_mut().zip(&self.mean64) {
            *o -= m;
        }
    }

    pub fn centered_norm(&self, i: usize) -> f64 {
        self.centered_norms[i]
    }

    /// Dot product of a centered query with centered bank vector `i`.
    pub fn centered_dot(&self, i: usize, query: &[f64]) -> f64 {
        let range = i * self.dim..(i + 1) * self.dim;
        match &self.storage {
            Storage::Raw(v) => v[range]
                .iter()
                .zip(&self.mean64)
                .zip(query)
                .map(|((&b, m), q)| (f64::from(b) - m) * q)
                .sum(),
            Storage::Quantized { params, codes } => codes[range]
                .iter()
                .enumerate()
                .zip(&self.mean64)
                .zip(query)
                .map(|(((d, &c), m), q)| (f64::from(params.dequantize_one(d, c)) - m) * q)
                .sum(),
        }
    }

    /// Subtracts the bank mean from a raw patch vector.
    pub fn center(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean64).map(|(x, m)| x - m).collect()
    }

    /// Maps a centered vector into the coarse search space: PCA projection
    /// when present, then unit normalization (zero stays zero).
    pub fn search_vector(&self, centered: &[f64]) -> Vec<f64> {
        let mut v = match &self.pca {
            Some(p) => p.project_centered(centered),
            None => centered.to_vec(),
        };
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    pub fn search_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.dim, |p| p.output_dim)
    }

    fn compute_fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.class_id.to_le_bytes());
        h.update(&(self.scale.patch_size as u64).to_le_bytes());
        h.update(&(self.scale.stride as u64).to_le_bytes());
        h.update(&(self.count as u64).to_le_bytes());
        for m in &self.mean {
            h.update(&m.to_le_bytes());
        }
        match &self.storage {
            Storage::Raw(v) => v.iter().for_each(|x| h.update(&x.to_le_bytes())),
            Storage::Quantized { params, codes } => {
                params
                    .lo
                    .iter()
                    .chain(&params.hi)
                    .for_each(|x| h.update(&x.to_le_bytes()));
                h.update(codes);
            }
        }
        if let Some(p) = &self.pca {
            p.components.iter().for_each(|x| h.update(&x.to_le_bytes()));
        }
        h.finalize()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Arithmetic mean of row-major `vectors`, accumulated in `f64`.
pub fn mean_of(vectors: &[f32], dim: usize) -> Vec<f32> {
    let n = (vectors.len() / dim) as f64;
    let mut acc = vec![0.0f64; dim];
    for row in vectors.chunks_exact(dim) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Builds one bank per class observed in `corpus` at `scale`, including the
/// background. Classes without patches are absent from the result.
pub fn build_banks(
    corpus: &[(Image, LabelMaskSet)],
    scale: ScaleSpec,
    opts: &BankOptions,
) -> Result<BTreeMap<u32, MemoryBank>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build banks from an empty corpus"));
    }
    let patch_sets = corpus
        .par_iter()
        .map(|(img, masks)| extract_patches(img, masks, scale, opts.coverage_threshold))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
    for set in &patch_sets {
        for patch in &set.entries {
            for &c in &patch.classes {
                grouped
                    .entry(c)
                    .or_default()
                    .extend(patch.vector.iter().map(|&v| v as f32));
            }
        }
    }

    let dim = scale.dim();
    grouped
        .into_par_iter()
        .map(|(class_id, vectors)| {
            let large = vectors.len() / dim >= opts.pca_threshold;
            let pca_dim =
                (large || opts.force_pca).then(|| opts.pca_dim.unwrap_or(DEFAULT_PCA_DIM).min(dim));
            let quantize = large || opts.force_quantize;
            MemoryBank::from_vectors(class_id, scale, vectors, pca_dim, quantize)
                .map(|b| (class_id, b))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}
