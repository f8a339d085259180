//! Semantically-aware multi-scale contextual loss over sparse k-NN candidates.
//!
//! For every scale and every class carried by the generated image's patches:
//!
//! 1. each generated patch is centered by the class bank mean and its `k`
//!    nearest bank patches are retrieved (centered cosine distance `d`);
//! 2. distances are divided by the row minimum plus `EPSILON`;
//! 3. a row-wise softmax of `(1 - d̃) / h` gives the affinities `A`;
//! 4. the class loss is `-ln(mean_i max_j A_ij)`.
//!
//! Class losses add up per scale and scale losses add up to the total.
//! [`cx_loss_gradient`] differentiates the whole chain with respect to the
//! image pixels, holding each row's candidate set fixed.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ann::{self, AnnIndex, Neighbors, Probe, DEFAULT_K};
use crate::bank::{norm, MemoryBank};
use crate::error::{Error, Result};
use crate::imaging::{extract_patches, Image, LabelMaskSet, PatchSet, ScaleSpec, DEFAULT_COVERAGE};

/// Added to the row minimum before normalizing distances.
pub const EPSILON: f64 = 1e-5;
pub const DEFAULT_BANDWIDTH: f64 = 0.5;

/// Cosine similarity from a dot product and the two norms. A zero-norm side
/// gives similarity 0 (distance 1).
#[inline]
pub fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
    }
}

/// `1 - cos(q, b)` for vectors already centered by the bank mean.
pub fn cosine_distance(q: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = q.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - cosine_from_parts(dot, norm(q), norm(b))
}

/// Divides each distance by `min(row) + EPSILON`.
pub fn normalize_distances(row: &[f64]) -> Vec<f64> {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let denom = min + EPSILON;
    row.iter().map(|d| d / denom).collect()
}

/// Row softmax of `(1 - d̃) / h`, computed with max subtraction.
pub fn affinities(normalized: &[f64], h: f64) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {h}"
        )));
    }
    let logits: Vec<f64> = normalized.iter().map(|d| (1.0 - d) / h).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Affinity row of one generated patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRow {
    /// Position of the generated patch in the scale's patch set.
    pub patch: usize,
    pub ids: Vec<u32>,
    pub distances: Vec<f64>,
    pub normalized: Vec<f64>,
    pub affinities: Vec<f64>,
    /// Position (within the row) of the largest affinity; first on ties.
    pub argmax: usize,
}

impl AffinityRow {
    pub fn from_neighbors(patch: usize, nn: Neighbors, h: f64) -> Result<Self> {
        if nn.is_empty() {
            return Err(Error::invalid("affinity row needs at least one candidate"));
        }
        let normalized = normalize_distances(&nn.distances);
        let affinities = affinities(&normalized, h)?;
        let argmax = first_extreme(&affinities, |a, b| a > b);
        Ok(Self {
            patch,
            ids: nn.ids,
            distances: nn.distances,
            normalized,
            affinities,
            argmax,
        })
    }

    pub fn max_affinity(&self) -> f64 {
        self.affinities[self.argmax]
    }

    /// Position of the smallest distance; first on ties.
    pub fn argmin(&self) -> usize {
        first_extreme(&self.distances, |a, b| a < b)
    }
}

fn first_extreme(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}

/// All rows of one class at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRows {
    pub scale: ScaleSpec,
    pub class_id: u32,
    pub h: f64,
    pub rows: Vec<AffinityRow>,
}

/// `-ln(mean of row maxima)`.
pub fn loss_from_row_maxima(maxima: &[f64]) -> f64 {
    let n = maxima.len() as f64;
    let mean = maxima.iter().sum::<f64>() / n;
    // Guard -0.0 when every maximum is exactly 1.
    (-mean.ln()).max(0.0)
}

pub fn class_cx_loss(rows: &AffinityRows) -> f64 {
    let maxima: Vec<f64> = rows.rows.iter().map(AffinityRow::max_affinity).collect();
    loss_from_row_maxima(&maxima)
}

/// Sum of class losses; classes without rows contribute nothing.
pub fn image_cx_loss(per_class: &[AffinityRows]) -> f64 {
    per_class
        .iter()
        .filter(|r| !r.rows.is_empty())
        .map(class_cx_loss)
        .sum()
}

/// A memory bank with its trained index.
#[derive(Debug, Clone)]
pub struct IndexedBank {
    pub bank: MemoryBank,
    pub index: AnnIndex,
}

impl IndexedBank {
    /// Trains an index with the default list count.
    pub fn with_default_index(bank: MemoryBank, seed: u64) -> Result<Self> {
        let index = ann::train_index(&bank, ann::default_n_list(bank.len()), seed)?;
        Ok(Self { bank, index })
    }
}

/// Banks keyed by (scale, class).
#[derive(Debug, Clone, Default)]
pub struct BankSet {
    banks: BTreeMap<(ScaleSpec, u32), IndexedBank>,
}

impl BankSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: IndexedBank) {
        let key = (entry.bank.scale(), entry.bank.class_id());
        self.banks.insert(key, entry);
    }

    pub fn get(&self, scale: ScaleSpec, class_id: u32) -> Option<&IndexedBank> {
        self.banks.get(&(scale, class_id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &IndexedBank> {
        self.banks.values()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn scales(&self) -> Vec<ScaleSpec> {
        let mut s: Vec<ScaleSpec> = self.banks.keys().map(|k| k.0).collect();
        s.dedup();
        s
    }

    /// Builds banks for every scale from `corpus` and indexes them with the
    /// default list count.
    pub fn build(
        corpus: &[(Image, LabelMaskSet)],
        scales: &[ScaleSpec],
        opts: &crate::bank::BankOptions,
        seed: u64,
    ) -> Result<Self> {
        let mut set = Self::new();
        for &scale in scales {
            for (_, bank) in crate::bank::build_banks(corpus, scale, opts)? {
                set.insert(IndexedBank::with_default_index(bank, seed)?);
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct CxConfig {
    pub scales: Vec<ScaleSpec>,
    pub h: f64,
    pub k: usize,
    pub probe: Probe,
    pub coverage_threshold: f64,
    /// Treat the row minimum in the distance normalization as a constant.
    pub stop_grad_min: bool,
    /// Use every bank vector as a candidate (full affinity matrix).
    pub dense: bool,
}

impl Default for CxConfig {
    fn default() -> Self {
        Self {
            scales: ScaleSpec::defaults(),
            h: DEFAULT_BANDWIDTH,
            k: DEFAULT_K,
            probe: Probe::Default,
            coverage_threshold: DEFAULT_COVERAGE,
            stop_grad_min: false,
            dense: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTerm {
    pub scale: ScaleSpec,
    pub class_id: u32,
    pub loss: f64,
    /// Number of generated patches of this class.
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CxLossReport {
    pub terms: Vec<ClassTerm>,
    pub per_scale: Vec<(ScaleSpec, f64)>,
    pub total: f64,
    /// Same layout as the image data when requested.
    pub gradient: Option<Vec<f64>>,
    pub rows: Vec<AffinityRows>,
}

impl CxLossReport {
    pub fn scale_loss(&self, scale: ScaleSpec) -> Option<f64> {
        self.per_scale
            .iter()
            .find(|(s, _)| *s == scale)
            .map(|(_, l)| *l)
    }
}

fn validate(cfg: &CxConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if cfg.scales.is_empty() {
        return Err(Error::invalid("at least one scale is required"));
    }
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {}",
            cfg.h
        )));
    }
    Ok(())
}

/// Per-class rows at one scale, in ascending class order.
fn scale_rows<'b>(
    patches: &PatchSet,
    banks: &'b BankSet,
    cfg: &CxConfig,
) -> Result<Vec<(&'b IndexedBank, AffinityRows)>> {
    let scale = patches.scale;
    patches
        .classes()
        .into_iter()
        .map(|class_id| {
            let entry = banks
                .get(scale, class_id)
                .ok_or_else(|| Error::MissingBank {
                    class_id,
                    scale: scale.to_string(),
                })?;
            let rows = patches
                .indices_of(class_id)
                .into_par_iter()
                .map(|p| {
                    let q = &patches.entries[p].vector;
                    let nn = if cfg.dense {
                        ann::brute_force(&entry.bank, q, entry.bank.len())?
                    } else {
                        ann::search_one(&entry.index, &entry.bank, q, cfg.k, cfg.probe)?
                    };
                    AffinityRow::from_neighbors(p, nn, cfg.h)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                entry,
                AffinityRows {
                    scale,
                    class_id,
                    h: cfg.h,
                    rows,
                },
            ))
        })
        .collect()
}

/// Gradient of the class loss with respect to one generated patch vector.
///
/// `sum_max` is the sum of row maxima over the class.
fn row_gradient(
    row: &AffinityRow,
    query: &[f64],
    bank: &MemoryBank,
    h: f64,
    sum_max: f64,
    stop_grad_min: bool,
) -> Vec<f64> {
    let dim = query.len();
    let mut grad = vec![0.0; dim];
    let q = bank.center(query);
    let qn = norm(&q);
    if qn == 0.0 {
        return grad;
    }

    let n = row.ids.len();
    let a_star = row.max_affinity();
    // dL/dd̃_j
    let g_norm: Vec<f64> = (0..n)
        .map(|j| {
            let delta = if j == row.argmax { 1.0 } else { 0.0 };
            a_star * (delta - row.affinities[j]) / (h * sum_max)
        })
        .collect();

    let jmin = row.argmin();
    let denom = row.distances[jmin] + EPSILON;
    let mut g_dist: Vec<f64> = g_norm.iter().map(|g| g / denom).collect();
    if !stop_grad_min {
        let through_min: f64 = g_norm
            .iter()
            .zip(&row.distances)
            .map(|(g, d)| -g * d / (denom * denom))
            .sum();
        g_dist[jmin] += through_min;
    }

    // d(d_j)/dq = -(b_j / (|q||b_j|) - cos_j q / |q|^2)
    let mut b = vec![0.0; dim];
    for (j, &id) in row.ids.iter().enumerate() {
        let id = id as usize;
        let bn = bank.centered_norm(id);
        if bn == 0.0 || g_dist[j] == 0.0 {
            continue;
        }
        bank.centered_into(id, &mut b);
        let dot: f64 = q.iter().zip(&b).map(|(x, y)| x * y).sum();
        let cos = dot / (qn * bn);
        let gb = -g_dist[j] / (qn * bn);
        let gq = g_dist[j] * cos / (qn * qn);
        for ((g, bv), qv) in grad.iter_mut().zip(&b).zip(&q) {
            *g += gb * bv + gq * qv;
        }
    }
    grad
}

fn scatter_patch(grad: &mut [f64], width: usize, x: usize, y: usize, size: usize, g: &[f64]) {
    for dy in 0..size {
        let start = ((y + dy) * width + x) * 3;
        for (dst, src) in grad[start..start + 3 * size]
            .iter_mut()
            .zip(&g[dy * 3 * size..(dy + 1) * 3 * size])
        {
            *dst += src;
        }
    }
}

fn evaluate(
    image: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cfg: &CxConfig,
    with_gradient: bool,
) -> Result<CxLossReport> {
    validate(cfg)?;
    let mut terms = Vec::new();
    let mut per_scale = Vec::new();
    let mut all_rows = Vec::new();
    let mut gradient = with_gradient.then(|| vec![0.0; image.data().len()]);

    for &scale in &cfg.scales {
        let patches = extract_patches(image, masks, scale, cfg.coverage_threshold)?;
        let mut scale_loss = 0.0;
        for (entry, rows) in scale_rows(&patches, banks, cfg)? {
            let maxima: Vec<f64> = rows.rows.iter().map(AffinityRow::max_affinity).collect();
            let loss = loss_from_row_maxima(&maxima);
            scale_loss += loss;
            terms.push(ClassTerm {
                scale,
                class_id: rows.class_id,
                loss,
                patches: rows.rows.len(),
            });

            if let Some(grad) = gradient.as_mut() {
                let sum_max: f64 = maxima.iter().sum();
                let per_row: Vec<Vec<f64>> = rows
                    .rows
                    .par_iter()
                    .map(|row| {
                        row_gradient(
                            row,
                            &patches.entries[row.patch].vector,
                            &entry.bank,
                            cfg.h,
                            sum_max,
                            cfg.stop_grad_min,
                        )
                    })
                    .collect();
                for (row, g) in rows.rows.iter().zip(&per_row) {
                    let p = &patches.entries[row.patch];
                    scatter_patch(grad, image.width(), p.x, p.y, scale.patch_size, g);
                }
            }
            all_rows.push(rows);
        }
        per_scale.push((scale, scale_loss));
    }

    let total = per_scale.iter().map(|(_, l)| l).sum();
    Ok(CxLossReport {
        terms,
        per_scale,
        total,
        gradient,
        rows: all_rows,
    })
}

/// Multi-scale contextual loss of `image` against `banks`.
pub fn multiscale_cx_loss(
    image: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cfg: &CxConfig,
) -> Result<CxLossReport> {
    evaluate(image, banks, masks, cfg, false)
}

/// Loss plus its analytic gradient with respect to every pixel channel.
pub fn cx_loss_gradient(
    image: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cfg: &CxConfig,
) -> Result<CxLossReport> {
    evaluate(image, banks, masks, cfg, true)
}
