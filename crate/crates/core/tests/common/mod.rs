//! Fixtures and reference implementations shared by the integration tests.
//!
//! The oracles here recompute everything from raw pixels and raw bank
//! vectors with straightforward loops; they deliberately avoid the library's
//! patch extraction, search and loss code paths.

#![allow(dead_code)]

use a2r_core::bank::MemoryBank;
use a2r_core::imaging::{Image, LabelMaskSet, ScaleSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform pixels in `[lo, hi]`.
pub fn random_image(seed: u64, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    let mut r = rng(seed);
    let data = (0..w * h * 3)
        .map(|_| lo + (hi - lo) * r.random::<f64>())
        .collect();
    Image::new(w, h, data).unwrap()
}

/// A small landscape-like picture: a graded sky over textured ground,
/// quantized to 8 bits like a decoded photo.
pub fn photo(seed: u64, w: usize, h: usize) -> Image {
    let mut r = rng(seed);
    let horizon = h * 3 / 8;
    let mut bytes = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let px: [f64; 3] = if y < horizon {
                let t = y as f64 / horizon as f64;
                let cloud = if (x / 3 + y / 2) % 5 == 0 { 0.15 } else { 0.0 };
                [
                    0.35 + 0.25 * t + cloud,
                    0.55 + 0.2 * t + cloud,
                    0.9 - 0.1 * t + cloud * 0.5,
                ]
            } else {
                let stripe = ((x + 2 * y) % 4) as f64 / 4.0;
                let n: f64 = r.random::<f64>() * 0.25;
                [
                    0.2 + 0.3 * stripe + n,
                    0.45 + 0.2 * stripe + n * 0.5,
                    0.1 + 0.15 * n,
                ]
            };
            bytes.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Image::from_rgb8(w, h, &bytes).unwrap()
}

/// Sky (class 1) above the horizon, ground (class 2) below.
pub fn photo_masks(w: usize, h: usize) -> LabelMaskSet {
    let horizon = h * 3 / 8;
    let sky: Vec<bool> = (0..w * h).map(|i| i / w < horizon).collect();
    let ground: Vec<bool> = sky.iter().map(|s| !s).collect();
    LabelMaskSet::empty(w, h)
        .with_mask(1, sky)
        .unwrap()
        .with_mask(2, ground)
        .unwrap()
}

/// Left/right halves as classes 1 and 2.
pub fn halves(w: usize, h: usize) -> LabelMaskSet {
    let left: Vec<bool> = (0..w * h).map(|i| i % w < w / 2).collect();
    let right: Vec<bool> = left.iter().map(|b| !b).collect();
    LabelMaskSet::empty(w, h)
        .with_mask(1, left)
        .unwrap()
        .with_mask(2, right)
        .unwrap()
}

/// Reference patch extraction: `(vector, classes)` per window in row-major
/// grid order, labels from direct pixel counting.
pub fn oracle_patches(
    img: &Image,
    masks: &LabelMaskSet,
    scale: ScaleSpec,
    threshold: f64,
) -> Vec<(Vec<f64>, Vec<u32>)> {
    let (w, h) = (img.width(), img.height());
    let p = scale.patch_size;
    let mut out = Vec::new();
    let mut y = 0;
    while y + p <= h {
        let mut x = 0;
        while x + p <= w {
            let mut v = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        v.push(img.get(x + dx, y + dy, ch));
                    }
                }
            }
            let mut classes = Vec::new();
            for m in masks.masks() {
                let mut inside = 0usize;
                for dy in 0..p {
                    for dx in 0..p {
                        if m.bitmap[(y + dy) * w + x + dx] {
                            inside += 1;
                        }
                    }
                }
                if inside as f64 / (p * p) as f64 >= threshold - 1e-12 {
                    classes.push(m.class_id);
                }
            }
            if classes.is_empty() {
                classes.push(0);
            }
            out.push((v, classes));
            x += scale.stride;
        }
        y += scale.stride;
    }
    out
}

fn centered_cos_distance(a: &[f64], b: &[f64], mu: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        let (x, y) = (a[i] - mu[i], b[i] - mu[i]);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Dense contextual loss of one class: full distance matrix against every
/// bank vector, softmax written as `exp(1 - d̃/h)`.
pub fn dense_class_loss(queries: &[Vec<f64>], bank: &MemoryBank, h: f64) -> f64 {
    let mu: Vec<f64> = bank.mean().iter().map(|&m| f64::from(m)).collect();
    let vectors: Vec<Vec<f64>> = (0..bank.len()).map(|i| bank.vector(i)).collect();
    let mut sum_max = 0.0;
    for q in queries {
        let d: Vec<f64> = vectors
            .iter()
            .map(|b| centered_cos_distance(q, b, &mu))
            .collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let dn: Vec<f64> = d.iter().map(|x| x / (min + 1e-5)).collect();
        // Shift by the largest exponent to stay finite; the softmax is unchanged.
        let top = dn
            .iter()
            .map(|x| 1.0 - x / h)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = dn.iter().map(|x| (1.0 - x / h - top).exp()).collect();
        let z: f64 = e.iter().sum();
        sum_max += e.iter().copied().fold(0.0, f64::max) / z;
    }
    -(sum_max / queries.len() as f64).ln()
}

/// Dense per-scale loss: sum of class losses over the classes carried by
/// the image's patches.
pub fn dense_scale_loss(
    img: &Image,
    masks: &LabelMaskSet,
    scale: ScaleSpec,
    bank_for: impl Fn(u32) -> MemoryBank,
    h: f64,
) -> f64 {
    let patches = oracle_patches(img, masks, scale, 0.2);
    let mut classes: Vec<u32> = patches.iter().flat_map(|(_, c)| c.clone()).collect();
    classes.sort();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let queries: Vec<Vec<f64>> = patches
                .iter()
                .filter(|(_, cs)| cs.contains(&c))
                .map(|(v, _)| v.clone())
                .collect();
            dense_class_loss(&queries, &bank_for(c), h)
        })
        .sum()
}

/// Exhaustive k-NN by centered cosine distance, ties by lower id.
pub fn oracle_knn(bank: &MemoryBank, query: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mu: Vec<f64> = bank.mean().iter().map(|&m| f64::from(m)).collect();
    let mut all: Vec<(u32, f64)> = (0..bank.len())
        .map(|i| (i as u32, centered_cos_distance(query, &bank.vector(i), &mu)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
