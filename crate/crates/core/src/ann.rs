//! Inverted-file k-NN index over a memory bank.
//!
//! Vectors are centered by the bank mean, projected by the bank PCA (when
//! present) and unit-normalized to form the coarse search space, where a
//! seeded Lloyd k-means partitions them into `n_list` inverted lists. A query
//! probes its `nprobe` closest lists and every candidate found there is
//! re-ranked by the exact centered cosine distance against the stored
//! vectors. Probing every list is therefore identical to a brute-force scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::MemoryBank;
use crate::cxloss::cosine_from_parts;
use crate::error::{Error, Result};

pub const KMEANS_ITERATIONS: usize = 25;
pub const DEFAULT_K: usize = 5;

/// `ceil(sqrt(n))`.
pub fn default_n_list(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 1 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r.max(1)
}

pub fn default_nprobe(n_list: usize) -> usize {
    (n_list / 16).max(1)
}

/// How many inverted lists a query visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Probe {
    /// The index's own default.
    #[default]
    Default,
    All,
    Lists(usize),
}

impl Probe {
    pub fn resolve(self, index: &AnnIndex) -> usize {
        match self {
            Probe::Default => index.nprobe_default,
            Probe::All => index.n_list(),
            Probe::Lists(n) => n.clamp(1, index.n_list()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    pub(crate) search_dim: usize,
    /// `n_list × search_dim`, row-major.
    pub(crate) centroids: Vec<f32>,
    pub(crate) lists: Vec<Vec<u32>>,
    pub(crate) nprobe_default: usize,
    pub(crate) seed: u64,
    pub(crate) bank_ref: u32,
}

/// k nearest bank vectors for one query, ascending by distance then id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighbors {
    pub ids: Vec<u32>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl AnnIndex {
    pub(crate) fn from_parts(
        search_dim: usize,
        centroids: Vec<f32>,
        lists: Vec<Vec<u32>>,
        nprobe_default: usize,
        seed: u64,
        bank_ref: u32,
    ) -> Result<Self> {
        if lists.is_empty() || centroids.len() != lists.len() * search_dim {
            return Err(Error::invalid("index centroids do not match list count"));
        }
        let nprobe_default = nprobe_default.clamp(1, lists.len());
        Ok(Self {
            search_dim,
            centroids,
            lists,
            nprobe_default,
            seed,
            bank_ref,
        })
    }

    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.search_dim..(c + 1) * self.search_dim]
    }

    pub fn search_dim(&self) -> usize {
        self.search_dim
    }

    pub fn nprobe_default(&self) -> usize {
        self.nprobe_default
    }

    pub fn set_nprobe_default(&mut self, nprobe: usize) {
        self.nprobe_default = nprobe.clamp(1, self.lists.len());
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bank_ref(&self) -> u32 {
        self.bank_ref
    }

    /// Lists sorted by centroid distance to `v` (ties by list number).
    fn nearest_lists(&self, v: &[f64], n: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = (0..self.n_list())
            .map(|c| (sq_dist_f32(v, self.centroid(c)), c))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(n);
        d.into_iter().map(|(_, c)| c).collect()
    }
}

fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, &y)| {
            let d = x - f64::from(y);
            d * d
        })
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Search-space image of every bank vector.
fn search_space(bank: &MemoryBank) -> Vec<Vec<f64>> {
    (0..bank.len())
        .into_par_iter()
        .map(|i| {
            let mut c = vec![0.0; bank.dim()];
            bank.centered_into(i, &mut c);
            bank.search_vector(&c)
        })
        .collect()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Trains an inverted-file index with `n_list` lists over `bank`.
pub fn train_index(bank: &MemoryBank, n_list: usize, seed: u64) -> Result<AnnIndex> {
    let n = bank.len();
    if n == 0 {
        return Err(Error::invalid("cannot index an empty bank"));
    }
    if n_list == 0 || n_list > n {
        return Err(Error::invalid(format!(
            "n_list must be in 1..={n}, got {n_list}"
        )));
    }
    let points = search_space(bank);
    let dim = bank.search_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, n_list, &mut rng);

    for _ in 0..KMEANS_ITERATIONS {
        let assign: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut sums = vec![vec![0.0f64; dim]; n_list];
        let mut counts = vec![0usize; n_list];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut moved = false;
        for c in 0..n_list {
            // Empty clusters keep their previous centroid.
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                let next = s * inv;
                moved |= next != *cv;
                *cv = next;
            }
        }
        if !moved {
            break;
        }
    }

    // Final assignment against the stored (f32) centroids.
    let stored: Vec<Vec<f64>> = centroids
        .iter()
        .map(|c| c.iter().map(|&x| f64::from(x as f32)).collect())
        .collect();
    let assign: Vec<usize> = points.par_iter().map(|p| nearest(p, &stored)).collect();
    let mut lists = vec![Vec::new(); n_list];
    for (id, &c) in assign.iter().enumerate() {
        lists[c].push(id as u32);
    }

    Ok(AnnIndex {
        search_dim: dim,
        centroids: stored.iter().flatten().map(|&x| x as f32).collect(),
        lists,
        nprobe_default: default_nprobe(n_list),
        seed,
        bank_ref: bank.fingerprint(),
    })
}

/// Exact centered cosine distance between a centered query and bank vector `id`.
pub fn exact_distance(
    bank: &MemoryBank,
    centered_query: &[f64],
    query_norm: f64,
    id: usize,
) -> f64 {
    let dot = bank.centered_dot(id, centered_query);
    1.0 - cosine_from_parts(dot, query_norm, bank.centered_norm(id))
}

fn top_k(mut scored: Vec<(f64, u32)>, k: usize) -> Neighbors {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Neighbors {
        ids: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
    }
}

fn check_query(bank: &MemoryBank, query: &[f64], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if query.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: query.len(),
        });
    }
    Ok(())
}

/// k nearest neighbors of one raw (uncentered) patch vector.
pub fn search_one(
    index: &AnnIndex,
    bank: &MemoryBank,
    query: &[f64],
    k: usize,
    probe: Probe,
) -> Result<Neighbors> {
    check_query(bank, query, k)?;
    if index.bank_ref != bank.fingerprint() {
        return Err(Error::IndexMismatch);
    }
    let centered = bank.center(query);
    let qn = crate::bank::norm(&centered);
    let nprobe = probe.resolve(index);
    let scored: Vec<(f64, u32)> = if nprobe >= index.n_list() {
        (0..bank.len())
            .map(|id| (exact_distance(bank, &centered, qn, id), id as u32))
            .collect()
    } else {
        let sv = bank.search_vector(&centered);
        index
            .nearest_lists(&sv, nprobe)
            .into_iter()
            .flat_map(|c| index.lists[c].iter().copied())
            .map(|id| (exact_distance(bank, &centered, qn, id as usize), id))
            .collect()
    };
    Ok(top_k(scored, k))
}

/// Batched [`search_one`]; results are identical to the sequential calls.
pub fn search(
    index: &AnnIndex,
    bank: &MemoryBank,
    queries: &[Vec<f64>],
    k: usize,
    probe: Probe,
) -> Result<Vec<Neighbors>> {
    queries
        .par_iter()
        .map(|q| search_one(index, bank, q, k, probe))
        .collect()
}

/// Exhaustive scan; the reference the index is checked against.
pub fn brute_force(bank: &MemoryBank, query: &[f64], k: usize) -> Result<Neighbors> {
    check_query(bank, query, k)?;
    let centered = bank.center(query);
    let qn = crate::bank::norm(&centered);
    let scored = (0..bank.len())
        .map(|id| (exact_distance(bank, &centered, qn, id), id as u32))
        .collect();
    Ok(top_k(scored, k))
}
