mod common;

use a2r_core::ann::{brute_force, default_n_list, search, search_one, train_index, Probe};
use a2r_core::bank::MemoryBank;
use a2r_core::cxloss::cosine_distance;
use a2r_core::imaging::ScaleSpec;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn uniform_bank(seed: u64, n: usize, patch: usize) -> MemoryBank {
    let dim = 3 * patch * patch;
    let mut r = rng(seed);
    let v: Vec<f32> = (0..n * dim).map(|_| r.random()).collect();
    MemoryBank::from_vectors(0, ScaleSpec::new(patch, 1).unwrap(), v, None, false).unwrap()
}

fn queries(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| r.random()).collect())
        .collect()
}

#[test]
fn full_probe_equals_exhaustive_oracle() {
    let bank = uniform_bank(1, 3000, 2);
    let index = train_index(&bank, default_n_list(bank.len()), 1).unwrap();
    let qs = queries(2, 60, bank.dim());
    let got = search(&index, &bank, &qs, 10, Probe::All).unwrap();
    for (q, nn) in qs.iter().zip(&got) {
        let want = oracle_knn(&bank, q, 10);
        assert_eq!(nn.ids, want.iter().map(|w| w.0).collect::<Vec<_>>());
        for (d, w) in nn.distances.iter().zip(&want) {
            assert!((d - w.1).abs() <= 1e-12);
        }
    }
}

#[test]
fn distances_are_exact_at_any_probe() {
    let bank = uniform_bank(3, 2000, 2);
    let index = train_index(&bank, 40, 3).unwrap();
    let mu: Vec<f64> = bank.mean().iter().map(|&m| f64::from(m)).collect();
    for q in queries(4, 30, bank.dim()) {
        let nn = search_one(&index, &bank, &q, 5, Probe::Lists(2)).unwrap();
        assert!(nn.distances.windows(2).all(|w| w[0] <= w[1]));
        let qc: Vec<f64> = q.iter().zip(&mu).map(|(a, b)| a - b).collect();
        for (&id, &d) in nn.ids.iter().zip(&nn.distances) {
            let bc: Vec<f64> = bank
                .vector(id as usize)
                .iter()
                .zip(&mu)
                .map(|(a, b)| a - b)
                .collect();
            assert!((cosine_distance(&qc, &bc) - d).abs() <= 1e-6);
        }
    }
}

#[test]
fn batched_equals_sequential() {
    let bank = uniform_bank(5, 1500, 2);
    let index = train_index(&bank, 30, 5).unwrap();
    let qs = queries(6, 50, bank.dim());
    let batched = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| search(&index, &bank, &qs, 7, Probe::Lists(3)).unwrap());
    for (q, b) in qs.iter().zip(&batched) {
        assert_eq!(
            &search_one(&index, &bank, q, 7, Probe::Lists(3)).unwrap(),
            b
        );
    }
}

#[test]
fn recall_grows_with_nprobe() {
    let mut totals = vec![0usize; 4];
    let probes = [1, 3, 8, 20];
    for seed in 0..3 {
        let bank = uniform_bank(10 + seed, 2000, 2);
        let index = train_index(&bank, 45, seed).unwrap();
        for q in queries(20 + seed, 60, bank.dim()) {
            let truth = brute_force(&bank, &q, 10).unwrap();
            for (t, &np) in totals.iter_mut().zip(&probes) {
                let got = search_one(&index, &bank, &q, 10, Probe::Lists(np)).unwrap();
                *t += got.ids.iter().filter(|id| truth.ids.contains(id)).count();
            }
        }
    }
    assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
}

#[test]
fn pca_and_quantized_banks_stay_exact_at_full_probe() {
    let mut r = rng(40);
    let dim = 48;
    let v: Vec<f32> = (0..1200 * dim).map(|_| r.random()).collect();
    let bank =
        MemoryBank::from_vectors(3, ScaleSpec::new(4, 4).unwrap(), v, Some(16), true).unwrap();
    assert_eq!(bank.search_dim(), 16);
    let index = train_index(&bank, 30, 0).unwrap();
    for q in queries(41, 20, dim) {
        let got = search_one(&index, &bank, &q, 5, Probe::All).unwrap();
        let want = oracle_knn(&bank, &q, 5);
        assert_eq!(got.ids, want.iter().map(|w| w.0).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_at_full_probe(seed in any::<u64>(), n in 20usize..800, n_list in 1usize..40, k in 1usize..12) {
        let bank = uniform_bank(seed, n, 2);
        let index = train_index(&bank, n_list.min(n), seed).unwrap();
        for q in queries(seed ^ 0xabc, 5, bank.dim()) {
            let got = search_one(&index, &bank, &q, k, Probe::All).unwrap();
            let want = brute_force(&bank, &q, k).unwrap();
            prop_assert_eq!(&got, &want);
            prop_assert_eq!(got.ids, oracle_knn(&bank, &q, k).iter().map(|w| w.0).collect::<Vec<_>>());
        }
    }
}
