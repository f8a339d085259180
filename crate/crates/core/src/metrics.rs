//! Fréchet distance between Gaussians fitted to feature sets, and mean
//! entropy of probability rows.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"A2RF";
const SYMMETRY_TOL: f64 = 1e-8;

/// `n × d` row-major sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(Self { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    /// Binary layout: magic, `u32` n, `u32` d, then `n·d` little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated("feature header".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * n * d {
            return Err(Error::Truncated(format!(
                "expected {} feature bytes, found {}",
                4 * n * d,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::new(n, d, data)
    }

    /// One sample per line, comma separated.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
            match d {
                None => d = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::invalid(format!(
                        "line {}: {} fields, expected {d}",
                        lineno + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend(row);
            n += 1;
        }
        Self::new(n, d.unwrap_or(0), data)
    }

    /// Reads a `.csv` file as CSV and anything else as the binary layout.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::invalid(format!("{} is not UTF-8", path.display())))?;
            Self::from_csv(&text)
        } else {
            Self::from_bytes(&bytes)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and symmetrized covariance (denominator `n - 1`).
pub fn gaussian_fit(f: &FeatureSet) -> Result<GaussianStats> {
    if f.n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 samples, got {}",
            f.n
        )));
    }
    let d = f.d;
    let mut mean = DVector::<f64>::zeros(d);
    for row in f.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= f.n as f64;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in f.rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    cov /= (f.n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid("matrix must be square"));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Negative eigenvalues (numerical noise) are clamped to zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Squared Fréchet distance between two Gaussians.
pub fn fid(g1: &GaussianStats, g2: &GaussianStats) -> Result<f64> {
    let d = g1.mean.len();
    if g2.mean.len() != d || g1.cov.nrows() != d || g2.cov.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: g2.mean.len(),
        });
    }
    let diff = &g1.mean - &g2.mean;
    let s1 = matrix_sqrt_psd(&g1.cov)?;
    let inner = &s1 * &g2.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let value = diff.norm_squared() + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean Shannon entropy (natural log) of probability rows. Rows are
/// renormalized when their sum is off by at most `1e-4`.
pub fn mean_entropy(rows: &FeatureSet) -> Result<f64> {
    if rows.n == 0 {
        return Err(Error::invalid("no probability rows"));
    }
    let mut total = 0.0;
    for (i, row) in rows.rows().enumerate() {
        if let Some(p) = row.iter().find(|p| **p < 0.0) {
            return Err(Error::invalid(format!("row {i}: negative probability {p}")));
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid(format!("row {i} sums to zero")));
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
        }
        total -= row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let p = p / sum;
                p * p.ln()
            })
            .sum::<f64>();
    }
    Ok(total / rows.n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats1(mean: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    fn random_psd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose()
    }

    #[test]
    fn fit_cases() {
        let f = FeatureSet::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let g = gaussian_fit(&f).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, 2.0]);
        assert!(g.cov.iter().all(|&c| c == 0.0));

        let g = gaussian_fit(&FeatureSet::new(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.mean[0], 1.0);
        assert_eq!(g.cov[(0, 0)], 2.0);

        let a = FeatureSet::new(3, 2, vec![1.0, 5.0, 2.0, -1.0, 0.5, 0.25]).unwrap();
        let b = FeatureSet::new(3, 2, vec![0.5, 0.25, 1.0, 5.0, 2.0, -1.0]).unwrap();
        let (ga, gb) = (gaussian_fit(&a).unwrap(), gaussian_fit(&b).unwrap());
        assert!((&ga.mean - &gb.mean).amax() < 1e-15);
        assert!((&ga.cov - &gb.cov).amax() < 1e-15);

        assert!(gaussian_fit(&FeatureSet::new(1, 2, vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn sqrt_cases() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-12);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&m).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-12);

        for seed in 0..5 {
            let m = random_psd(5, seed);
            let s = matrix_sqrt_psd(&m).unwrap();
            assert!((&s * &s - &m).norm() <= 1e-6 * m.norm());
            // sqrt(S·S) = S for PSD S.
            let again = matrix_sqrt_psd(&(&s * &s)).unwrap();
            assert!((again - &s).amax() < 1e-5);
        }

        let mut asym = DMatrix::<f64>::identity(2, 2);
        asym[(0, 1)] = 0.1;
        assert!(matrix_sqrt_psd(&asym).is_err());
    }

    #[test]
    fn fid_cases() {
        assert!((fid(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((fid(&stats1(3.0, 4.0), &stats1(3.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);

        let d = 6;
        let v = DVector::from_fn(d, |i, _| i as f64 * 0.5 - 1.0);
        let a = GaussianStats {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        };
        let b = GaussianStats {
            mean: v.clone(),
            cov: DMatrix::identity(d, d),
        };
        assert!((fid(&a, &b).unwrap() - v.norm_squared()).abs() < 1e-10);

        for seed in 0..5 {
            let g = GaussianStats {
                mean: DVector::from_element(8, seed as f64),
                cov: random_psd(8, seed),
            };
            let h = GaussianStats {
                mean: DVector::from_element(8, 0.5),
                cov: random_psd(8, seed + 100),
            };
            assert!(fid(&g, &g).unwrap().abs() < 1e-6);
            let (x, y) = (fid(&g, &h).unwrap(), fid(&h, &g).unwrap());
            assert!(x >= 0.0 && (x - y).abs() < 1e-6);
        }

        assert!(fid(&stats1(0.0, 1.0), &a).is_err());
    }

    #[test]
    fn entropy_cases() {
        let one_hot = FeatureSet::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mean_entropy(&one_hot).unwrap(), 0.0);
        let two = FeatureSet::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!((mean_entropy(&two).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let k = 1000;
        let uniform = FeatureSet::new(1, k, vec![1.0 / k as f64; k]).unwrap();
        assert!((mean_entropy(&uniform).unwrap() - 6.907755).abs() < 1e-6);

        assert!(mean_entropy(&FeatureSet::new(1, 2, vec![1.5, -0.5]).unwrap()).is_err());
        assert!(mean_entropy(&FeatureSet::new(1, 2, vec![0.0, 0.0]).unwrap()).is_err());
        assert!(mean_entropy(&FeatureSet::new(1, 2, vec![0.3, 0.3]).unwrap()).is_err());
    }

    #[test]
    fn entropy_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..20 {
            let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let row = FeatureSet::new(1, len, raw.iter().map(|r| r / s).collect()).unwrap();
            let h = mean_entropy(&row).unwrap();
            assert!(h >= 0.0 && h <= (len as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn feature_file_formats() {
        let f = FeatureSet::new(2, 3, vec![1.0, 2.5, -3.0, 0.0, 0.125, 7.0]).unwrap();
        assert_eq!(FeatureSet::from_bytes(&f.to_bytes()).unwrap(), f);
        let csv = FeatureSet::from_csv("1,2.5,-3\n0, 0.125, 7\n").unwrap();
        assert_eq!(csv, f);
        assert!(FeatureSet::from_csv("1,2\n3\n").is_err());
        let mut bad = f.to_bytes();
        bad[0] = b'X';
        assert!(matches!(
            FeatureSet::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            FeatureSet::from_bytes(&f.to_bytes()[..20]),
            Err(Error::Truncated(_))
        ));
    }
}
