/// Per-dimension 8-bit scalar quantizer with bounds taken from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl QuantParams {
    /// Min/max per dimension over row-major `vectors`.
    pub fn fit(vectors: &[f32], dim: usize) -> Self {
        let mut lo = vec![f32::INFINITY; dim];
        let mut hi = vec![f32::NEG_INFINITY; dim];
        for row in vectors.chunks_exact(dim) {
            for d in 0..dim {
                lo[d] = lo[d].min(row[d]);
                hi[d] = hi[d].max(row[d]);
            }
        }
        for d in 0..dim {
            if lo[d] > hi[d] {
                lo[d] = 0.0;
                hi[d] = 0.0;
            }
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Largest reconstruction error for dimension `d`.
    pub fn tolerance(&self, d: usize) -> f64 {
        (f64::from(self.hi[d]) - f64::from(self.lo[d])) / 255.0 / 2.0 + 1e-7
    }

    pub fn quantize_into(&self, v: &[f32], out: &mut Vec<u8>) {
        for (d, &x) in v.iter().enumerate() {
            let (lo, hi) = (f64::from(self.lo[d]), f64::from(self.hi[d]));
            let code = if hi > lo {
                ((f64::from(x) - lo) / (hi - lo) * 255.0)
                    .round()
                    .clamp(0.0, 255.0)
            } else {
                0.0
            };
            out.push(code as u8);
        }
    }

    #[inline]
    pub fn dequantize_one(&self, d: usize, code: u8) -> f32 {
        let (lo, hi) = (f64::from(self.lo[d]), f64::from(self.hi[d]));
        (lo + f64::from(code) * (hi - lo) / 255.0) as f32
    }

    pub fn dequantize(&self, codes: &[u8]) -> Vec<f32> {
        codes
            .iter()
            .enumerate()
            .map(|(d, &c)| self.dequantize_one(d, c))
            .collect()
    }
}
