//! Loss values of the cycle-consistent adversarial objective and of the full
//! objective that adds the weighted multi-scale contextual loss. These are
//! plain functions of discriminator outputs and images; no networks live here.

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA_CX: f64 = 0.1;
pub const MASK_REFRESH_START: u64 = 40;
pub const MASK_REFRESH_EVERY: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutputs {
    pub on_real: Vec<f64>,
    pub on_fake: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cx: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cx: DEFAULT_LAMBDA_CX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleNorm {
    #[default]
    L1,
    L2,
}

impl std::str::FromStr for CycleNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(CycleNorm::L1),
            "l2" => Ok(CycleNorm::L2),
            other => Err(Error::invalid(format!("unknown cycle norm {other:?}"))),
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `mean log D(real) + mean log(1 - D(fake))`.
pub fn gan_loss(d: &DiscriminatorOutputs) -> Result<f64> {
    if d.on_real.is_empty() || d.on_fake.is_empty() {
        return Err(Error::invalid("discriminator batches must be nonempty"));
    }
    if let Some(p) = d
        .on_real
        .iter()
        .chain(&d.on_fake)
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let real = d.on_real.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / d.on_real.len() as f64;
    let fake = d
        .on_fake
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum::<f64>()
        / d.on_fake.len() as f64;
    Ok(real + fake)
}

fn reconstruction_error(orig: &Image, recon: &Image, norm: CycleNorm) -> Result<f64> {
    if (orig.width(), orig.height()) != (recon.width(), recon.height()) {
        return Err(Error::invalid(format!(
            "reconstruction is {}x{}, original is {}x{}",
            recon.width(),
            recon.height(),
            orig.width(),
            orig.height()
        )));
    }
    let n = orig.data().len() as f64;
    let sum: f64 = orig
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| match norm {
            CycleNorm::L1 => (a - b).abs(),
            CycleNorm::L2 => (a - b) * (a - b),
        })
        .sum();
    Ok(sum / n)
}

/// Per-element mean reconstruction error in both translation directions.
pub fn cycle_loss(
    x: &Image,
    recon_x: &Image,
    y: &Image,
    recon_y: &Image,
    norm: CycleNorm,
) -> Result<f64> {
    Ok(reconstruction_error(x, recon_x, norm)? + reconstruction_error(y, recon_y, norm)?)
}

pub fn cca_loss(gan_xy: f64, gan_yx: f64, cyc: f64) -> f64 {
    gan_xy + gan_yx + cyc
}

pub fn full_loss(cca: f64, cxms: f64, w: LossWeights) -> f64 {
    cca + w.lambda_cx * cxms
}

/// Whether masks should be re-extracted from generated images this epoch.
pub fn mask_refresh_due(epoch: u64) -> bool {
    epoch >= MASK_REFRESH_START && (epoch - MASK_REFRESH_START).is_multiple_of(MASK_REFRESH_EVERY)
}
