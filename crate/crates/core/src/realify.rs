//! Pixel-space optimization of an image against the memory banks.
//!
//! The image itself is the parameter: Adam steps follow the analytic gradient
//! of the multi-scale contextual loss plus an L2 anchor to the starting image,
//! pixels are clamped to `[0, 1]` after each step, and the best image seen is
//! returned once the loss stops improving for `patience` steps.

use crate::cxloss::{cx_loss_gradient, multiscale_cx_loss, AffinityRow, BankSet, CxConfig};
use crate::error::{Error, Result};
use crate::imaging::{Image, LabelMaskSet, ScaleSpec};

#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of `mean((image - start)^2)`.
    pub content_weight: f64,
    pub patience: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            content_weight: 0.01,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub total: f64,
    pub cx: f64,
    pub anchor: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeTrace {
    /// Step 0 is the starting image.
    pub steps: Vec<TraceStep>,
    pub best_step: usize,
    pub best_image: Image,
}

impl OptimizeTrace {
    pub fn best(&self) -> TraceStep {
        self.steps[self.best_step]
    }

    /// Best total loss seen up to each step.
    pub fn running_best(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(f64::INFINITY, |best, s| {
                *best = best.min(s.total);
                Some(*best)
            })
            .collect()
    }

    /// `step,total,cx,anchor` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total,cx,anchor\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                s.step, s.total, s.cx, s.anchor
            ));
        }
        out
    }
}

fn anchor_loss(image: &Image, start: &Image) -> f64 {
    let n = image.data().len() as f64;
    image
        .data()
        .iter()
        .zip(start.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

struct Evaluation {
    step: TraceStep,
    gradient: Vec<f64>,
}

fn evaluate(
    image: &Image,
    start: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cfg: &OptimizeConfig,
    cx_cfg: &CxConfig,
    step: usize,
) -> Result<Evaluation> {
    let report = cx_loss_gradient(image, banks, masks, cx_cfg)?;
    let anchor = anchor_loss(image, start);
    let total = report.total + cfg.content_weight * anchor;
    if !total.is_finite() {
        return Err(Error::NonFinite { step, value: total });
    }
    let mut gradient = report.gradient.expect("gradient requested");
    let scale = 2.0 * cfg.content_weight / image.data().len() as f64;
    for ((g, a), b) in gradient.iter_mut().zip(image.data()).zip(start.data()) {
        *g += scale * (a - b);
    }
    Ok(Evaluation {
        step: TraceStep {
            step,
            total,
            cx: report.total,
            anchor,
        },
        gradient,
    })
}

/// Minimizes the contextual loss of `start` by Adam on its pixels.
pub fn realify(
    start: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cfg: &OptimizeConfig,
    cx_cfg: &CxConfig,
) -> Result<(Image, OptimizeTrace)> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if (masks.width(), masks.height()) != (start.width(), start.height()) {
        return Err(Error::invalid("masks do not match the image dimensions"));
    }

    let mut image = start.clone();
    let mut eval = evaluate(&image, start, banks, masks, cfg, cx_cfg, 0)?;
    let mut trace = vec![eval.step];
    let mut best = (eval.step.total, 0usize, image.clone());
    let mut since_best = 0;

    let n = image.data().len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for t in 1..=cfg.steps {
        let bias1 = 1.0 - cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(t as i32);
        for (i, x) in image.data_mut().iter_mut().enumerate() {
            let g = eval.gradient[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let step = cfg.lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + cfg.eps);
            *x = (*x - step).clamp(0.0, 1.0);
        }

        eval = evaluate(&image, start, banks, masks, cfg, cx_cfg, t)?;
        trace.push(eval.step);
        if eval.step.total < best.0 {
            best = (eval.step.total, t, image.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_step, best_image) = best;
    Ok((
        best_image.clone(),
        OptimizeTrace {
            steps: trace,
            best_step,
            best_image,
        },
    ))
}

/// Mean, over every (patch, class) row, of the distance to the nearest
/// retrieved bank patch, reported per scale.
pub fn nn_drift(
    image: &Image,
    banks: &BankSet,
    masks: &LabelMaskSet,
    cx_cfg: &CxConfig,
) -> Result<Vec<(ScaleSpec, f64)>> {
    let report = multiscale_cx_loss(image, banks, masks, cx_cfg)?;
    Ok(cx_cfg
        .scales
        .iter()
        .map(|&scale| {
            let mins: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.scale == scale)
                .flat_map(|r| {
                    r.rows
                        .iter()
                        .map(|row: &AffinityRow| row.distances[row.argmin()])
                })
                .collect();
            (scale, mins.iter().sum::<f64>() / mins.len().max(1) as f64)
        })
        .collect())
}
