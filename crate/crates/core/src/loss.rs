//! Training objectives with analytic gradients with respect to the
//! predicted probabilities.
//!
//! The edge-enhanced difficulty-mining (EEDM) loss weights the per-pixel
//! binary cross-entropy by `alpha` on target edges, then averages only over
//! pixels whose weighted loss is at least the median. The mining set is
//! held fixed when differentiating.

use crate::error::{PalError, Result};
use crate::imaging::extract_edges;
use crate::types::{Grid, LossChoice};

/// Probability clamp for logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d loss / d prediction, same shape as the prediction.
    pub grad: Grid<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Eedm { alpha: f64 },
    Bce,
    Dice,
    Focal { gamma: f64, alpha: f64 },
}

impl LossKind {
    pub fn from_choice(choice: LossChoice, alpha_edge: f64) -> Self {
        match choice {
            LossChoice::Eedm => LossKind::Eedm { alpha: alpha_edge },
            LossChoice::Bce => LossKind::Bce,
            LossChoice::Dice => LossKind::Dice,
            LossChoice::Focal => LossKind::Focal {
                gamma: 2.0,
                alpha: 0.25,
            },
        }
    }

    pub fn evaluate(&self, pred: &Grid<f64>, target: &Grid<f64>) -> Result<LossOutput> {
        match *self {
            LossKind::Eedm { alpha } => eedm_loss(pred, target, alpha),
            LossKind::Bce => bce_loss(pred, target),
            LossKind::Dice => dice_loss(pred, target),
            LossKind::Focal { gamma, alpha } => focal_loss(pred, target, gamma, alpha),
        }
    }
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

#[inline]
fn bce(p: f64, t: f64) -> f64 {
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// d bce / d p for clamped `p`.
#[inline]
fn bce_grad(p: f64, t: f64) -> f64 {
    (p - t) / (p * (1.0 - p))
}

/// Median of a multiset; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Edge weights `alpha` on target edges and 1 elsewhere.
pub fn edge_weights(target: &Grid<f64>, alpha: f64) -> Grid<f64> {
    let edges = extract_edges(&target.map(|&t| t >= 0.5));
    edges.map(|&e| if e { alpha } else { 1.0 })
}

/// Weighted per-pixel losses and the above-median selection used by EEDM.
pub fn eedm_mining(pred: &Grid<f64>, target: &Grid<f64>, alpha: f64) -> (Vec<f64>, Vec<bool>) {
    let weights = edge_weights(target, alpha);
    let losses: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((&p, &t), &w)| w * bce(clamp_p(p), t))
        .collect();
    let m = median(&losses);
    let selected = losses.iter().map(|&l| l >= m).collect();
    (losses, selected)
}

pub fn eedm_loss(pred: &Grid<f64>, target: &Grid<f64>, alpha: f64) -> Result<LossOutput> {
    pred.ensure_same_dims(target)?;
    if let Some(t) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(PalError::InvalidData(format!("EEDM target must be binary, found {t}")));
    }
    if pred.is_empty() {
        return Err(PalError::InvalidData("empty prediction".into()));
    }
    let weights = edge_weights(target, alpha);
    let (losses, selected) = eedm_mining(pred, target, alpha);
    let count = selected.iter().filter(|&&s| s).count() as f64;
    let value = losses
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|(l, _)| l)
        .sum::<f64>()
        / count;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .zip(&selected)
        .map(|(((&p, &t), &w), &s)| if s { w * bce_grad(clamp_p(p), t) / count } else { 0.0 })
        .collect();
    Ok(LossOutput {
        value,
        grad: Grid::from_vec(pred.height(), pred.width(), grad)?,
    })
}

pub fn bce_loss(pred: &Grid<f64>, target: &Grid<f64>) -> Result<LossOutput> {
    pred.ensure_same_dims(target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_p(p);
            value += bce(p, t);
            bce_grad(p, t) / n
        })
        .collect();
    Ok(LossOutput {
        value: value / n,
        grad: Grid::from_vec(pred.height(), pred.width(), grad)?,
    })
}

/// Soft Dice loss `1 - (2 sum(PT) + 1) / (sum(P) + sum(T) + 1)`.
pub fn dice_loss(pred: &Grid<f64>, target: &Grid<f64>) -> Result<LossOutput> {
    pred.ensure_same_dims(target)?;
    const SMOOTH: f64 = 1.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let num = 2.0 * inter + SMOOTH;
    let den = sp + st + SMOOTH;
    let grad: Vec<f64> = target
        .data()
        .iter()
        .map(|&t| -(2.0 * t * den - num) / (den * den))
        .collect();
    Ok(LossOutput {
        value: 1.0 - num / den,
        grad: Grid::from_vec(pred.height(), pred.width(), grad)?,
    })
}

/// Focal loss `-alpha (1 - p_t)^gamma ln p_t`, averaged over pixels. With
/// `gamma = 0, alpha = 1` it is plain BCE.
pub fn focal_loss(pred: &Grid<f64>, target: &Grid<f64>, gamma: f64, alpha: f64) -> Result<LossOutput> {
    pred.ensure_same_dims(target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_p(p);
            // soft targets interpolate between the two branches
            let mut g = 0.0;
            for (pt, sign, wt) in [(p, 1.0, t), (1.0 - p, -1.0, 1.0 - t)] {
                if wt == 0.0 {
                    continue;
                }
                let q = 1.0 - pt;
                value += wt * -alpha * q.powf(gamma) * pt.ln();
                let d_pt = if gamma == 0.0 {
                    -alpha / pt
                } else {
                    alpha * (gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt)
                };
                g += wt * sign * d_pt;
            }
            g / n
        })
        .collect();
    Ok(LossOutput {
        value: value / n,
        grad: Grid::from_vec(pred.height(), pred.width(), grad)?,
    })
}
