//! Focal and smooth-L1 losses with analytic gradients, the weighted total,
//! and prior-map supervision of the classification head.

use serde::{Deserialize, Serialize};

use crate::confidence::{logistic, PriorHeadOutput};
use crate::error::{Error, Result};
use crate::selection::PriorMap;

/// Clamp applied to probabilities before they reach [`focal_loss`].
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha_f: f64,
    pub gamma_f: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha_f: 0.25,
            gamma_f: 2.0,
        }
    }
}

impl FocalParams {
    pub fn new(alpha_f: f64, gamma_f: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_f) {
            return Err(Error::param("alpha_f", format!("must be in [0, 1], got {alpha_f}")));
        }
        if !(gamma_f >= 0.0 && gamma_f.is_finite()) {
            return Err(Error::param("gamma_f", format!("must be >= 0, got {gamma_f}")));
        }
        Ok(FocalParams { alpha_f, gamma_f })
    }
}

/// Weights of the classification, regression, and prior terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        Ok(LossWeights { alpha, beta, gamma })
    }
}

/// Mean of `-alpha_f * (1 - p_t)^gamma_f * ln(p_t)` and its gradient with respect to `probs`.
pub fn focal_loss(probs: &[f64], targets: &[bool], params: FocalParams) -> Result<(f64, Vec<f64>)> {
    if probs.len() != targets.len() {
        return Err(Error::shape(probs.len(), targets.len()));
    }
    if probs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if let Some(i) = probs.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::param(
            "probs",
            format!("element {i} = {} is not in (0, 1)", probs[i]),
        ));
    }
    let n = probs.len() as f64;
    let FocalParams { alpha_f: a, gamma_f: g } = params;
    let mut total = 0.0;
    let grad = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (pt, sign) = if y { (p, 1.0) } else { (1.0 - p, -1.0) };
            let q = 1.0 - pt;
            total += -a * q.powf(g) * pt.ln();
            let dpt = if g == 0.0 {
                -a / pt
            } else {
                a * (g * q.powf(g - 1.0) * pt.ln() - q.powf(g) / pt)
            };
            sign * dpt / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean smooth-L1 of `pred - target` and its gradient with respect to `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::shape(pred.len(), target.len()));
    }
    if let Some(i) = pred.iter().chain(target).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: i % pred.len().max(1),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            d.clamp(-1.0, 1.0) / n
        })
        .collect();
    Ok((total / n, grad))
}

pub fn total_loss(l_cls: f64, l_reg: f64, l_pk: f64, w: LossWeights) -> f64 {
    w.alpha * l_cls + w.beta * l_reg + w.gamma * l_pk
}

/// Focal loss of the head's two-way softmax foreground probability against the prior map.
pub fn prior_supervision_loss(head_out: &PriorHeadOutput, gt: &PriorMap, params: FocalParams) -> Result<f64> {
    if gt.mask.dims() != (head_out.rows(), head_out.cols()) {
        return Err(Error::shape(
            format!("{}x{}", head_out.rows(), head_out.cols()),
            format!("{:?}", gt.mask.dims()),
        ));
    }
    let mut probs = Vec::with_capacity(gt.mask.as_slice().len());
    for r in 0..head_out.rows() {
        for c in 0..head_out.cols() {
            let p = logistic(head_out.foreground(r, c) - head_out.background(r, c));
            probs.push(p.clamp(PROB_EPS, 1.0 - PROB_EPS));
        }
    }
    Ok(focal_loss(&probs, gt.mask.as_slice(), params)?.0)
}
