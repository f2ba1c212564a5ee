//! Attention fusion, the fixed logistic classification head, and thresholded
//! spatial confidence maps.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask, ScoreMap};

/// Softmax-weighted combination of `values` for one query row.
///
/// `keys` and `values` are row-major `m x dim`. Returns the output row and
/// the attention weights.
pub(crate) fn attend(query: &[f64], keys: &[f64], values: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let m = keys.len() / dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let logits: Vec<f64> = (0..m)
        .map(|j| {
            let k = &keys[j * dim..(j + 1) * dim];
            query.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    let vdim = values.len() / m;
    let mut out = vec![0.0; vdim];
    for (j, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[j * vdim..(j + 1) * vdim]) {
            *o += w * v;
        }
    }
    (out, weights)
}

/// `softmax(Q K^T / sqrt(d)) V`, row-wise.
pub fn scaled_dot_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = q.ncols();
    if d == 0 {
        return Err(Error::param("d", "must be at least 1"));
    }
    if k.ncols() != d {
        return Err(Error::shape(
            format!("keys with {d} columns"),
            format!("{} columns", k.ncols()),
        ));
    }
    if k.nrows() == 0 || k.nrows() != v.nrows() {
        return Err(Error::shape(
            format!("{} value rows (one per key, at least one)", k.nrows()),
            v.nrows(),
        ));
    }
    if q.iter().chain(k.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: 0 });
    }
    let keys: Vec<f64> = k.iter().copied().collect();
    let values: Vec<f64> = v.iter().copied().collect();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for (i, row) in q.rows().into_iter().enumerate() {
        let qrow: Vec<f64> = row.to_vec();
        let (o, _) = attend(&qrow, &keys, &values, d);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&o));
    }
    Ok(out)
}

/// Attention Fusion Module: at every cell the agents' C-vectors form the
/// tokens, the ego token is the query, and all tokens are keys and values.
pub fn afm_fuse(features: &[FeatureMap], ego_idx: usize) -> Result<FeatureMap> {
    let first = features
        .first()
        .ok_or_else(|| Error::param("features", "at least one feature map is required"))?;
    if ego_idx >= features.len() {
        return Err(Error::param("ego_idx", format!("{ego_idx} out of range")));
    }
    for f in features {
        if !f.same_shape(first) {
            return Err(Error::shape(first.shape_string(), f.shape_string()));
        }
    }
    let ego = &features[ego_idx];
    if features.len() == 1 {
        return Ok(ego.clone());
    }
    let c = first.channels();
    let mut out = FeatureMap::zeros(c, *first.spec());
    let mut tokens = Vec::with_capacity(features.len() * c);
    for r in 0..first.rows() {
        for col in 0..first.cols() {
            tokens.clear();
            for f in features {
                tokens.extend((0..c).map(|ch| f.get(ch, r, col) as f64));
            }
            let q = &tokens[ego_idx * c..(ego_idx + 1) * c];
            let (o, _) = attend(q, &tokens, &tokens, c);
            let o32: Vec<f32> = o.iter().map(|&v| v as f32).collect();
            out.write_cell(r, col, &o32);
        }
    }
    Ok(out)
}

/// Per-cell affine head from C channels to (background, foreground) logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub fg_weights: Vec<f64>,
    pub fg_bias: f64,
    pub bg_weights: Vec<f64>,
    pub bg_bias: f64,
}

impl HeadParams {
    /// Foreground logit `scale * channel0 + bias`, background logit 0.
    pub fn channel0(channels: usize, scale: f64, bias: f64) -> Self {
        let mut fg = vec![0.0; channels];
        fg[0] = scale;
        HeadParams {
            fg_weights: fg,
            fg_bias: bias,
            bg_weights: vec![0.0; channels],
            bg_bias: 0.0,
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.fg_weights.len() != channels || self.bg_weights.len() != channels {
            return Err(Error::shape(
                format!("head weights for {channels} channels"),
                format!("{} / {}", self.fg_weights.len(), self.bg_weights.len()),
            ));
        }
        Ok(())
    }
}

/// Head output: logits laid out as `[background plane, foreground plane]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHeadOutput {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
}

impl PriorHeadOutput {
    pub fn from_logits(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != 2 * rows * cols {
            return Err(Error::shape(format!("2x{rows}x{cols}"), logits.len()));
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(PriorHeadOutput { rows, cols, logits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn background(&self, row: usize, col: usize) -> f64 {
        self.logits[row * self.cols + col]
    }

    pub fn foreground(&self, row: usize, col: usize) -> f64 {
        self.logits[self.rows * self.cols + row * self.cols + col]
    }
}

pub fn prior_head(features: &FeatureMap, head: &HeadParams) -> Result<PriorHeadOutput> {
    let c = features.channels();
    head.check(c)?;
    let plane = features.spec().len();
    let mut logits = vec![0.0; 2 * plane];
    let (bg, fg) = logits.split_at_mut(plane);
    bg.iter_mut().for_each(|v| *v = head.bg_bias);
    fg.iter_mut().for_each(|v| *v = head.fg_bias);
    let vals = features.values();
    for ch in 0..c {
        let (wb, wf) = (head.bg_weights[ch], head.fg_weights[ch]);
        if wb == 0.0 && wf == 0.0 {
            continue;
        }
        let src = &vals[ch * plane..(ch + 1) * plane];
        for i in 0..plane {
            bg[i] += wb * src[i] as f64;
            fg[i] += wf * src[i] as f64;
        }
    }
    Ok(PriorHeadOutput {
        rows: features.rows(),
        cols: features.cols(),
        logits,
    })
}

/// Largest f64 below 1.
const SCORE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function kept inside the open interval (0, 1).
pub fn logistic(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(f64::MIN_POSITIVE, SCORE_MAX)
}

/// Threshold in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param("threshold", format!("must be in [0, 1], got {t}")));
        }
        Ok(Threshold(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Threshold::new(t)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub scores: ScoreMap,
    pub binary: Mask,
    pub threshold: Threshold,
}

/// Foreground probability per cell from head logits.
pub fn foreground_scores(head_out: &PriorHeadOutput) -> ScoreMap {
    ScoreMap::from_fn(head_out.rows(), head_out.cols(), |r, c| {
        logistic(head_out.foreground(r, c) - head_out.background(r, c))
    })
}

/// Scores the fused map with the head and thresholds it: `binary = scores >= t`.
pub fn generate_confidence(fused: &FeatureMap, head: &HeadParams, t: Threshold) -> Result<ConfidenceMap> {
    let scores = foreground_scores(&prior_head(fused, head)?);
    let binary = Mask::from_fn(scores.rows(), scores.cols(), |r, c| *scores.get(r, c) >= t.value());
    Ok(ConfidenceMap {
        scores,
        binary,
        threshold: t,
    })
}

/// Zeroes every channel of cells outside the confidence map's support.
pub fn mask_features(conf: &ConfidenceMap, features: &FeatureMap) -> Result<FeatureMap> {
    features.masked(&conf.binary)
}
