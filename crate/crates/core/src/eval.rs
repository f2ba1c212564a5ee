//! Component-box detection decoding, non-maximum suppression, and 11-point
//! interpolated average precision.

use std::collections::VecDeque;

use serde::Serialize;

use crate::confidence::{foreground_scores, prior_head, HeadParams};
use crate::error::{Error, Result};
use crate::grid::{iou_rotated, AabbBEV, CellIndex, FeatureMap, QuadBEV};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub quad: QuadBEV,
    pub aabb: AabbBEV,
    pub score: f64,
}

impl Detection {
    pub fn new(quad: QuadBEV, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::param("score", format!("must be in [0, 1], got {score}")));
        }
        Ok(Detection {
            aabb: quad.aabb(),
            quad,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Thresholds the head's foreground score, groups surviving cells into
/// 8-connected components, and emits each component's cell extent as a box
/// scored by the component maximum. Components are ordered by their first
/// cell in row-major order.
pub fn decode_detections(o: &FeatureMap, head: &HeadParams, score_thresh: f64) -> Result<Vec<Detection>> {
    let scores = foreground_scores(&prior_head(o, head)?);
    let spec = *o.spec();
    let (rows, cols) = scores.dims();
    let on = |r: usize, c: usize| *scores.get(r, c) >= score_thresh;
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if seen[r0 * cols + c0] || !on(r0, c0) {
                continue;
            }
            seen[r0 * cols + c0] = true;
            queue.push_back((r0, c0));
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
            let mut best = 0.0f64;
            while let Some((r, c)) = queue.pop_front() {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
                best = best.max(*scores.get(r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * cols + nc] && on(nr, nc) {
                            seen[nr * cols + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            let lo = spec.cell_bounds(CellIndex::new(rmin, cmin));
            let hi = spec.cell_bounds(CellIndex::new(rmax, cmax));
            let aabb = AabbBEV::new(lo.x1, lo.y1, hi.x2, hi.y2)?;
            out.push(Detection::new(aabb.to_quad(), best.clamp(0.0, 1.0))?);
        }
    }
    Ok(out)
}

fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy suppression by descending score; ties keep input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        if kept.iter().all(|k| iou_rotated(&k.quad, &dets[i].quad) < iou_thresh) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

/// Each detection, by descending score, claims the unmatched ground truth it
/// overlaps most if that overlap reaches `iou_thresh`. AP is the mean over
/// recall levels 0, 0.1, ..., 1 of the best precision at or beyond that
/// recall. With no ground truth AP is 1 if there are also no detections and
/// 0 otherwise.
pub fn average_precision(dets: &[Detection], gts: &[QuadBEV], iou_thresh: f64) -> PrCurve {
    if gts.is_empty() {
        let points = (0..dets.len()).map(|_| (0.0, 0.0)).collect();
        return PrCurve {
            points,
            ap: if dets.is_empty() { 1.0 } else { 0.0 },
        };
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (n, i) in ranked(dets).into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = iou_rotated(&dets[i].quad, gt);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (n + 1) as f64));
    }
    let ap = (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            points
                .iter()
                .filter(|(rec, _)| *rec + 1e-12 >= r)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    PrCurve { points, ap }
}
