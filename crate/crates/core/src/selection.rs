//! Which cells get shared: the confidence top-k baseline, the box-prior map,
//! and byte-budget trimming.
//!
//! All rankings order cells by descending score and break ties by ascending
//! row-major index, so selections are reproducible bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grid::{AabbBEV, FeatureMap, GridSpec, Mask, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    TopK,
    Gtfs,
    BudgetTrimmed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    mask: Mask,
    count: usize,
    kind: SelectionKind,
}

impl SelectionMatrix {
    pub fn new(mask: Mask, kind: SelectionKind) -> Self {
        let count = mask.count();
        SelectionMatrix { mask, count, kind }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn kind(&self) -> SelectionKind {
        self.kind
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        *self.mask.get(row, col)
    }
}

/// Binary map of cells covered by ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub mask: Mask,
    /// Boxes lying entirely outside the grid.
    pub skipped: usize,
}

impl PriorMap {
    pub fn into_selection(self) -> SelectionMatrix {
        SelectionMatrix::new(self.mask, SelectionKind::Gtfs)
    }
}

fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Selects the `k` highest-scoring cells.
pub fn topk_select(scores: &ScoreMap, k: usize) -> SelectionMatrix {
    let s = scores.as_slice();
    let k = k.min(s.len());
    let mut order: Vec<usize> = (0..s.len()).collect();
    if k < s.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank(s, a, b));
    }
    let mut mask = Mask::filled(scores.rows(), scores.cols(), false);
    for &i in &order[..k] {
        mask.as_mut_slice()[i] = true;
    }
    SelectionMatrix::new(mask, SelectionKind::TopK)
}

/// Half-open index range of cells whose centers fall inside `[lo, hi)` in
/// continuous grid units, at least one cell wide, clamped to `[0, n)`.
fn covered_range(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().min(n as f64);
    let start = (start as usize).min(n - 1);
    let end = (end.max(0.0) as usize).max(start + 1).min(n);
    (start, end)
}

/// Rasterizes boxes onto an all-zero map: each box sets the rectangle of cells
/// whose centers it covers (at least one cell per axis).
pub fn build_prior_map(boxes: &[AabbBEV], spec: &GridSpec) -> PriorMap {
    let mut mask = Mask::filled(spec.rows(), spec.cols(), false);
    let mut skipped = 0;
    let (x_min, x_max) = spec.x_range();
    let (y_min, y_max) = spec.y_range();
    for b in boxes {
        if b.x2 <= x_min || b.x1 >= x_max || b.y2 <= y_min || b.y1 >= y_max {
            skipped += 1;
            continue;
        }
        let [u1, v1] = spec.continuous_index([b.x1, b.y1]);
        let [u2, v2] = spec.continuous_index([b.x2, b.y2]);
        let (r1, r2) = covered_range(u1, u2, spec.rows());
        let (c1, c2) = covered_range(v1, v2, spec.cols());
        for r in r1..r2 {
            for c in c1..c2 {
                mask.set(r, c, true);
            }
        }
    }
    PriorMap { mask, skipped }
}

/// `P ⊙ F`, broadcast over channels.
pub fn gtfs_features(prior: &PriorMap, features: &FeatureMap) -> Result<FeatureMap> {
    features.masked(&prior.mask)
}

/// Keeps the selection if it fits the budget; otherwise keeps the
/// `floor(budget / bytes_per_cell)` best-scoring selected cells.
pub fn budget_select(
    sel: &SelectionMatrix,
    scores: &ScoreMap,
    budget_bytes: u64,
    bytes_per_cell: u64,
) -> Result<SelectionMatrix> {
    if bytes_per_cell == 0 {
        return Err(Error::param("bytes_per_cell", "must be positive"));
    }
    if sel.mask.dims() != scores.dims() {
        return Err(Error::shape(
            format!("{:?}", sel.mask.dims()),
            format!("{:?}", scores.dims()),
        ));
    }
    if sel.count as u64 * bytes_per_cell <= budget_bytes {
        return Ok(sel.clone());
    }
    let keep = (budget_bytes / bytes_per_cell) as usize;
    let s = scores.as_slice();
    let mut chosen: Vec<usize> = sel
        .mask
        .as_slice()
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    chosen.sort_by(|&a, &b| rank(s, a, b));
    chosen.truncate(keep);
    let mut mask = Mask::filled(scores.rows(), scores.cols(), false);
    for i in chosen {
        mask.as_mut_slice()[i] = true;
    }
    Ok(SelectionMatrix::new(mask, SelectionKind::BudgetTrimmed))
}

/// Fraction of selected cells whose centers lie inside any of `footprints`.
pub fn foreground_purity(sel: &Mask, spec: &GridSpec, footprints: &[crate::grid::QuadBEV]) -> Option<f64> {
    let mut total = 0usize;
    let mut inside = 0usize;
    for (i, &on) in sel.as_slice().iter().enumerate() {
        if !on {
            continue;
        }
        total += 1;
        let p = spec.cell_center(spec.unflat(i));
        if footprints.iter().any(|q| q.contains(p)) {
            inside += 1;
        }
    }
    (total > 0).then(|| inside as f64 / total as f64)
}
