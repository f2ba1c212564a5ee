//! Ego-side stacking of received features into per-cell tokens and
//! self-attention fusion over them.

use rayon::prelude::*;

use crate::confidence::attend;
use crate::error::{Error, Result};
use crate::grid::{CellIndex, FeatureMap, GridSpec};
use crate::protocol::{MessageKind, WarpedEntries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    /// Fuse both confidence-masked and box-prior features.
    TrainLike,
    /// Fuse confidence-masked features only.
    TestLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceTag {
    Ego,
    Agent { id: u8, kind: MessageKind },
}

/// Per-cell token lists. The ego token is implicit and always first; received
/// tokens follow in ascending `(agent id, kind)` order with M before G.
#[derive(Debug, Clone)]
pub struct SourceStack {
    ego: FeatureMap,
    extra: Vec<Vec<(SourceTag, Vec<f32>)>>,
}

impl SourceStack {
    pub fn spec(&self) -> &GridSpec {
        self.ego.spec()
    }

    pub fn channels(&self) -> usize {
        self.ego.channels()
    }

    pub fn token_count(&self, row: usize, col: usize) -> usize {
        1 + self.extra[self.ego.spec().flat(CellIndex::new(row, col))].len()
    }

    pub fn tokens(&self, row: usize, col: usize) -> Vec<(SourceTag, Vec<f32>)> {
        let mut out = vec![(SourceTag::Ego, self.ego.cell_vector(row, col))];
        out.extend(
            self.extra[self.ego.spec().flat(CellIndex::new(row, col))]
                .iter()
                .cloned(),
        );
        out
    }
}

pub fn stack_sources(ego: &FeatureMap, received: &[WarpedEntries], mode: FusionMode) -> Result<SourceStack> {
    let spec = *ego.spec();
    let mut sources: Vec<&WarpedEntries> = Vec::with_capacity(received.len());
    for w in received {
        if w.spec != spec {
            return Err(Error::shape(format!("{spec:?}"), format!("{:?}", w.spec)));
        }
        if w.channels != ego.channels() {
            return Err(Error::shape(
                format!("{} channels", ego.channels()),
                format!("{} channels from agent {}", w.channels, w.sender),
            ));
        }
        if mode == FusionMode::TestLike && w.kind == MessageKind::G {
            continue;
        }
        sources.push(w);
    }
    sources.sort_by_key(|w| (w.sender, w.kind));
    let mut extra = vec![Vec::new(); spec.len()];
    for w in sources {
        let tag = SourceTag::Agent {
            id: w.sender,
            kind: w.kind,
        };
        for (cell, v) in &w.entries {
            extra[spec.flat(*cell)].push((tag, v.clone()));
        }
    }
    Ok(SourceStack {
        ego: ego.clone(),
        extra,
    })
}

/// Self-attention over one cell's tokens, returning the first (ego) query row
/// and its attention weights (in input order). A single token passes through
/// unchanged. Non-ego tokens are reduced in a canonical order, so reordering
/// them leaves the output bit-identical.
pub fn fuse_tokens(tokens: &[&[f32]]) -> (Vec<f32>, Vec<f64>) {
    if tokens.len() == 1 {
        return (tokens[0].to_vec(), vec![1.0]);
    }
    let dim = tokens[0].len();
    let mut order: Vec<usize> = (1..tokens.len()).collect();
    order.sort_by(|&a, &b| {
        tokens[a]
            .iter()
            .zip(tokens[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.insert(0, 0);
    let flat: Vec<f64> = order
        .iter()
        .flat_map(|&i| tokens[i].iter().map(|&v| v as f64))
        .collect();
    let (out, w_sorted) = attend(&flat[..dim], &flat, &flat, dim);
    let mut w = vec![0.0; tokens.len()];
    for (slot, &i) in order.iter().enumerate() {
        w[i] = w_sorted[slot];
    }
    (out.into_iter().map(|v| v as f32).collect(), w)
}

pub fn fuse_self_attention(stack: &SourceStack) -> FeatureMap {
    let spec = *stack.spec();
    let c = stack.channels();
    let fused: Vec<Option<Vec<f32>>> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let extra = &stack.extra[i];
            if extra.is_empty() {
                return None;
            }
            let cell = spec.unflat(i);
            let ego = stack.ego.cell_vector(cell.row, cell.col);
            let mut toks: Vec<&[f32]> = vec![&ego];
            toks.extend(extra.iter().map(|(_, v)| v.as_slice()));
            Some(fuse_tokens(&toks).0)
        })
        .collect();
    let mut out = stack.ego.clone();
    for (i, v) in fused.into_iter().enumerate() {
        if let Some(v) = v {
            let cell = spec.unflat(i);
            debug_assert_eq!(v.len(), c);
            out.write_cell(cell.row, cell.col, &v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::scaled_dot_attention;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_warp(sender: u8, kind: MessageKind, spec: GridSpec, c: usize, rng: &mut impl Rng) -> WarpedEntries {
        WarpedEntries {
            sender,
            kind,
            spec,
            channels: c,
            entries: (0..spec.len())
                .map(|i| (spec.unflat(i), (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
                .collect(),
            dropped: 0,
            collisions: 0,
        }
    }

    fn random_map(rng: &mut impl Rng, c: usize, spec: GridSpec) -> FeatureMap {
        let v = (0..c * spec.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMap::from_values(c, spec, v).unwrap()
    }

    #[test]
    fn token_counts() {
        let spec = GridSpec::centered(6, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ego = random_map(&mut rng, 3, spec);
        let s = stack_sources(&ego, &[], FusionMode::TrainLike).unwrap();
        assert!((0..6).all(|r| (0..6).all(|c| s.token_count(r, c) == 1)));

        let mut rec = Vec::new();
        for a in [2u8, 1] {
            rec.push(dense_warp(a, MessageKind::G, spec, 3, &mut rng));
            rec.push(dense_warp(a, MessageKind::M, spec, 3, &mut rng));
        }
        let s = stack_sources(&ego, &rec, FusionMode::TrainLike).unwrap();
        assert_eq!(s.token_count(2, 3), 5);
        let tags: Vec<_> = s.tokens(2, 3).into_iter().map(|(t, _)| t).collect();
        assert_eq!(
            tags,
            vec![
                SourceTag::Ego,
                SourceTag::Agent {
                    id: 1,
                    kind: MessageKind::M
                },
                SourceTag::Agent {
                    id: 1,
                    kind: MessageKind::G
                },
                SourceTag::Agent {
                    id: 2,
                    kind: MessageKind::M
                },
                SourceTag::Agent {
                    id: 2,
                    kind: MessageKind::G
                },
            ]
        );
        let s = stack_sources(&ego, &rec, FusionMode::TestLike).unwrap();
        assert_eq!(s.token_count(2, 3), 3);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let spec = GridSpec::centered(6, 3.0).unwrap();
        let other = GridSpec::centered(6, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ego = random_map(&mut rng, 2, spec);
        let w = dense_warp(1, MessageKind::M, other, 2, &mut rng);
        assert!(stack_sources(&ego, &[w], FusionMode::TestLike).is_err());
    }

    #[test]
    fn single_token_cells_pass_through() {
        let spec = GridSpec::centered(8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ego = random_map(&mut rng, 4, spec);
        let mut w = dense_warp(1, MessageKind::M, spec, 4, &mut rng);
        w.entries.retain(|(c, _)| c.row < 3);
        let out = fuse_self_attention(&stack_sources(&ego, &[w], FusionMode::TestLike).unwrap());
        for r in 3..8 {
            for c in 0..8 {
                assert_eq!(out.cell_vector(r, c), ego.cell_vector(r, c));
            }
        }
        assert_ne!(out.cell_vector(0, 0), ego.cell_vector(0, 0));
    }

    #[test]
    fn identical_tokens_return_token_not_sum() {
        let v = [0.4f32, -1.25, 2.0];
        let (o, w) = fuse_tokens(&[&v, &v]);
        for (a, b) in o.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_tokens_match_attention_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let toks: Vec<Vec<f32>> = (0..4)
                .map(|_| (0..5).map(|_| rng.random_range(-2.0f32..2.0)).collect())
                .collect();
            let refs: Vec<&[f32]> = toks.iter().map(|t| t.as_slice()).collect();
            let (o, _) = fuse_tokens(&refs);
            let m = Array2::from_shape_fn((4, 5), |(i, j)| toks[i][j] as f64);
            let want = scaled_dot_attention(m.view(), m.view(), m.view()).unwrap();
            for j in 0..5 {
                assert!((o[j] as f64 - want[[0, j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn output_in_convex_hull_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = rng.random_range(2..7);
            let toks: Vec<Vec<f32>> = (0..m)
                .map(|_| (0..3).map(|_| rng.random_range(-3.0f32..3.0)).collect())
                .collect();
            let refs: Vec<&[f32]> = toks.iter().map(|t| t.as_slice()).collect();
            let (o, _) = fuse_tokens(&refs);
            for j in 0..3 {
                let lo = toks.iter().map(|t| t[j]).fold(f32::INFINITY, f32::min);
                let hi = toks.iter().map(|t| t[j]).fold(f32::NEG_INFINITY, f32::max);
                assert!(o[j] >= lo - 1e-5 && o[j] <= hi + 1e-5);
            }
            let mut perm = refs.clone();
            perm[1..].reverse();
            let (p, _) = fuse_tokens(&perm);
            for j in 0..3 {
                assert_eq!(o[j].to_bits(), p[j].to_bits());
            }
        }
    }

    #[test]
    fn test_like_ignores_g() {
        let spec = GridSpec::centered(6, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ego = random_map(&mut rng, 2, spec);
        let m = dense_warp(1, MessageKind::M, spec, 2, &mut rng);
        let g1 = dense_warp(1, MessageKind::G, spec, 2, &mut rng);
        let g2 = dense_warp(1, MessageKind::G, spec, 2, &mut rng);
        let a = fuse_self_attention(&stack_sources(&ego, &[m.clone(), g1], FusionMode::TestLike).unwrap());
        let b = fuse_self_attention(&stack_sources(&ego, &[m, g2], FusionMode::TestLike).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_sequential() {
        let spec = GridSpec::centered(12, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ego = random_map(&mut rng, 3, spec);
        let rec = vec![
            dense_warp(1, MessageKind::M, spec, 3, &mut rng),
            dense_warp(3, MessageKind::G, spec, 3, &mut rng),
        ];
        let stack = stack_sources(&ego, &rec, FusionMode::TrainLike).unwrap();
        let out = fuse_self_attention(&stack);
        for i in 0..spec.len() {
            let CellIndex { row, col } = spec.unflat(i);
            let toks = stack.tokens(row, col);
            let refs: Vec<&[f32]> = toks.iter().map(|(_, v)| v.as_slice()).collect();
            assert_eq!(out.cell_vector(row, col), fuse_tokens(&refs).0);
        }
    }
}
