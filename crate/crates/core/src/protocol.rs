//! Sparse feature messages, the wire codec, bandwidth accounting, and warping
//! received entries into the ego grid.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! offset size  field
//! 0      4     magic "F2CM"
//! 4      1     version (1)
//! 5      1     sender id
//! 6      1     round
//! 7      1     kind (0 = M, 1 = G)
//! 8      2     channel count C
//! 10     4     entry count n
//! 14     24    sender pose x, y, yaw (f64)
//! 38     n * (4 + 4C)
//!              row u16, col u16, C x f32
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::grid::{world_to_grid, CellIndex, FeatureMap, GridSpec, Pose2D};
use crate::selection::SelectionMatrix;

pub const MAGIC: [u8; 4] = *b"F2CM";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 38;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    /// Confidence-masked features.
    M,
    /// Box-prior features.
    G,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::M => 0,
            MessageKind::G => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MessageKind::M),
            1 => Some(MessageKind::G),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEntry {
    pub row: u16,
    pub col: u16,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageHeader {
    pub sender: u8,
    pub round: u8,
    pub kind: MessageKind,
    pub pose: Pose2D,
}

/// One agent's sparse share of a feature map.
///
/// Entries are strictly increasing in `(row, col)`, and each carries `C`
/// finite values with at least one nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMessage {
    header: MessageHeader,
    channels: u16,
    entries: Vec<SparseEntry>,
}

impl SparseFeatureMessage {
    pub fn new(header: MessageHeader, channels: u16, entries: Vec<SparseEntry>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidMessage("zero channels".into()));
        }
        if entries.len() > u32::MAX as usize {
            return Err(Error::InvalidMessage("too many entries".into()));
        }
        let p = header.pose;
        if !(p.x.is_finite() && p.y.is_finite() && (-std::f64::consts::PI..std::f64::consts::PI).contains(&p.yaw)) {
            return Err(Error::InvalidMessage(format!("invalid pose {p:?}")));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.features.len() != channels as usize {
                return Err(Error::InvalidMessage(format!(
                    "entry {i} has {} values, expected {channels}",
                    e.features.len()
                )));
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMessage(format!("entry {i} is not finite")));
            }
            if e.features.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidMessage(format!("entry {i} is all zero")));
            }
            if i > 0 && (entries[i - 1].row, entries[i - 1].col) >= (e.row, e.col) {
                return Err(Error::InvalidMessage(format!("entry {i} out of order or duplicated")));
            }
        }
        Ok(SparseFeatureMessage {
            header,
            channels,
            entries,
        })
    }

    pub fn header(&self) -> &MessageHeader {
        &self.header
    }

    pub fn sender(&self) -> u8 {
        self.header.sender
    }

    pub fn kind(&self) -> MessageKind {
        self.header.kind
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    pub fn entries(&self) -> &[SparseEntry] {
        &self.entries
    }

    /// Scatters entries back into a dense map.
    pub fn densify(&self, spec: &GridSpec) -> Result<FeatureMap> {
        let mut f = FeatureMap::zeros(self.channels as usize, *spec);
        for e in &self.entries {
            let (r, c) = (e.row as usize, e.col as usize);
            if r >= spec.rows() || c >= spec.cols() {
                return Err(Error::InvalidMessage(format!("entry ({r}, {c}) outside grid")));
            }
            f.write_cell(r, c, &e.features);
        }
        Ok(f)
    }
}

/// One entry per selected cell whose feature vector is not all zero, in row-major order.
pub fn sparsify(features: &FeatureMap, sel: &SelectionMatrix, header: MessageHeader) -> Result<SparseFeatureMessage> {
    if sel.mask().dims() != (features.rows(), features.cols()) {
        return Err(Error::shape(
            format!("{}x{}", features.rows(), features.cols()),
            format!("{:?}", sel.mask().dims()),
        ));
    }
    let channels = u16::try_from(features.channels())
        .map_err(|_| Error::InvalidMessage("channel count exceeds 16 bits".into()))?;
    let mut entries = Vec::new();
    for r in 0..features.rows() {
        for c in 0..features.cols() {
            if sel.is_selected(r, c) && !features.cell_is_zero(r, c) {
                entries.push(SparseEntry {
                    row: r as u16,
                    col: c as u16,
                    features: features.cell_vector(r, c),
                });
            }
        }
    }
    SparseFeatureMessage::new(header, channels, entries)
}

pub fn frame_len(entries: usize, channels: usize) -> usize {
    HEADER_BYTES + entries * (4 + 4 * channels)
}

/// Encoded size of a message in bytes.
pub fn message_bytes(msg: &SparseFeatureMessage) -> usize {
    frame_len(msg.entries.len(), msg.channels as usize)
}

/// Payload bytes excluding the fixed header.
pub fn payload_bytes(msg: &SparseFeatureMessage) -> usize {
    message_bytes(msg) - HEADER_BYTES
}

/// `log2(total_bytes)`, with 0 for an empty exchange.
pub fn comm_volume_log2(total_bytes: u64) -> f64 {
    if total_bytes == 0 {
        0.0
    } else {
        (total_bytes as f64).log2()
    }
}

pub fn encode_message(msg: &SparseFeatureMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(message_bytes(msg));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.header.sender);
    out.push(msg.header.round);
    out.push(msg.header.kind.code());
    out.extend_from_slice(&msg.channels.to_le_bytes());
    out.extend_from_slice(&(msg.entries.len() as u32).to_le_bytes());
    for v in [msg.header.pose.x, msg.header.pose.y, msg.header.pose.yaw] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in &msg.entries {
        out.extend_from_slice(&e.row.to_le_bytes());
        out.extend_from_slice(&e.col.to_le_bytes());
        for v in &e.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("zero channel count")]
    ZeroChannels,
    #[error("truncated frame: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("invalid sender pose")]
    BadPose,
    #[error("entry {index} at ({row}, {col}) lies outside the {rows}x{cols} grid")]
    OutOfGrid {
        index: usize,
        row: u16,
        col: u16,
        rows: usize,
        cols: usize,
    },
    #[error("entry {0} is out of order or duplicated")]
    Unordered(usize),
    #[error("entry {0} is all zero")]
    ZeroEntry(usize),
    #[error("entry {0} holds a non-finite value")]
    NonFinite(usize),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
}

/// Parses and validates a frame against the receiving grid.
pub fn decode_message(bytes: &[u8], spec: &GridSpec) -> Result<SparseFeatureMessage, DecodeError> {
    if bytes.len() < HEADER_BYTES {
        return Err(DecodeError::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic = rd.take::<4>();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let [version] = rd.take::<1>();
    if version != VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let [sender] = rd.take::<1>();
    let [round] = rd.take::<1>();
    let [kind_code] = rd.take::<1>();
    let kind = MessageKind::from_code(kind_code).ok_or(DecodeError::BadKind(kind_code))?;
    let channels = u16::from_le_bytes(rd.take::<2>());
    if channels == 0 {
        return Err(DecodeError::ZeroChannels);
    }
    let n = u32::from_le_bytes(rd.take::<4>()) as usize;
    let x = f64::from_le_bytes(rd.take::<8>());
    let y = f64::from_le_bytes(rd.take::<8>());
    let yaw = f64::from_le_bytes(rd.take::<8>());
    if !(x.is_finite() && y.is_finite() && (-std::f64::consts::PI..std::f64::consts::PI).contains(&yaw)) {
        return Err(DecodeError::BadPose);
    }

    let expected = frame_len(n, channels as usize);
    if bytes.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DecodeError::TrailingBytes(bytes.len() - expected));
    }

    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let row = u16::from_le_bytes(rd.take::<2>());
        let col = u16::from_le_bytes(rd.take::<2>());
        if row as usize >= spec.rows() || col as usize >= spec.cols() {
            return Err(DecodeError::OutOfGrid {
                index,
                row,
                col,
                rows: spec.rows(),
                cols: spec.cols(),
            });
        }
        let features: Vec<f32> = (0..channels).map(|_| f32::from_le_bytes(rd.take::<4>())).collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::NonFinite(index));
        }
        if features.iter().all(|&v| v == 0.0) {
            return Err(DecodeError::ZeroEntry(index));
        }
        if let Some(prev) = entries.last() {
            let prev: &SparseEntry = prev;
            if (prev.row, prev.col) >= (row, col) {
                return Err(DecodeError::Unordered(index));
            }
        }
        entries.push(SparseEntry { row, col, features });
    }
    Ok(SparseFeatureMessage {
        header: MessageHeader {
            sender,
            round,
            kind,
            pose: Pose2D { x, y, yaw },
        },
        channels,
        entries,
    })
}

/// Received entries re-binned into the ego grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedEntries {
    pub sender: u8,
    pub kind: MessageKind,
    pub spec: GridSpec,
    pub channels: usize,
    /// Sorted by cell.
    pub entries: Vec<(CellIndex, Vec<f32>)>,
    /// Entries whose target fell outside the ego grid.
    pub dropped: usize,
    /// Entries discarded because a stronger entry claimed the same target cell.
    pub collisions: usize,
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Moves each entry's cell center through `ego_est^-1 ∘ sender_est` and bins
/// it to the nearest ego cell. On collision the entry with the larger L2 norm
/// wins; equal norms keep the earlier entry.
pub fn warp_to_ego(msg: &SparseFeatureMessage, ego_estimated: &Pose2D, spec: &GridSpec) -> WarpedEntries {
    let rel = ego_estimated.inverse().compose(&msg.header.pose);
    let mut bins: BTreeMap<CellIndex, (f64, Vec<f32>)> = BTreeMap::new();
    let mut dropped = 0;
    let mut collisions = 0;
    for e in &msg.entries {
        let src = spec.cell_center(CellIndex::new(e.row as usize, e.col as usize));
        let Ok(dst) = world_to_grid(rel.apply(src), spec) else {
            dropped += 1;
            continue;
        };
        let norm = l2(&e.features);
        match bins.get_mut(&dst) {
            Some(slot) => {
                collisions += 1;
                if norm > slot.0 {
                    *slot = (norm, e.features.clone());
                }
            }
            None => {
                bins.insert(dst, (norm, e.features.clone()));
            }
        }
    }
    WarpedEntries {
        sender: msg.header.sender,
        kind: msg.header.kind,
        spec: *spec,
        channels: msg.channels as usize,
        entries: bins.into_iter().map(|(c, (_, f))| (c, f)).collect(),
        dropped,
        collisions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;
    use crate::selection::SelectionKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(kind: MessageKind) -> MessageHeader {
        MessageHeader {
            sender: 2,
            round: 0,
            kind,
            pose: Pose2D::new(1.5, -2.0, 0.4),
        }
    }

    fn dense(rng: &mut impl Rng, c: usize, spec: GridSpec) -> FeatureMap {
        let v = (0..c * spec.len()).map(|_| rng.random_range(0.1f32..1.0)).collect();
        FeatureMap::from_values(c, spec, v).unwrap()
    }

    #[test]
    fn empty_selection_gives_empty_message() {
        let spec = GridSpec::centered(8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = dense(&mut rng, 3, spec);
        let sel = SelectionMatrix::new(Mask::filled(8, 8, false), SelectionKind::TopK);
        let m = sparsify(&f, &sel, header(MessageKind::M)).unwrap();
        assert!(m.entries().is_empty());
        assert_eq!(encode_message(&m).len(), 38);
        let all = SelectionMatrix::new(Mask::filled(8, 8, true), SelectionKind::TopK);
        assert_eq!(sparsify(&f, &all, header(MessageKind::M)).unwrap().entries().len(), 64);
    }

    #[test]
    fn densify_sparsify_equals_masking() {
        let spec = GridSpec::centered(10, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut f = dense(&mut rng, 4, spec);
            // some all-zero cells that must not be emitted
            for _ in 0..10 {
                let (r, c) = (rng.random_range(0..10), rng.random_range(0..10));
                f.write_cell(r, c, &[0.0; 4]);
            }
            let mask = Mask::from_fn(10, 10, |_, _| rng.random_bool(0.3));
            let sel = SelectionMatrix::new(mask.clone(), SelectionKind::TopK);
            let m = sparsify(&f, &sel, header(MessageKind::G)).unwrap();
            assert_eq!(m.densify(&spec).unwrap(), f.masked(&mask).unwrap());
        }
    }

    #[test]
    fn frame_length_formula() {
        assert_eq!(frame_len(0, 17), 38);
        assert_eq!(frame_len(3, 64), 818);
        let spec = GridSpec::centered(4, 2.0).unwrap();
        let entries = (0..3)
            .map(|i| SparseEntry {
                row: i,
                col: 1,
                features: vec![1.0; 64],
            })
            .collect();
        let m = SparseFeatureMessage::new(header(MessageKind::M), 64, entries).unwrap();
        let bytes = encode_message(&m);
        assert_eq!(bytes.len(), 818);
        assert_eq!(message_bytes(&m), 818);
        assert_eq!(decode_message(&bytes, &spec).unwrap(), m);
    }

    #[test]
    fn volume_log2() {
        assert_eq!(comm_volume_log2(1024), 10.0);
        assert_eq!(comm_volume_log2(0), 0.0);
        assert_eq!(comm_volume_log2(1), 0.0);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let spec = GridSpec::centered(4, 2.0).unwrap();
        let m = SparseFeatureMessage::new(
            header(MessageKind::M),
            2,
            vec![
                SparseEntry {
                    row: 1,
                    col: 1,
                    features: vec![1.0, 2.0],
                },
                SparseEntry {
                    row: 3,
                    col: 0,
                    features: vec![0.0, -1.0],
                },
            ],
        )
        .unwrap();
        let good = encode_message(&m);

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_message(&b, &spec), Err(DecodeError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::BadVersion(9)));
        let mut b = good.clone();
        b[7] = 5;
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::BadKind(5)));
        assert!(matches!(
            decode_message(&good[..good.len() - 1], &spec),
            Err(DecodeError::Truncated { .. })
        ));
        assert!(matches!(
            decode_message(&good[..10], &spec),
            Err(DecodeError::Truncated { .. })
        ));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::TrailingBytes(1)));
        let small = GridSpec::centered(3, 2.0).unwrap();
        assert!(matches!(
            decode_message(&good, &small),
            Err(DecodeError::OutOfGrid { index: 1, .. })
        ));
        // swap the two entries' positions
        let mut b = good.clone();
        b[38..40].copy_from_slice(&3u16.to_le_bytes());
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::Unordered(1)));
        let mut b = good.clone();
        b[42..50].fill(0);
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::ZeroEntry(0)));
        let mut b = good.clone();
        b[42..46].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::NonFinite(0)));
        let mut b = good;
        b[30..38].copy_from_slice(&10.0f64.to_le_bytes());
        assert_eq!(decode_message(&b, &spec), Err(DecodeError::BadPose));
    }

    #[test]
    fn constructor_rejects_invalid_entries() {
        let e = |row, col, f: Vec<f32>| SparseEntry { row, col, features: f };
        let h = header(MessageKind::M);
        assert!(SparseFeatureMessage::new(h, 2, vec![e(0, 0, vec![0.0, 0.0])]).is_err());
        assert!(SparseFeatureMessage::new(h, 2, vec![e(0, 0, vec![1.0])]).is_err());
        assert!(SparseFeatureMessage::new(h, 2, vec![e(0, 1, vec![1.0, 1.0]), e(0, 1, vec![1.0, 1.0])]).is_err());
        assert!(SparseFeatureMessage::new(h, 0, vec![]).is_err());
    }

    #[test]
    fn identity_warp_keeps_indices() {
        let spec = GridSpec::centered(16, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = dense(&mut rng, 2, spec);
        let sel = SelectionMatrix::new(Mask::from_fn(16, 16, |_, _| rng.random_bool(0.5)), SelectionKind::TopK);
        let m = sparsify(&f, &sel, header(MessageKind::M)).unwrap();
        let w = warp_to_ego(&m, &m.header().pose, &spec);
        assert_eq!(w.dropped, 0);
        assert_eq!(w.collisions, 0);
        let got: Vec<_> = w
            .entries
            .iter()
            .map(|(c, v)| (c.row as u16, c.col as u16, v.clone()))
            .collect();
        let want: Vec<_> = m.entries().iter().map(|e| (e.row, e.col, e.features.clone())).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn one_cell_translation_shifts_rows() {
        let spec = GridSpec::centered(16, 8.0).unwrap();
        let ego = Pose2D::new(3.0, 1.0, 0.0);
        let mut h = header(MessageKind::M);
        h.pose = Pose2D::new(3.0 + spec.cell_x(), 1.0, 0.0);
        let entries: Vec<_> = (0..15)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .map(|(r, c)| SparseEntry {
                row: r,
                col: c,
                features: vec![r as f32 + 1.0],
            })
            .collect();
        let m = SparseFeatureMessage::new(h, 1, entries).unwrap();
        let w = warp_to_ego(&m, &ego, &spec);
        assert_eq!(w.dropped, 0);
        for (cell, v) in &w.entries {
            assert_eq!(cell.row as f32, v[0]);
        }
        assert_eq!(w.entries.len(), 15 * 16);
    }
}
