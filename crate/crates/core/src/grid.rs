//! BEV grid geometry: grid specs, dense feature maps, box types, SE(2) poses,
//! and the IoU primitives used by selection and evaluation.
//!
//! Conventions: ego-frame `x` maps to grid rows and `y` to grid columns. Cells
//! are half-open intervals `[low, high)` along both axes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`. Angles already in range are returned bit-identical.
pub fn normalize_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on 2*pi for tiny negative inputs
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    rows: usize,
    cols: usize,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridSpec {
    rows: usize,
    cols: usize,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = Error;

    fn try_from(r: RawGridSpec) -> Result<Self> {
        GridSpec::new(r.rows, r.cols, (r.x_min, r.x_max), (r.y_min, r.y_max))
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(g: GridSpec) -> Self {
        RawGridSpec {
            rows: g.rows,
            cols: g.cols,
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
        }
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Result<Self> {
        let (x_min, x_max) = x_range;
        let (y_min, y_max) = y_range;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid(format!("empty grid {rows}x{cols}")));
        }
        if rows > u16::MAX as usize || cols > u16::MAX as usize {
            return Err(Error::InvalidGrid(format!(
                "grid {rows}x{cols} exceeds 16-bit index range"
            )));
        }
        if !(x_min.is_finite() && x_max.is_finite() && y_min.is_finite() && y_max.is_finite()) {
            return Err(Error::InvalidGrid("non-finite extent".into()));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::InvalidGrid(format!(
                "empty extent x [{x_min}, {x_max}) y [{y_min}, {y_max})"
            )));
        }
        Ok(GridSpec {
            rows,
            cols,
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// Square grid centered on the origin with `cells` cells per axis.
    pub fn centered(cells: usize, half_range: f64) -> Result<Self> {
        Self::new(cells, cells, (-half_range, half_range), (-half_range, half_range))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y_min, self.y_max)
    }

    pub fn cell_x(&self) -> f64 {
        (self.x_max - self.x_min) / self.rows as f64
    }

    pub fn cell_y(&self) -> f64 {
        (self.y_max - self.y_min) / self.cols as f64
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] < self.x_max && p[1] >= self.y_min && p[1] < self.y_max
    }

    /// Continuous (fractional) grid coordinates of an ego-frame point.
    pub fn continuous_index(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.x_min) / self.cell_x(), (p[1] - self.y_min) / self.cell_y()]
    }

    pub fn cell_center(&self, cell: CellIndex) -> [f64; 2] {
        [
            self.x_min + (cell.row as f64 + 0.5) * self.cell_x(),
            self.y_min + (cell.col as f64 + 0.5) * self.cell_y(),
        ]
    }

    /// Meter interval `[low, high)` covered by a cell along x and y.
    pub fn cell_bounds(&self, cell: CellIndex) -> AabbBEV {
        AabbBEV {
            x1: self.x_min + cell.row as f64 * self.cell_x(),
            y1: self.y_min + cell.col as f64 * self.cell_y(),
            x2: self.x_min + (cell.row + 1) as f64 * self.cell_x(),
            y2: self.y_min + (cell.col + 1) as f64 * self.cell_y(),
        }
    }

    pub fn flat(&self, cell: CellIndex) -> usize {
        cell.row * self.cols + cell.col
    }

    pub fn unflat(&self, idx: usize) -> CellIndex {
        CellIndex {
            row: idx / self.cols,
            col: idx % self.cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Self {
        CellIndex { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("point ({x}, {y}) lies outside the grid")]
pub struct OutOfBounds {
    pub x: f64,
    pub y: f64,
}

/// Maps an ego-frame point to the cell containing it.
///
/// Out-of-range points are reported rather than clamped; callers decide
/// whether to drop or clamp.
pub fn world_to_grid(p: [f64; 2], spec: &GridSpec) -> Result<CellIndex, OutOfBounds> {
    if !spec.contains(p) {
        return Err(OutOfBounds { x: p[0], y: p[1] });
    }
    let [u, v] = spec.continuous_index(p);
    // p < max can still round up to the row count
    let row = (u.floor() as usize).min(spec.rows - 1);
    let col = (v.floor() as usize).min(spec.cols - 1);
    Ok(CellIndex { row, col })
}

/// Dense row-major 2D grid of values (masks, score maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Mask = Grid2<bool>;
pub type ScoreMap = Grid2<f64>;

impl<T: Clone> Grid2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(rows * cols, data.len()));
        }
        Ok(Grid2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn matches(&self, spec: &GridSpec) -> bool {
        self.rows == spec.rows() && self.cols == spec.cols()
    }
}

impl Grid2<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// C x H x W dense feature grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    spec: GridSpec,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, spec: GridSpec) -> Self {
        FeatureMap {
            channels,
            spec,
            values: vec![0.0; channels * spec.len()],
        }
    }

    pub fn from_values(channels: usize, spec: GridSpec, values: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channels", "must be at least 1"));
        }
        if values.len() != channels * spec.len() {
            return Err(Error::shape(
                format!("{channels}x{}x{}", spec.rows(), spec.cols()),
                format!("{} values", values.len()),
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureMap { channels, spec, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows()
    }

    pub fn cols(&self) -> usize {
        self.spec.cols()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    fn offset(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.spec.rows() + row) * self.spec.cols() + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[self.offset(channel, row, col)]
    }

    /// Sets one value. Non-finite values are rejected to keep the map finite.
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) -> Result<()> {
        let i = self.offset(channel, row, col);
        if !value.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        self.values[i] = value;
        Ok(())
    }

    /// The C-vector stored at one cell.
    pub fn cell_vector(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|ch| self.get(ch, row, col)).collect()
    }

    pub(crate) fn write_cell(&mut self, row: usize, col: usize, vector: &[f32]) {
        debug_assert_eq!(vector.len(), self.channels);
        for (ch, &v) in vector.iter().enumerate() {
            let i = self.offset(ch, row, col);
            self.values[i] = v;
        }
    }

    pub fn cell_is_zero(&self, row: usize, col: usize) -> bool {
        (0..self.channels).all(|ch| self.get(ch, row, col) == 0.0)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.spec == other.spec
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels, self.rows(), self.cols())
    }

    /// Multiplies every channel of each cell by the mask value at that cell.
    pub fn masked(&self, mask: &Mask) -> Result<FeatureMap> {
        if !mask.matches(&self.spec) {
            return Err(Error::shape(
                format!("{}x{}", self.rows(), self.cols()),
                format!("{}x{}", mask.rows(), mask.cols()),
            ));
        }
        let plane = self.spec.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.as_slice()[i % plane] { v } else { 0.0 })
            .collect();
        Ok(FeatureMap {
            channels: self.channels,
            spec: self.spec,
            values,
        })
    }
}

/// Rigid SE(2) transform / agent pose: maps points from the local frame to the parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2D {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose2D {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let [x, y] = self.apply([other.x, other.y]);
        Pose2D::new(x, y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }
}

/// Object box: center, extents, heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box7D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl TryFrom<[f64; 7]> for Box7D {
    type Error = Error;

    fn try_from(v: [f64; 7]) -> Result<Self> {
        Box7D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }
}

impl From<Box7D> for [f64; 7] {
    fn from(b: Box7D) -> Self {
        [b.x, b.y, b.z, b.l, b.w, b.h, b.theta]
    }
}

impl Box7D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let all = [x, y, z, l, w, h, theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox("non-finite field".into()));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("extents must be positive, got {l}x{w}x{h}")));
        }
        Ok(Box7D {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        })
    }

    /// Footprint corners in the box's parent frame, counter-clockwise from rear-left:
    /// rear-left, rear-right, front-right, front-left.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[-hl, hw], [-hl, -hw], [hl, -hw], [hl, hw]];
        let pose = Pose2D {
            x: self.x,
            y: self.y,
            yaw: self.theta,
        };
        local.map(|p| pose.apply(p))
    }

    /// The eight cuboid corners: the four footprint corners at `z - h/2`, then the same four at `z + h/2`.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let (lo, hi) = (self.z - self.h / 2.0, self.z + self.h / 2.0);
        let mut out = [[0.0; 3]; 8];
        for (i, p) in fp.iter().enumerate() {
            out[i] = [p[0], p[1], lo];
            out[i + 4] = [p[0], p[1], hi];
        }
        out
    }

    /// The same box expressed in another frame.
    pub fn transformed(&self, t: &Pose2D) -> Box7D {
        let [x, y] = t.apply([self.x, self.y]);
        Box7D {
            x,
            y,
            theta: normalize_angle(self.theta + t.yaw),
            ..*self
        }
    }
}

/// Axis-aligned BEV box, `(x1, y1)` bottom-left and `(x2, y2)` top-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AabbBEV {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl AabbBEV {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidBox(format!("empty aabb ({x1},{y1})-({x2},{y2})")));
        }
        Ok(AabbBEV { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x1 && p[0] <= self.x2 && p[1] >= self.y1 && p[1] <= self.y2
    }

    pub fn to_quad(&self) -> QuadBEV {
        QuadBEV {
            pts: [
                [self.x1, self.y1],
                [self.x2, self.y1],
                [self.x2, self.y2],
                [self.x1, self.y2],
            ],
        }
    }
}

/// Convex BEV quadrilateral with counter-clockwise vertex order and positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadBEV {
    pts: [[f64; 2]; 4],
}

const AREA_EPS: f64 = 1e-12;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn shoelace(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

impl QuadBEV {
    /// Builds a quad, reordering clockwise input to counter-clockwise.
    pub fn new(mut pts: [[f64; 2]; 4]) -> Result<Self> {
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox("non-finite corner".into()));
        }
        let area = shoelace(&pts);
        if area.abs() <= AREA_EPS {
            return Err(Error::DegeneratePolygon { area });
        }
        if area < 0.0 {
            pts.reverse();
        }
        for i in 0..4 {
            if cross(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]) < 0.0 {
                return Err(Error::NonConvexPolygon);
            }
        }
        Ok(QuadBEV { pts })
    }

    pub fn corners(&self) -> &[[f64; 2]; 4] {
        &self.pts
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.pts)
    }

    pub fn aabb(&self) -> AabbBEV {
        let mut b = AabbBEV {
            x1: f64::INFINITY,
            y1: f64::INFINITY,
            x2: f64::NEG_INFINITY,
            y2: f64::NEG_INFINITY,
        };
        for p in &self.pts {
            b.x1 = b.x1.min(p[0]);
            b.y1 = b.y1.min(p[1]);
            b.x2 = b.x2.max(p[0]);
            b.y2 = b.y2.max(p[1]);
        }
        b
    }

    /// Closed point-in-polygon test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..4).all(|i| cross(self.pts[i], self.pts[(i + 1) % 4], p) >= 0.0)
    }

    pub fn centroid(&self) -> [f64; 2] {
        let s = self.pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / 4.0, s[1] / 4.0]
    }
}

/// Projects a box into the target frame: rotated footprint plus its axis-aligned envelope.
pub fn box7d_to_bev(b: &Box7D, to_target: &Pose2D) -> (QuadBEV, AabbBEV) {
    let pts = b.footprint().map(|p| to_target.apply(p));
    // rigid transform of a valid footprint is always a valid quad
    let quad = QuadBEV { pts };
    let aabb = quad.aabb();
    (quad, aabb)
}

pub fn iou_aabb(a: &AabbBEV, b: &AabbBEV) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman: clips `subject` against the convex CCW polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| cross(e0, e1, p) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| {
            let dp = cross(e0, e1, p);
            let dq = cross(e0, e1, q);
            let t = dp / (dp - dq);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        let mut prev = input[input.len() - 1];
        for &cur in &input {
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(intersect(prev, cur)),
                (false, true) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, false) => {}
            }
            prev = cur;
        }
    }
    output
}

pub fn intersection_area(a: &QuadBEV, b: &QuadBEV) -> f64 {
    let poly = clip_polygon(&a.pts, &b.pts);
    if poly.len() < 3 {
        return 0.0;
    }
    shoelace(&poly).max(0.0)
}

/// Exact IoU of two convex quads. Degenerate quads cannot be constructed, so
/// this never fails.
pub fn iou_rotated(a: &QuadBEV, b: &QuadBEV) -> f64 {
    // cheap reject on envelopes
    let (ea, eb) = (a.aabb(), b.aabb());
    if ea.x2 <= eb.x1 || eb.x2 <= ea.x1 || ea.y2 <= eb.y1 || eb.y2 <= ea.y1 {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
