//! Lattice grids for discretizing and measuring regions, and exact
//! nearest-neighbor distance queries against point sets.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{empirical_quantile, squared_distance};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPurpose {
    AreaMeasurement,
    RegionDiscretization,
}

impl GridPurpose {
    pub fn margin(self) -> f64 {
        match self {
            GridPurpose::AreaMeasurement => 0.2,
            GridPurpose::RegionDiscretization => 1.0,
        }
    }
}

/// Cells per axis for a grid of the given dimension and purpose.
pub fn cells_per_dim(dim: usize, purpose: GridPurpose) -> Result<usize> {
    use GridPurpose::*;
    Ok(match (dim, purpose) {
        (1 | 2, RegionDiscretization) => 100,
        (1 | 2, AreaMeasurement) => 55,
        (3, RegionDiscretization) => 35,
        (3, AreaMeasurement) => 47,
        (4, RegionDiscretization) => 18,
        (4, AreaMeasurement) => 22,
        _ => return Err(Error::UnsupportedDimension(dim)),
    })
}

/// Axis-aligned lattice of cell centers, enumerated row-major (last axis
/// fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub cells: Vec<usize>,
    pub purpose: GridPurpose,
}

impl Grid {
    pub fn new(low: Vec<f64>, high: Vec<f64>, cells: Vec<usize>, purpose: GridPurpose) -> Result<Self> {
        if low.len() != high.len() || low.len() != cells.len() || low.is_empty() {
            return Err(invalid("grid bounds and cell counts must have equal nonzero length"));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(invalid("grid bounds must be finite with low < high"));
        }
        if cells.iter().any(|&c| c == 0) {
            return Err(invalid("grid cell counts must be positive"));
        }
        Ok(Self { low, high, cells, purpose })
    }

    /// Standard grid for `dim`, centered on `center` with half-width `half`.
    pub fn cube(center: &[f64], half: f64, purpose: GridPurpose) -> Result<Self> {
        let c = cells_per_dim(center.len(), purpose)?;
        Self::new(
            center.iter().map(|v| v - half).collect(),
            center.iter().map(|v| v + half).collect(),
            vec![c; center.len()],
            purpose,
        )
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.high[axis] - self.low[axis]) / self.cells[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.step(j)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    fn coord(&self, axis: usize, k: usize) -> f64 {
        self.low[axis] + (k as f64 + 0.5) * self.step(axis)
    }

    /// Multi-index of flat index `i`.
    pub fn unravel(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            idx[j] = i % self.cells[j];
            i /= self.cells[j];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.cells).fold(0, |acc, (&k, &c)| acc * c + k)
    }

    pub fn point_into(&self, i: usize, out: &mut [f64]) {
        let mut rest = i;
        for j in (0..self.dim()).rev() {
            out[j] = self.coord(j, rest % self.cells[j]);
            rest /= self.cells[j];
        }
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(i, &mut p);
        p
    }

    /// All cell centers as a `len × dim` matrix.
    pub fn points(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            self.point_into(i, row.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn inside_box(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Distance from an interior point to the box boundary; zero outside.
    pub fn boundary_distance(&self, y: &[f64]) -> f64 {
        if !self.inside_box(y) {
            return 0.0;
        }
        y.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(v, (l, h))| (v - l).min(h - v))
            .fold(f64::INFINITY, f64::min)
    }

    /// Inclusive per-axis index range of cells whose centers could lie within
    /// `radius` of `y`. `None` if the ball misses the lattice.
    fn index_window(&self, y: &[f64], radius: f64) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let s = self.step(j);
            let lo = ((y[j] - radius - self.low[j]) / s - 0.5).floor() - 1.0;
            let hi = ((y[j] + radius - self.low[j]) / s - 0.5).ceil() + 1.0;
            let max = (self.cells[j] - 1) as f64;
            if hi < 0.0 || lo > max {
                return None;
            }
            out.push((lo.max(0.0) as usize, hi.min(max) as usize));
        }
        Some(out)
    }

    /// Marks every cell whose center is within `radius` of some carrier point
    /// (distance compared as `sqrt(squared) <= radius`, the same predicate as
    /// [`within`]).
    pub fn dilation_mask(&self, carrier: ArrayView2<f64>, radius: f64) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        if radius < 0.0 {
            return mask;
        }
        let d = self.dim();
        let coords: Vec<Vec<f64>> = (0..d).map(|j| (0..self.cells[j]).map(|k| self.coord(j, k)).collect()).collect();
        // Per-axis squared offsets over the window; summed in axis order they
        // reproduce `squared_distance` exactly.
        let mut sq: Vec<Vec<f64>> = vec![Vec::new(); d];
        for a in carrier.rows() {
            let a = a.as_slice().expect("standard layout");
            let Some(win) = self.index_window(a, radius) else { continue };
            for j in 0..d {
                sq[j].clear();
                sq[j].extend(coords[j][win[j].0..=win[j].1].iter().map(|c| (c - a[j]) * (c - a[j])));
            }
            self.stamp(&mut mask, &sq, &win, radius, 0, 0.0, 0);
        }
        mask
    }

    /// Marks the window cells within `radius`, one axis at a time. Partial
    /// sums only grow, so a prefix already out of range prunes its block.
    #[allow(clippy::too_many_arguments)]
    fn stamp(&self, mask: &mut [bool], sq: &[Vec<f64>], win: &[(usize, usize)], radius: f64, axis: usize, acc: f64, prefix: usize) {
        let last = axis + 1 == sq.len();
        for (k, t) in sq[axis].iter().enumerate() {
            let s = acc + t;
            if !within(s, radius) {
                continue;
            }
            let flat = prefix * self.cells[axis] + win[axis].0 + k;
            if last {
                mask[flat] = true;
            } else {
                self.stamp(mask, sq, win, radius, axis + 1, s, flat);
            }
        }
    }

    /// Flat indices of the cells face-adjacent to `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let idx = self.unravel(i);
        let mut out = Vec::with_capacity(2 * self.dim());
        for j in 0..self.dim() {
            if idx[j] > 0 {
                let mut n = idx.clone();
                n[j] -= 1;
                out.push(self.ravel(&n));
            }
            if idx[j] + 1 < self.cells[j] {
                let mut n = idx.clone();
                n[j] += 1;
                out.push(self.ravel(&n));
            }
        }
        out
    }
}

/// `‖a − y‖ ≤ radius` given the squared distance. Every membership test in
/// the crate goes through this so that dilation masks, tree queries and
/// brute force agree bit for bit.
#[inline]
pub fn within(squared: f64, radius: f64) -> bool {
    squared.sqrt() <= radius
}

/// Grid over the 1%/99% empirical quantiles of `responses` widened by the
/// purpose's margin.
pub fn build_grid(responses: ArrayView2<f64>, purpose: GridPurpose) -> Result<Grid> {
    let d = responses.ncols();
    let cells = cells_per_dim(d, purpose)?;
    let n = responses.nrows();
    if n < 2 {
        return Err(invalid("grid construction needs at least 2 rows"));
    }
    let lo_k = ((0.01 * n as f64).ceil() as usize).clamp(1, n);
    let hi_k = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    let m = purpose.margin();
    let mut low = Vec::with_capacity(d);
    let mut high = Vec::with_capacity(d);
    for col in responses.columns() {
        let v: Vec<f64> = col.to_vec();
        low.push(empirical_quantile(&v, lo_k)? - m);
        high.push(empirical_quantile(&v, hi_k)? + m);
    }
    Grid::new(low, high, vec![cells; d], purpose)
}

/// Number of grid cells whose center satisfies `member`.
pub fn area<F>(grid: &Grid, member: F) -> usize
where
    F: Fn(&[f64]) -> bool + Sync + Send,
{
    par::count_range(grid.len(), |i| member(&grid.point(i)))
}

/// Exact minimum Euclidean distance from `y` to the rows of `carrier`.
pub fn min_distance(y: &[f64], carrier: ArrayView2<f64>) -> Result<f64> {
    if carrier.nrows() == 0 {
        return Err(Error::EmptyCarrier);
    }
    if carrier.ncols() != y.len() {
        return Err(invalid("query and carrier dimensions differ"));
    }
    let best = carrier
        .rows()
        .into_iter()
        .map(|a| squared_distance(a.as_slice().expect("standard layout"), y))
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// k-d tree over a fixed point set. Queries return exactly the value brute
/// force would: candidate distances use the same summation and pruning only
/// discards subtrees whose lower bound strictly exceeds the current best.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Array2<f64>,
    order: Vec<usize>,
    /// Rows copied in `order`, flat, so leaves scan contiguous memory.
    packed: Vec<f64>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    pub fn new(points: Array2<f64>) -> Self {
        let n = points.nrows();
        let mut tree = Self {
            points,
            order: (0..n).collect(),
            packed: Vec::new(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        let mut packed = Vec::with_capacity(tree.points.len());
        for &i in &tree.order {
            packed.extend(tree.points.row(i).iter());
        }
        tree.packed = packed;
        tree
    }

    pub fn from_view(points: ArrayView2<f64>) -> Self {
        Self::new(points.as_standard_layout().into_owned())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let d = self.points.ncols();
        let mut axis = 0;
        let mut spread = -1.0;
        for j in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.points[(i, j)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > spread {
                spread = hi - lo;
                axis = j;
            }
        }
        if spread <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[(a, axis)].total_cmp(&pts[(b, axis)]));
        let value = self.points[(self.order[mid], axis)];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Squared distance to the nearest point, skipping index `skip`. With
    /// `stop` set, returns as soon as some point is within that radius.
    fn nearest_sq(&self, y: &[f64], skip: Option<usize>, stop: Option<f64>) -> f64 {
        let mut best = f64::INFINITY;
        if self.nodes.is_empty() {
            return best;
        }
        let d = self.points.ncols();
        // Splits are at medians, so depth stays below 64 for any usize count.
        let mut stack = [(0usize, 0.0f64); 64];
        let mut top = 1;
        while top > 0 {
            top -= 1;
            let (id, bound) = stack[top];
            if bound > best {
                continue;
            }
            match self.nodes[id] {
                Node::Leaf { start, end } => {
                    for pos in start..end {
                        if Some(self.order[pos]) == skip {
                            continue;
                        }
                        let s = squared_distance(&self.packed[pos * d..(pos + 1) * d], y);
                        if s < best {
                            best = s;
                            if stop.is_some_and(|r| within(s, r)) {
                                return best;
                            }
                        }
                    }
                }
                Node::Split { axis, value, left, right } => {
                    let diff = y[axis] - value;
                    let gap = diff * diff;
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    stack[top] = (far, gap.max(bound));
                    stack[top + 1] = (near, bound);
                    top += 2;
                }
            }
        }
        best
    }

    /// Minimum distance from `y` to the point set.
    pub fn min_distance(&self, y: &[f64]) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyCarrier);
        }
        Ok(self.nearest_sq(y, None, None).sqrt())
    }

    /// `min distance(y) ≤ radius`, stopping at the first witness.
    pub fn any_within(&self, y: &[f64], radius: f64) -> bool {
        !self.is_empty() && within(self.nearest_sq(y, None, Some(radius)), radius)
    }

    /// For every point, the distance to its nearest other point.
    pub fn nearest_neighbor_distances(&self) -> Vec<f64> {
        par::map_range(self.len(), |i| {
            let row = self.points.row(i);
            self.nearest_sq(row.as_slice().expect("standard layout"), Some(i), None).sqrt()
        })
    }
}
