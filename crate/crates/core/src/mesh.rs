//! Uniform space-time background mesh and its composite trapezoidal rule.
//!
//! Quadrature nodes are the mesh cell corners (optionally refined by an
//! integer oversampling factor per axis), so the rule is exact for every
//! function that is multilinear on each cell. Axes are ordered
//! `(x_1, ..., x_d, t)` and nodes/cells are flattened row-major with axis 0
//! slowest.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One tensor axis of the mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis<S> {
    pub lo: S,
    pub hi: S,
    pub cells: usize,
}

impl<S: Scalar> Axis<S> {
    pub fn cell_width(&self) -> S {
        (self.hi - self.lo) / S::of(self.cells as f64)
    }
}

/// Cell of the background mesh: spatial indices plus the time index.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub ix: Vec<usize>,
    pub it: usize,
}

#[derive(Clone, Debug)]
pub struct QuadGrid<S> {
    axes: Vec<Axis<S>>,
    oversample: usize,
    h: S,
    node_shape: Vec<usize>,
    cell_shape: Vec<usize>,
    axis_weights: Vec<Vec<S>>,
    weights: Vec<S>,
}

impl<S: Scalar> QuadGrid<S> {
    /// Grid over `[lo, hi] x [0, t_final]`.
    pub fn build(
        lo: &[S],
        hi: &[S],
        t_final: S,
        n_cells_x: &[usize],
        n_cells_t: usize,
    ) -> Result<Self> {
        Self::build_span(lo, hi, S::zero(), t_final, n_cells_x, n_cells_t, 1)
    }

    /// Grid over `[lo, hi] x [t_lo, t_hi]` with `oversample` quadrature
    /// sub-intervals per mesh cell along every axis.
    pub fn build_span(
        lo: &[S],
        hi: &[S],
        t_lo: S,
        t_hi: S,
        n_cells_x: &[usize],
        n_cells_t: usize,
        oversample: usize,
    ) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != n_cells_x.len() {
            return Err(Error::Grid(format!(
                "spatial bounds/counts disagree: lo {}, hi {}, counts {}",
                lo.len(),
                hi.len(),
                n_cells_x.len()
            )));
        }
        if oversample == 0 {
            return Err(Error::Grid("oversample factor must be >= 1".into()));
        }
        let mut axes = Vec::with_capacity(lo.len() + 1);
        for j in 0..lo.len() {
            axes.push(Axis {
                lo: lo[j],
                hi: hi[j],
                cells: n_cells_x[j],
            });
        }
        axes.push(Axis {
            lo: t_lo,
            hi: t_hi,
            cells: n_cells_t,
        });
        for (j, a) in axes.iter().enumerate() {
            if !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::Grid(format!("axis {j} has nonpositive extent")));
            }
            if a.cells == 0 {
                return Err(Error::Grid(format!("axis {j} has zero cells")));
            }
        }
        let h = axes
            .iter()
            .map(|a| {
                let w = a.cell_width();
                w * w
            })
            .sum::<S>()
            .sqrt();
        let node_shape: Vec<usize> = axes.iter().map(|a| a.cells * oversample + 1).collect();
        let cell_shape: Vec<usize> = axes.iter().map(|a| a.cells).collect();
        let axis_weights: Vec<Vec<S>> = axes
            .iter()
            .zip(&node_shape)
            .map(|(a, &n)| {
                let step = (a.hi - a.lo) / S::of((n - 1) as f64);
                let mut w = vec![step; n];
                w[0] = step * S::of(0.5);
                w[n - 1] = step * S::of(0.5);
                w
            })
            .collect();
        let total: usize = node_shape.iter().product();
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes.len()];
        for _ in 0..total {
            let mut w = S::one();
            for (k, &i) in idx.iter().enumerate() {
                w *= axis_weights[k][i];
            }
            weights.push(w);
            increment(&mut idx, &node_shape);
        }
        Ok(Self {
            axes,
            oversample,
            h,
            node_shape,
            cell_shape,
            axis_weights,
            weights,
        })
    }

    /// Spatial dimension `d`.
    pub fn dim(&self) -> usize {
        self.axes.len() - 1
    }

    /// Space-time dimension `d + 1`.
    pub fn st_dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis<S>] {
        &self.axes
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    /// Mesh size: diameter of one (congruent) cell.
    pub fn h(&self) -> S {
        self.h
    }

    pub fn t_lo(&self) -> S {
        self.axes[self.dim()].lo
    }

    pub fn t_hi(&self) -> S {
        self.axes[self.dim()].hi
    }

    pub fn n_cells_x(&self) -> Vec<usize> {
        self.cell_shape[..self.dim()].to_vec()
    }

    pub fn n_cells_t(&self) -> usize {
        self.cell_shape[self.dim()]
    }

    pub fn node_shape(&self) -> &[usize] {
        &self.node_shape
    }

    pub fn cell_shape(&self) -> &[usize] {
        &self.cell_shape
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_shape.iter().product()
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn axis_weights(&self, axis: usize) -> &[S] {
        &self.axis_weights[axis]
    }

    /// `|Omega| * (t_hi - t_lo)`.
    pub fn volume(&self) -> S {
        self.axes.iter().fold(S::one(), |acc, a| acc * (a.hi - a.lo))
    }

    /// Volume of one mesh cell.
    pub fn cell_volume(&self) -> S {
        self.axes.iter().fold(S::one(), |acc, a| acc * a.cell_width())
    }

    /// Coordinate of quadrature node `i` along `axis`.
    pub fn node_coord(&self, axis: usize, i: usize) -> S {
        let a = &self.axes[axis];
        let n = self.node_shape[axis] - 1;
        if i == n {
            return a.hi;
        }
        a.lo + (a.hi - a.lo) * S::of(i as f64) / S::of(n as f64)
    }

    pub fn node_multi(&self, flat: usize) -> Vec<usize> {
        unflatten(flat, &self.node_shape)
    }

    pub fn node_flat(&self, multi: &[usize]) -> usize {
        flatten(multi, &self.node_shape)
    }

    pub fn node_point(&self, flat: usize, out: &mut [S]) {
        let mut rem = flat;
        for axis in (0..self.axes.len()).rev() {
            let n = self.node_shape[axis];
            out[axis] = self.node_coord(axis, rem % n);
            rem /= n;
        }
    }

    /// All node coordinates, `st_dim()` values per node.
    pub fn node_points(&self) -> Vec<S> {
        let m = self.st_dim();
        let mut pts = vec![S::zero(); self.n_nodes() * m];
        for (k, chunk) in pts.chunks_mut(m).enumerate() {
            self.node_point(k, chunk);
        }
        pts
    }

    pub fn cell_flat(&self, cell: &CellIndex) -> usize {
        let mut multi = cell.ix.clone();
        multi.push(cell.it);
        flatten(&multi, &self.cell_shape)
    }

    pub fn cell_multi(&self, flat: usize) -> CellIndex {
        let mut multi = unflatten(flat, &self.cell_shape);
        let it = multi.pop().unwrap();
        CellIndex { ix: multi, it }
    }

    /// Lower corner of a cell (by flat index).
    pub fn cell_origin(&self, flat: usize) -> Vec<S> {
        let multi = unflatten(flat, &self.cell_shape);
        multi
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.lo + a.cell_width() * S::of(i as f64))
            .collect()
    }

    /// Owning cell and local coordinates in `[0,1]^(d+1)` of a quadrature
    /// node, using the upper-index tie-break on shared faces.
    pub fn node_cell(&self, flat: usize) -> (usize, Vec<S>) {
        let multi = self.node_multi(flat);
        let mut cell = Vec::with_capacity(multi.len());
        let mut local = Vec::with_capacity(multi.len());
        for (axis, &i) in multi.iter().enumerate() {
            let c = (i / self.oversample).min(self.cell_shape[axis] - 1);
            cell.push(c);
            let off = i - c * self.oversample;
            local.push(S::of(off as f64) / S::of(self.oversample as f64));
        }
        (flatten(&cell, &self.cell_shape), local)
    }

    /// Trapezoidal integral of node-indexed samples, summed in flat order.
    pub fn integrate(&self, samples: &[S]) -> Result<S> {
        if samples.len() != self.n_nodes() {
            return Err(Error::Shape {
                expected: self.n_nodes(),
                got: samples.len(),
            });
        }
        let mut acc = S::zero();
        for (w, s) in self.weights.iter().zip(samples) {
            acc += *w * *s;
        }
        Ok(acc)
    }

    /// Locates the cell containing `z`. Points on shared faces go to the
    /// higher-index cell; the upper domain boundary is clamped into the last cell.
    pub fn cell_of(&self, z: &[S]) -> Result<CellIndex> {
        if z.len() != self.st_dim() {
            return Err(Error::Shape {
                expected: self.st_dim(),
                got: z.len(),
            });
        }
        let mut multi = Vec::with_capacity(z.len());
        for (axis, a) in self.axes.iter().enumerate() {
            let v = z[axis];
            if !(v >= a.lo && v <= a.hi) {
                return Err(Error::Domain(z.iter().map(|x| x.as_f64()).collect()));
            }
            let r = (v - a.lo) / a.cell_width();
            let nearest = r.round();
            let snapped = if (r - nearest).abs() <= S::of(1e-10) * S::one().max(r) {
                nearest
            } else {
                r.floor()
            };
            let k = snapped.to_usize().unwrap_or(0).min(a.cells - 1);
            multi.push(k);
        }
        let it = multi.pop().unwrap();
        Ok(CellIndex { ix: multi, it })
    }

    /// Nodes on the time slice `t = t(it)` with their spatial trapezoid weights.
    pub fn time_slice(&self, it: usize) -> Vec<(usize, S)> {
        let d = self.dim();
        let spatial_shape = &self.node_shape[..d];
        let count: usize = spatial_shape.iter().product();
        let mut out = Vec::with_capacity(count);
        let mut idx = vec![0usize; d];
        for _ in 0..count {
            let mut w = S::one();
            for (k, &i) in idx.iter().enumerate() {
                w *= self.axis_weights[k][i];
            }
            let mut multi = idx.clone();
            multi.push(it);
            out.push((self.node_flat(&multi), w));
            increment(&mut idx, spatial_shape);
        }
        out
    }

    /// Nodes on `t = t_lo`.
    pub fn initial_face(&self) -> Vec<(usize, S)> {
        self.time_slice(0)
    }

    /// Nodes on `t = t_hi`.
    pub fn final_face(&self) -> Vec<(usize, S)> {
        self.time_slice(self.node_shape[self.dim()] - 1)
    }

    /// Nodes on the lateral boundary `dOmega x [t_lo, t_hi]` with surface
    /// trapezoid weights; each face `x_j = lo_j` / `x_j = hi_j` contributes
    /// separately, so nodes on edges appear once per face.
    pub fn lateral_faces(&self) -> Vec<(usize, S)> {
        let d = self.dim();
        let m = self.st_dim();
        let mut out = Vec::new();
        for j in 0..d {
            for side in [0usize, self.node_shape[j] - 1] {
                let shape: Vec<usize> = (0..m)
                    .map(|k| if k == j { 1 } else { self.node_shape[k] })
                    .collect();
                let count: usize = shape.iter().product();
                let mut idx = vec![0usize; m];
                for _ in 0..count {
                    let mut multi = idx.clone();
                    multi[j] = side;
                    let mut w = S::one();
                    for (k, &i) in multi.iter().enumerate() {
                        if k != j {
                            w *= self.axis_weights[k][i];
                        }
                    }
                    out.push((self.node_flat(&multi), w));
                    increment(&mut idx, &shape);
                }
            }
        }
        out
    }
}

/// Free-function form of [`QuadGrid::build`].
pub fn build_grid<S: Scalar>(
    lo: &[S],
    hi: &[S],
    t_final: S,
    n_cells_x: &[usize],
    n_cells_t: usize,
) -> Result<QuadGrid<S>> {
    QuadGrid::build(lo, hi, t_final, n_cells_x, n_cells_t)
}

pub fn integrate<S: Scalar>(grid: &QuadGrid<S>, samples: &[S]) -> Result<S> {
    grid.integrate(samples)
}

pub fn cell_of<S: Scalar>(grid: &QuadGrid<S>, z: &[S]) -> Result<CellIndex> {
    grid.cell_of(z)
}

pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

pub(crate) fn flatten(multi: &[usize], shape: &[usize]) -> usize {
    multi
        .iter()
        .zip(shape)
        .fold(0usize, |acc, (&i, &n)| acc * n + i)
}

pub(crate) fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0usize; shape.len()];
    for k in (0..shape.len()).rev() {
        out[k] = flat % shape[k];
        flat /= shape[k];
    }
    out
}
