//! Continuous piecewise linear functions on simplicial meshes, their max-min
//! (lattice) representations, tanh smoothing, and compilation into a
//! [`ClippedTanhNet`]. Also builds the shock-adapted competitor used to check
//! that the loss of a good CPwL approximation decays like `h`.
//!
//! Geometry is kept in `f64`; only the compiled network is generic.

use std::collections::HashMap;

use crate::dpwp::PerturbationConfig;
use crate::draws::DrawKey;
use crate::error::{Error, Result};
use crate::flux::FluxModel;
use crate::loss::{LossBreakdown, LossContext, NodeValues};
use crate::mesh::QuadGrid;
use crate::network::ClippedTanhNet;
use crate::reference::BenchmarkProblem;
use crate::scalar::Scalar;

const GEOM_TOL: f64 = 1e-10;

/// Conforming simplicial mesh in `R^n` with a bucket grid for point location.
#[derive(Clone, Debug)]
pub struct SimplexMesh {
    dim: usize,
    vertices: Vec<f64>,
    simplices: Vec<usize>,
    patches: Vec<Vec<usize>>,
    // inverse edge matrix per simplex, row-major n x n
    inverses: Vec<f64>,
    bbox_lo: Vec<f64>,
    bbox_hi: Vec<f64>,
    buckets_per_axis: usize,
    buckets: Vec<Vec<usize>>,
}

fn invert(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..n {
            a.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let p = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = a[row * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row * n + k] -= f * a[col * n + k];
                        inv[row * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

impl SimplexMesh {
    /// `vertices` holds `dim` coordinates per vertex, `simplices` holds
    /// `dim + 1` vertex ids per simplex.
    pub fn new(dim: usize, vertices: Vec<f64>, simplices: Vec<usize>) -> Result<Self> {
        if dim == 0 || vertices.len() % dim != 0 || simplices.len() % (dim + 1) != 0 {
            return Err(Error::NonConforming("inconsistent array sizes".into()));
        }
        let nv = vertices.len() / dim;
        let ns = simplices.len() / (dim + 1);
        if ns == 0 {
            return Err(Error::NonConforming("mesh has no simplices".into()));
        }
        if let Some(&bad) = simplices.iter().find(|&&v| v >= nv) {
            return Err(Error::NonConforming(format!("vertex id {bad} out of range")));
        }
        let mut patches = vec![Vec::new(); nv];
        let mut inverses = Vec::with_capacity(ns * dim * dim);
        for s in 0..ns {
            let ids = &simplices[s * (dim + 1)..(s + 1) * (dim + 1)];
            let v0 = &vertices[ids[0] * dim..(ids[0] + 1) * dim];
            let mut e = vec![0.0; dim * dim];
            for (c, &vid) in ids[1..].iter().enumerate() {
                for r in 0..dim {
                    e[r * dim + c] = vertices[vid * dim + r] - v0[r];
                }
            }
            let scale = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let inv = invert(e.clone(), dim)
                .filter(|inv| inv.iter().all(|x| x.is_finite() && x.abs() * scale < 1e14))
                .ok_or_else(|| Error::NonConforming(format!("simplex {s} is degenerate")))?;
            inverses.extend(inv);
            for &v in ids {
                patches[v].push(s);
            }
        }
        let mut bbox_lo = vec![f64::INFINITY; dim];
        let mut bbox_hi = vec![f64::NEG_INFINITY; dim];
        for v in vertices.chunks(dim) {
            for k in 0..dim {
                bbox_lo[k] = bbox_lo[k].min(v[k]);
                bbox_hi[k] = bbox_hi[k].max(v[k]);
            }
        }
        let buckets_per_axis = ((ns as f64).powf(1.0 / dim as f64).ceil() as usize).clamp(1, 256);
        let mut mesh = Self {
            dim,
            vertices,
            simplices,
            patches,
            inverses,
            bbox_lo,
            bbox_hi,
            buckets_per_axis,
            buckets: vec![Vec::new(); buckets_per_axis.pow(dim as u32)],
        };
        for s in 0..ns {
            let (lo, hi) = mesh.simplex_bbox(s);
            let a = mesh.bucket_coords(&lo);
            let b = mesh.bucket_coords(&hi);
            let mut idx = a.clone();
            loop {
                let flat = mesh.flat_bucket(&idx);
                mesh.buckets[flat].push(s);
                let mut k = 0;
                loop {
                    if k == dim {
                        break;
                    }
                    if idx[k] < b[k] {
                        idx[k] += 1;
                        break;
                    }
                    idx[k] = a[k];
                    k += 1;
                }
                if k == dim {
                    break;
                }
            }
        }
        mesh.check_conforming()?;
        Ok(mesh)
    }

    fn check_conforming(&self) -> Result<()> {
        let n = self.dim;
        let mut facets: HashMap<Vec<usize>, usize> = HashMap::new();
        for s in 0..self.n_simplices() {
            let ids = self.simplex(s);
            for skip in 0..=n {
                let mut f: Vec<usize> = ids.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &v)| v).collect();
                f.sort_unstable();
                let count = facets.entry(f).or_insert(0);
                *count += 1;
                if *count > 2 {
                    return Err(Error::NonConforming(format!("facet of simplex {s} shared more than twice")));
                }
            }
        }
        // no vertex may sit inside or on a simplex it does not belong to
        for v in 0..self.n_vertices() {
            let p = self.vertex(v);
            for &s in &self.buckets[self.flat_bucket(&self.bucket_coords(p))] {
                if self.simplex(s).contains(&v) {
                    continue;
                }
                let lam = self.barycentric(s, p);
                if lam.iter().all(|&l| l >= -GEOM_TOL) {
                    return Err(Error::NonConforming(format!("vertex {v} lies on simplex {s}")));
                }
            }
        }
        Ok(())
    }

    fn simplex_bbox(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for &v in self.simplex(s) {
            let p = self.vertex(v);
            for k in 0..self.dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    fn bucket_coords(&self, p: &[f64]) -> Vec<usize> {
        (0..self.dim)
            .map(|k| {
                let span = (self.bbox_hi[k] - self.bbox_lo[k]).max(1e-300);
                let r = ((p[k] - self.bbox_lo[k]) / span * self.buckets_per_axis as f64).floor();
                (r.max(0.0) as usize).min(self.buckets_per_axis - 1)
            })
            .collect()
    }

    fn flat_bucket(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.buckets_per_axis + i)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn n_simplices(&self) -> usize {
        self.simplices.len() / (self.dim + 1)
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.vertices[v * self.dim..(v + 1) * self.dim]
    }

    pub fn simplex(&self, s: usize) -> &[usize] {
        &self.simplices[s * (self.dim + 1)..(s + 1) * (self.dim + 1)]
    }

    /// Simplices containing vertex `v`.
    pub fn patch(&self, v: usize) -> &[usize] {
        &self.patches[v]
    }

    /// Largest vertex patch.
    pub fn patch_complexity(&self) -> usize {
        self.patches.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn bbox(&self) -> (&[f64], &[f64]) {
        (&self.bbox_lo, &self.bbox_hi)
    }

    /// Barycentric coordinates of `z` in simplex `s` (vertex order as stored).
    pub fn barycentric(&self, s: usize, z: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let v0 = self.vertex(self.simplex(s)[0]);
        let inv = &self.inverses[s * n * n..(s + 1) * n * n];
        let mut lam = vec![0.0; n + 1];
        let mut rest = 0.0;
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..n {
                acc += inv[r * n + c] * (z[c] - v0[c]);
            }
            lam[r + 1] = acc;
            rest += acc;
        }
        lam[0] = 1.0 - rest;
        lam
    }

    /// Lowest-index simplex containing `z`, with barycentric coordinates.
    pub fn locate(&self, z: &[f64]) -> Option<(usize, Vec<f64>)> {
        if z.len() != self.dim {
            return None;
        }
        let bucket = &self.buckets[self.flat_bucket(&self.bucket_coords(z))];
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for &s in bucket {
            let lam = self.barycentric(s, z);
            let worst = lam.iter().fold(f64::INFINITY, |m, &l| m.min(l));
            if worst >= -GEOM_TOL {
                return Some((s, lam));
            }
            if best.as_ref().map_or(true, |b| worst > b.2) {
                best = Some((s, lam, worst));
            }
        }
        // tolerate rounding just outside the closed mesh
        best.filter(|b| b.2 >= -1e-8).map(|b| (b.0, b.1))
    }

    /// Uniform triangulation of a box with `n[k]` intervals per axis. In 2D
    /// each rectangle is split along its lower-left to upper-right diagonal.
    pub fn structured(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Self> {
        match lo.len() {
            1 => {
                let verts = (0..=n[0]).map(|i| lo[0] + (hi[0] - lo[0]) * i as f64 / n[0] as f64).collect();
                let simp = (0..n[0]).flat_map(|i| [i, i + 1]).collect();
                Self::new(1, verts, simp)
            }
            2 => {
                let (nx, ny) = (n[0], n[1]);
                let mut verts = Vec::new();
                for j in 0..=ny {
                    for i in 0..=nx {
                        verts.push(lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64);
                        verts.push(lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64);
                    }
                }
                let id = |i: usize, j: usize| j * (nx + 1) + i;
                let mut simp = Vec::new();
                for j in 0..ny {
                    for i in 0..nx {
                        simp.extend([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                        simp.extend([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                    }
                }
                Self::new(2, verts, simp)
            }
            d => Err(Error::Unsupported(format!("structured meshes in {d} dimensions"))),
        }
    }

    /// 2D box with every rectangle cut by both diagonals (a centre vertex per rectangle).
    pub fn criss_cross(lo: &[f64], hi: &[f64], nx: usize, ny: usize) -> Result<Self> {
        let mut verts = Vec::new();
        let (dx, dy) = ((hi[0] - lo[0]) / nx as f64, (hi[1] - lo[1]) / ny as f64);
        for j in 0..=ny {
            for i in 0..=nx {
                verts.extend([lo[0] + dx * i as f64, lo[1] + dy * j as f64]);
            }
        }
        let corner = |i: usize, j: usize| j * (nx + 1) + i;
        let base = (nx + 1) * (ny + 1);
        let mut simp = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let c = base + j * nx + i;
                verts.extend([lo[0] + dx * (i as f64 + 0.5), lo[1] + dy * (j as f64 + 0.5)]);
                let (a, b, d, e) = (corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1));
                simp.extend([a, b, c, b, d, c, d, e, c, e, a, c]);
            }
        }
        Self::new(2, verts, simp)
    }
}

/// `coef . z + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePiece {
    pub coef: Vec<f64>,
    pub offset: f64,
}

impl AffinePiece {
    pub fn constant(dim: usize, v: f64) -> Self {
        Self {
            coef: vec![0.0; dim],
            offset: v,
        }
    }

    #[inline]
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.coef.iter().zip(z).fold(self.offset, |acc, (a, x)| acc + a * x)
    }

    pub fn is_constant(&self) -> bool {
        self.coef.iter().all(|&a| a == 0.0)
    }

    fn same_as(&self, other: &Self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        close(self.offset, other.offset) && self.coef.iter().zip(&other.coef).all(|(a, b)| close(*a, *b))
    }

    /// Range over the box `[lo, hi]`.
    fn range(&self, lo: &[f64], hi: &[f64]) -> (f64, f64) {
        let mut a = self.offset;
        let mut b = self.offset;
        for k in 0..self.coef.len() {
            let (p, q) = (self.coef[k] * lo[k], self.coef[k] * hi[k]);
            a += p.min(q);
            b += p.max(q);
        }
        (a, b)
    }
}

/// Nodal values on a simplicial mesh, linear on each simplex.
#[derive(Clone, Debug)]
pub struct CpwlFunction {
    mesh: SimplexMesh,
    values: Vec<f64>,
}

impl CpwlFunction {
    pub fn new(mesh: SimplexMesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::Shape {
                expected: mesh.n_vertices(),
                got: values.len(),
            });
        }
        Ok(Self { mesh, values })
    }

    pub fn mesh(&self) -> &SimplexMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The affine function agreeing with the interpolant on simplex `s`.
    pub fn piece(&self, s: usize) -> AffinePiece {
        let n = self.mesh.dim;
        let ids = self.mesh.simplex(s);
        let v0 = self.mesh.vertex(ids[0]);
        let inv = &self.mesh.inverses[s * n * n..(s + 1) * n * n];
        let d: Vec<f64> = ids[1..].iter().map(|&v| self.values[v] - self.values[ids[0]]).collect();
        let coef: Vec<f64> = (0..n).map(|c| (0..n).map(|r| inv[r * n + c] * d[r]).sum()).collect();
        let offset = self.values[ids[0]] - coef.iter().zip(v0).map(|(a, x)| a * x).sum::<f64>();
        AffinePiece { coef, offset }
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let (s, lam) = self.mesh.locate(z).ok_or_else(|| Error::Domain(z.to_vec()))?;
        Ok(self.mesh.simplex(s).iter().zip(&lam).map(|(&v, l)| self.values[v] * l).sum())
    }

    /// Gradient on the simplex selected by [`SimplexMesh::locate`].
    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (s, _) = self.mesh.locate(z).ok_or_else(|| Error::Domain(z.to_vec()))?;
        Ok(self.piece(s).coef)
    }

    /// Nodal hat function of vertex `j`.
    pub fn hat(mesh: &SimplexMesh, j: usize) -> Result<Self> {
        if j >= mesh.n_vertices() {
            return Err(Error::Parameter(format!("vertex {j} out of range")));
        }
        let mut values = vec![0.0; mesh.n_vertices()];
        values[j] = 1.0;
        Self::new(mesh.clone(), values)
    }
}

/// Binary max-min expression over affine leaves.
#[derive(Clone, Debug, PartialEq)]
pub enum MinMaxExpr {
    Leaf(AffinePiece),
    Min(Box<MinMaxExpr>, Box<MinMaxExpr>),
    Max(Box<MinMaxExpr>, Box<MinMaxExpr>),
}

impl MinMaxExpr {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Self::Leaf(p) => p.eval(z),
            Self::Min(a, b) => a.eval(z).min(b.eval(z)),
            Self::Max(a, b) => a.eval(z).max(b.eval(z)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Leaf(_) => 0,
            Self::Min(a, b) | Self::Max(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Self::Leaf(_) => 1,
            Self::Min(a, b) | Self::Max(a, b) => a.leaf_count() + b.leaf_count(),
        }
    }

    /// Balanced binary reduction of `items` with min (`is_min`) or max.
    pub fn balanced(mut items: Vec<MinMaxExpr>, is_min: bool) -> MinMaxExpr {
        assert!(!items.is_empty());
        while items.len() > 1 {
            let mut next = Vec::with_capacity(items.len().div_ceil(2));
            let mut it = items.into_iter();
            while let Some(a) = it.next() {
                match it.next() {
                    Some(b) if is_min => next.push(Self::Min(Box::new(a), Box::new(b))),
                    Some(b) => next.push(Self::Max(Box::new(a), Box::new(b))),
                    None => next.push(a),
                }
            }
            items = next;
        }
        items.pop().unwrap()
    }
}

/// Lattice representation `f = max_R min_{i in S_R} l_i` over the distinct
/// affine pieces `l_i`, with `S_R = {i : l_i >= f on R}` for every simplex `R`.
pub fn lattice_expr(f: &CpwlFunction) -> MinMaxExpr {
    let mesh = &f.mesh;
    let mut pieces: Vec<AffinePiece> = Vec::new();
    let mut piece_of = Vec::with_capacity(mesh.n_simplices());
    for s in 0..mesh.n_simplices() {
        let p = f.piece(s);
        match pieces.iter().position(|q| q.same_as(&p)) {
            Some(i) => piece_of.push(i),
            None => {
                piece_of.push(pieces.len());
                pieces.push(p);
            }
        }
    }
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for s in 0..mesh.n_simplices() {
        let own = &pieces[piece_of[s]];
        let verts: Vec<&[f64]> = mesh.simplex(s).iter().map(|&v| mesh.vertex(v)).collect();
        let mut set: Vec<usize> = (0..pieces.len())
            .filter(|&i| {
                verts.iter().all(|p| {
                    let fv = own.eval(p);
                    pieces[i].eval(p) >= fv - 1e-9 * (1.0 + fv.abs())
                })
            })
            .collect();
        // constants in a min collapse to the smallest one
        if let Some(cmin) = set
            .iter()
            .filter(|&&i| pieces[i].is_constant())
            .min_by(|&&a, &&b| pieces[a].offset.total_cmp(&pieces[b].offset))
            .copied()
        {
            set.retain(|&i| !pieces[i].is_constant() || i == cmin);
        }
        if !sets.contains(&set) {
            sets.push(set);
        }
    }
    // a superset's minimum never exceeds its subset's, so it is redundant
    let keep: Vec<&Vec<usize>> = sets
        .iter()
        .enumerate()
        .filter(|(a, sa)| {
            !sets
                .iter()
                .enumerate()
                .any(|(b, sb)| *a != b && sb.len() < sa.len() && sb.iter().all(|i| sa.contains(i)))
        })
        .map(|(_, s)| s)
        .collect();
    let terms = keep
        .into_iter()
        .map(|set| MinMaxExpr::balanced(set.iter().map(|&i| MinMaxExpr::Leaf(pieces[i].clone())).collect(), true))
        .collect();
    MinMaxExpr::balanced(terms, false)
}

/// Max-min expression of the nodal hat of `node`, wrapped in `max(0, .)`.
pub fn hat_minmax_expr(mesh: &SimplexMesh, node: usize) -> Result<MinMaxExpr> {
    let hat = CpwlFunction::hat(mesh, node)?;
    Ok(MinMaxExpr::Max(
        Box::new(MinMaxExpr::Leaf(AffinePiece::constant(mesh.dim, 0.0))),
        Box::new(lattice_expr(&hat)),
    ))
}

/// `(r+s)/2 - ((r-s)/2) tanh(tau (r-s))`.
#[inline]
pub fn s_min(r: f64, s: f64, tau: f64) -> f64 {
    0.5 * (r + s) - 0.5 * (r - s) * (tau * (r - s)).tanh()
}

/// `(r+s)/2 + ((r-s)/2) tanh(tau (r-s))`.
#[inline]
pub fn s_max(r: f64, s: f64, tau: f64) -> f64 {
    0.5 * (r + s) + 0.5 * (r - s) * (tau * (r - s)).tanh()
}

/// `tanh(tau r) + tau r sech^2(tau r)`.
pub fn psi_tau(tau: f64, r: f64) -> f64 {
    let x = tau * r;
    let t = x.tanh();
    t + x * (1.0 - t * t)
}

/// An expression with every min/max replaced by its tanh smoothing.
#[derive(Clone, Copy, Debug)]
pub struct SmoothExpr<'a> {
    expr: &'a MinMaxExpr,
    tau: f64,
}

pub fn smooth_expr(expr: &MinMaxExpr, tau: f64) -> Result<SmoothExpr<'_>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    Ok(SmoothExpr { expr, tau })
}

impl SmoothExpr<'_> {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        fn go(e: &MinMaxExpr, z: &[f64], tau: f64) -> f64 {
            match e {
                MinMaxExpr::Leaf(p) => p.eval(z),
                MinMaxExpr::Min(a, b) => s_min(go(a, z, tau), go(b, z, tau), tau),
                MinMaxExpr::Max(a, b) => s_max(go(a, z, tau), go(b, z, tau), tau),
            }
        }
        go(self.expr, z, self.tau)
    }
}

// Identity through tanh: (4 tanh(dv)/d - tanh(2dv)/(2d)) / 3 = v + O(d^4 v^5).
const ID_DELTA: f64 = 1e-3;
// Products through tanh second differences around a point of nonzero curvature.
const PROD_DELTA: f64 = 2e-3;
const PROD_CENTER: f64 = 0.5;
// sup_x x (1 - tanh x) / 2, the worst gap between S_min/S_max and min/max times tau.
const SMOOTH_SLACK: f64 = 0.14;

/// Affine form over the outputs of the previous layer.
#[derive(Clone, Debug)]
struct Form {
    coef: Vec<f64>,
    bias: f64,
}

impl Form {
    fn scaled(&self, a: f64, shift: f64) -> Form {
        Form {
            coef: self.coef.iter().map(|c| c * a).collect(),
            bias: self.bias * a + shift,
        }
    }

    fn combine(&self, a: f64, other: &Form, b: f64) -> Form {
        Form {
            coef: self.coef.iter().zip(&other.coef).map(|(x, y)| a * x + b * y).collect(),
            bias: a * self.bias + b * other.bias,
        }
    }
}

/// Builder for one tanh layer: neurons are added with affine pre-activations
/// over the previous layer, and new forms are expressed over the neurons.
struct LayerBuilder {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

struct OutTerm(Vec<(usize, f64)>, f64);

impl LayerBuilder {
    fn new() -> Self {
        Self {
            weights: Vec::new(),
            biases: Vec::new(),
        }
    }

    fn neuron(&mut self, pre: Form) -> usize {
        self.weights.push(pre.coef);
        self.biases.push(pre.bias);
        self.weights.len() - 1
    }

    /// Two neurons whose combination reproduces `(form - mid) / half`.
    fn identity(&mut self, form: &Form, mid: f64, half: f64) -> OutTerm {
        let unit = form.scaled(1.0 / half, -mid / half);
        let a = self.neuron(unit.scaled(ID_DELTA, 0.0));
        let b = self.neuron(unit.scaled(2.0 * ID_DELTA, 0.0));
        OutTerm(vec![(a, 4.0 / (3.0 * ID_DELTA)), (b, -1.0 / (6.0 * ID_DELTA))], 0.0)
    }

    /// Neurons whose combination reproduces `u^2 - v^2` for forms `u`, `v`
    /// with values in `[-2, 2]`.
    fn square_difference(&mut self, u: &Form, v: &Form) -> OutTerm {
        let t = PROD_CENTER.tanh();
        let curvature = -2.0 * t * (1.0 - t * t);
        let norm = 12.0 * curvature * PROD_DELTA * PROD_DELTA;
        let mut terms = Vec::with_capacity(8);
        for (form, sign) in [(u, 1.0), (v, -1.0)] {
            for (step, w) in [(PROD_DELTA, 16.0), (2.0 * PROD_DELTA, -1.0)] {
                for dir in [1.0, -1.0] {
                    let n = self.neuron(form.scaled(dir * step, PROD_CENTER));
                    terms.push((n, sign * w / norm));
                }
            }
        }
        OutTerm(terms, 0.0)
    }

    fn width(&self) -> usize {
        self.biases.len()
    }

    fn form(&self, term: &OutTerm, scale: f64, shift: f64) -> Form {
        let mut coef = vec![0.0; self.width()];
        for &(n, w) in &term.0 {
            coef[n] += w * scale;
        }
        Form {
            coef,
            bias: term.1 * scale + shift,
        }
    }
}

#[derive(Clone, Debug)]
struct FlatNode {
    op: FlatOp,
    height: usize,
    parent: Option<usize>,
    lo: f64,
    hi: f64,
}

#[derive(Clone, Debug)]
enum FlatOp {
    Leaf(AffinePiece),
    Min(usize, usize),
    Max(usize, usize),
}

fn flatten(expr: &MinMaxExpr, nodes: &mut Vec<FlatNode>, lo: &[f64], hi: &[f64], slack: f64) -> usize {
    let (op, height, lo_v, hi_v) = match expr {
        MinMaxExpr::Leaf(p) => {
            let (a, b) = p.range(lo, hi);
            (FlatOp::Leaf(p.clone()), 0, a, b)
        }
        MinMaxExpr::Min(a, b) | MinMaxExpr::Max(a, b) => {
            let ia = flatten(a, nodes, lo, hi, slack);
            let ib = flatten(b, nodes, lo, hi, slack);
            let (na, nb) = (&nodes[ia], &nodes[ib]);
            let h = 1 + na.height.max(nb.height);
            if matches!(expr, MinMaxExpr::Min(..)) {
                (FlatOp::Min(ia, ib), h, na.lo.min(nb.lo), na.hi.min(nb.hi) + slack)
            } else {
                (FlatOp::Max(ia, ib), h, na.lo.max(nb.lo) - slack, na.hi.max(nb.hi))
            }
        }
    };
    nodes.push(FlatNode {
        op,
        height,
        parent: None,
        lo: lo_v,
        hi: hi_v,
    });
    let id = nodes.len() - 1;
    if let FlatOp::Min(a, b) | FlatOp::Max(a, b) = nodes[id].op {
        nodes[a].parent = Some(id);
        nodes[b].parent = Some(id);
    }
    id
}

fn mid_half(lo: f64, hi: f64) -> (f64, f64) {
    let pad = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    let (lo, hi) = (lo - pad, hi + pad);
    (0.5 * (lo + hi), 0.5 * (hi - lo))
}

/// Compiles the `tau`-smoothed expression into a clipped tanh network on the
/// box `[lo, hi]`. Each max/min level becomes two tanh layers.
pub fn compile_expr<S: Scalar>(expr: &MinMaxExpr, tau: f64, lo: &[f64], hi: &[f64], c: S) -> Result<ClippedTanhNet<S>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    let n_in = lo.len();
    let mut nodes = Vec::new();
    let root = flatten(expr, &mut nodes, lo, hi, SMOOTH_SLACK / tau);
    let height = nodes[root].height;
    let to_s = |layers: Vec<(Vec<f64>, Vec<f64>)>| -> Result<ClippedTanhNet<S>> {
        let layers = layers
            .into_iter()
            .map(|(w, b)| (w.into_iter().map(S::of).collect(), b.into_iter().map(S::of).collect()))
            .collect();
        ClippedTanhNet::from_layers(layers, n_in, c)
    };
    // values of live nodes as forms over the current layer (initially the input)
    let mut live: Vec<(usize, Form)> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, FlatOp::Leaf(_)))
        .map(|(i, n)| {
            let FlatOp::Leaf(p) = &n.op else { unreachable!() };
            (
                i,
                Form {
                    coef: p.coef.clone(),
                    bias: p.offset,
                },
            )
        })
        .collect();
    let mut layers: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for level in 1..=height {
        let ops: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].height == level).collect();
        let consumed = |i: usize| nodes[i].parent.is_some_and(|p| nodes[p].height == level);
        let form_of = |live: &[(usize, Form)], id: usize| live.iter().find(|(i, _)| *i == id).unwrap().1.clone();

        // layer A: identities of pass-through lanes; (r+s)/2, (r-s)/R and tanh(tau (r-s)) for ops
        let mut a = LayerBuilder::new();
        let mut pass_a = Vec::new();
        for (id, form) in live.iter().filter(|(i, _)| !consumed(*i)) {
            let (mid, half) = mid_half(nodes[*id].lo, nodes[*id].hi);
            pass_a.push((*id, a.identity(form, mid, half), mid, half));
        }
        let mut ops_a = Vec::new();
        for &o in &ops {
            let (ra, rb) = match nodes[o].op {
                FlatOp::Min(x, y) | FlatOp::Max(x, y) => (x, y),
                FlatOp::Leaf(_) => unreachable!(),
            };
            let (r, s) = (form_of(&live, ra), form_of(&live, rb));
            let (nr, ns) = (&nodes[ra], &nodes[rb]);
            let range = (nr.hi - ns.lo).abs().max((ns.hi - nr.lo).abs()).max(1e-12) * (1.0 + 1e-9);
            let mean = r.combine(0.5, &s, 0.5);
            let (pm, ph) = mid_half(0.5 * (nr.lo + ns.lo), 0.5 * (nr.hi + ns.hi));
            let p_term = a.identity(&mean, pm, ph);
            let diff = r.combine(1.0, &s, -1.0);
            let q_term = a.identity(&diff, 0.0, range);
            let t = a.neuron(diff.scaled(tau, 0.0));
            ops_a.push((o, p_term, pm, ph, q_term, t, range));
        }
        let forms_pass_a: Vec<(usize, Form)> = pass_a
            .iter()
            .map(|(id, term, mid, half)| (*id, a.form(term, *half, *mid)))
            .collect();
        let forms_ops_a: Vec<_> = ops_a
            .iter()
            .map(|(o, p, pm, ph, q, t, range)| {
                let t_form = a.form(&OutTerm(vec![(*t, 1.0)], 0.0), 1.0, 0.0);
                (*o, a.form(p, *ph, *pm), (*pm, *ph), a.form(q, 1.0, 0.0), t_form, *range)
            })
            .collect();
        layers.push((a.weights.concat(), a.biases.clone()));
        let width_a = a.width();
        debug_assert!(layers.last().unwrap().0.len() == width_a * live[0].1.coef.len());

        // layer B: identities again; the product q T by polarisation
        let mut b = LayerBuilder::new();
        let mut next_terms = Vec::new();
        for (id, form) in &forms_pass_a {
            let (mid, half) = mid_half(nodes[*id].lo, nodes[*id].hi);
            next_terms.push((*id, vec![(b.identity(form, mid, half), half)], mid));
        }
        for (o, p_form, (pm, ph), q_form, t_form, range) in &forms_ops_a {
            let p = b.identity(p_form, *pm, *ph);
            let u = q_form.combine(1.0, t_form, 1.0);
            let v = q_form.combine(1.0, t_form, -1.0);
            let prod = b.square_difference(&u, &v);
            // q T = (u^2 - v^2) / 4, result = P -/+ (R/2) q T
            let sign = if matches!(nodes[*o].op, FlatOp::Min(..)) { -1.0 } else { 1.0 };
            next_terms.push((*o, vec![(p, *ph), (prod, sign * range / 8.0)], *pm));
        }
        layers.push((b.weights.concat(), b.biases.clone()));
        live = next_terms
            .into_iter()
            .map(|(id, parts, shift)| {
                let mut form = Form {
                    coef: vec![0.0; b.width()],
                    bias: shift,
                };
                for (term, scale) in parts {
                    form = form.combine(1.0, &b.form(&term, scale, 0.0), 1.0);
                }
                (id, form)
            })
            .collect();
    }
    let (_, out) = live.into_iter().find(|(i, _)| *i == root).expect("root is live at the end");
    layers.push((out.coef, vec![out.bias]));
    to_s(layers)
}

/// One step of the tau search.
#[derive(Clone, Debug, PartialEq)]
pub struct TauStep {
    pub tau: f64,
    pub sup_error: f64,
    pub w11_error: f64,
}

#[derive(Clone, Debug)]
pub struct CompileReport {
    pub tau: f64,
    pub trace: Vec<TauStep>,
    pub neurons: usize,
    pub depth: usize,
}

pub const TAU_START: f64 = 16.0;
pub const TAU_MAX: f64 = 1048576.0;
pub const CHECK_SAMPLES: usize = 10_000;

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Halton points in the box `[lo, hi]`, flattened.
pub fn halton_points(lo: &[f64], hi: &[f64], count: usize) -> Vec<f64> {
    const BASES: [usize; 4] = [2, 3, 5, 7];
    let mut out = Vec::with_capacity(count * lo.len());
    for i in 1..=count {
        for k in 0..lo.len() {
            out.push(lo[k] + (hi[k] - lo[k]) * radical_inverse(i, BASES[k]));
        }
    }
    out
}

/// Sup error and a sampled W^{1,1} error of `net` against `f` on `points`.
pub fn approximation_errors<S: Scalar>(net: &ClippedTanhNet<S>, f: &CpwlFunction, points: &[f64]) -> Result<(f64, f64)> {
    let n = f.mesh.dim;
    let (lo, hi) = f.mesh.bbox();
    let volume: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let pts_s: Vec<S> = points.iter().map(|&x| S::of(x)).collect();
    let jets = net.eval_batch(&pts_s)?;
    let mut sup = 0.0f64;
    let mut w11 = 0.0;
    for (i, z) in points.chunks(n).enumerate() {
        let raw = jets.raw[i];
        let u = net.clamp(raw).as_f64();
        let (s, lam) = f.mesh.locate(z).ok_or_else(|| Error::Domain(z.to_vec()))?;
        let exact: f64 = f.mesh.simplex(s).iter().zip(&lam).map(|(&v, l)| f.values[v] * l).sum();
        let g = f.piece(s).coef;
        let active = net.is_active(raw);
        let diff = (u - exact).abs();
        sup = sup.max(diff);
        let mut gd = 0.0;
        for k in 0..n {
            let gn = if active { jets.grad[i * n + k].as_f64() } else { 0.0 };
            gd += (gn - g[k]).abs();
        }
        w11 += diff + gd;
    }
    Ok((sup, w11 * volume / (points.len() / n) as f64))
}

/// Compiles `u_hat` with tau doubled from 16 until the sampled sup error is
/// at most `tol`.
pub fn compile_cpwl_to_net<S: Scalar>(u_hat: &CpwlFunction, tol: f64, c: S) -> Result<(ClippedTanhNet<S>, CompileReport)> {
    let half = c.as_f64() / 2.0;
    let margin = 0.05 * c.as_f64();
    if u_hat.sup_norm() > half - margin {
        return Err(Error::Compile(format!(
            "nodal values reach {} but the clip margin allows at most {}",
            u_hat.sup_norm(),
            half - margin
        )));
    }
    let (lo, hi) = u_hat.mesh.bbox();
    let (lo, hi) = (lo.to_vec(), hi.to_vec());
    let points = halton_points(&lo, &hi, CHECK_SAMPLES);
    let expr = lattice_expr(u_hat);
    let mut trace = Vec::new();
    let mut tau = TAU_START;
    while tau <= TAU_MAX {
        let net = compile_expr(&expr, tau, &lo, &hi, c)?;
        let (sup, w11) = approximation_errors(&net, u_hat, &points)?;
        trace.push(TauStep {
            tau,
            sup_error: sup,
            w11_error: w11,
        });
        if sup <= tol {
            let neurons = net.widths()[1..net.widths().len() - 1].iter().sum();
            let depth = net.depth();
            return Ok((
                net,
                CompileReport {
                    tau,
                    trace,
                    neurons,
                    depth,
                },
            ));
        }
        tau *= 2.0;
    }
    let last = trace.last().map(|s| s.sup_error).unwrap_or(f64::NAN);
    Err(Error::Compile(format!(
        "tau reached {TAU_MAX} with sup error {last:.3e} > {tol:.3e} ({} steps)",
        trace.len()
    )))
}

/// Space-time CPwL competitor for a single straight shock: one-sided states
/// outside a strip of width `eps = h^2` around the shock, linear across it.
pub fn build_shock_competitor<S: Scalar>(problem: &BenchmarkProblem<S>, h: f64) -> Result<CpwlFunction> {
    let line = problem
        .shock
        .ok_or_else(|| Error::Unsupported(format!("{} is not a single-shock problem", problem.name)))?;
    if problem.dim() != 1 || !(h > 0.0) {
        return Err(Error::Parameter("competitor needs a 1D problem and h > 0".into()));
    }
    let (lo, hi, t_final) = (problem.lo[0].as_f64(), problem.hi[0].as_f64(), problem.t_final.as_f64());
    let eps = h * h;
    let n_t = (t_final / h).round().max(1.0) as usize;
    let times: Vec<f64> = (0..=n_t).map(|k| t_final * k as f64 / n_t as f64).collect();
    let mut left_w = 0.0f64;
    let mut right_w = 0.0f64;
    for &t in &times {
        let x = line.position(t);
        let (a, b) = (x - eps / 2.0 - lo, hi - x - eps / 2.0);
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::Parameter(format!("h = {h} leaves no room for the shock strip at t = {t}")));
        }
        left_w = left_w.max(a);
        right_w = right_w.max(b);
    }
    let n_l = (left_w / h).ceil() as usize;
    let n_r = (right_w / h).ceil() as usize;
    let per_level = n_l + n_r + 2;
    let mut verts = Vec::with_capacity(per_level * times.len() * 2);
    let mut values = Vec::with_capacity(per_level * times.len());
    for &t in &times {
        let x = line.position(t);
        let (a, b) = (x - eps / 2.0, x + eps / 2.0);
        for i in 0..=n_l {
            verts.extend([lo + (a - lo) * i as f64 / n_l as f64, t]);
            values.push(line.left);
        }
        for i in 0..=n_r {
            verts.extend([b + (hi - b) * i as f64 / n_r as f64, t]);
            values.push(line.right);
        }
    }
    let mut simp = Vec::new();
    for k in 0..n_t {
        let (r0, r1) = (k * per_level, (k + 1) * per_level);
        for i in 0..per_level - 1 {
            let (ll, lr, ul, ur) = (r0 + i, r0 + i + 1, r1 + i, r1 + i + 1);
            simp.extend([ll, lr, ur, ll, ur, ul]);
        }
    }
    let mesh = SimplexMesh::new(2, verts, simp)?;
    CpwlFunction::new(mesh, values)
}

/// Node values and residuals of a space-time CPwL function on a grid.
pub fn cpwl_node_values(f: &CpwlFunction, flux: &FluxModel<f64>, grid: &QuadGrid<f64>) -> Result<NodeValues<f64>> {
    let m = grid.st_dim();
    if f.mesh.dim != m || flux.dim() + 1 != m {
        return Err(Error::Shape {
            expected: m,
            got: f.mesh.dim,
        });
    }
    let mut z = vec![0.0; m];
    let mut u = Vec::with_capacity(grid.n_nodes());
    let mut r = Vec::with_capacity(grid.n_nodes());
    for n in 0..grid.n_nodes() {
        grid.node_point(n, &mut z);
        let v = f.eval(&z)?;
        let g = f.grad(&z)?;
        let mut res = g[m - 1];
        for i in 0..m - 1 {
            res += flux.f_prime_comp(i, v) * g[i];
        }
        u.push(v);
        r.push(res);
    }
    NodeValues::from_samples(u, r)
}

/// Loss of the competitor evaluated by the loss module on the grid with
/// `dx = dt = h`.
pub fn competitor_loss(problem: &BenchmarkProblem<f64>, f: &CpwlFunction, h: f64, cfg: &PerturbationConfig) -> Result<LossBreakdown> {
    let grid = competitor_grid(problem, h)?;
    let ctx = LossContext::new(&grid, problem.flux.clone(), &problem.u0, Some(&problem.boundary))?;
    let vals = cpwl_node_values(f, &problem.flux, &grid)?;
    ctx.breakdown_for_values(&vals, cfg, DrawKey::new(cfg.seed, 0, 0), problem.default_clip())
}

/// The loss grid used for competitor checks.
pub fn competitor_grid(problem: &BenchmarkProblem<f64>, h: f64) -> Result<QuadGrid<f64>> {
    let nx = ((problem.hi[0] - problem.lo[0]) / h).round().max(1.0) as usize;
    let nt = (problem.t_final / h).round().max(1.0) as usize;
    QuadGrid::build(&problem.lo, &problem.hi, problem.t_final, &[nx], nt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::make_benchmark;

    fn unit_1d() -> SimplexMesh {
        SimplexMesh::new(1, vec![0.0, 0.5, 1.0], vec![0, 1, 1, 2]).unwrap()
    }

    #[test]
    fn hat_examples_1d() {
        let mesh = unit_1d();
        let e = hat_minmax_expr(&mesh, 1).unwrap();
        assert!((e.eval(&[0.25]) - 0.5).abs() < 1e-15);
        assert!((e.eval(&[0.5]) - 1.0).abs() < 1e-15);
        assert_eq!(e.eval(&[0.0]), 0.0);
        assert_eq!(e.eval(&[1.0]), 0.0);
        assert!(hat_minmax_expr(&mesh, 3).is_err());
    }

    #[test]
    fn non_conforming_meshes_rejected() {
        // hanging node: vertex 3 at the midpoint of the edge of the lower triangle
        let verts = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 1.0, 1.0];
        let simp = vec![0, 1, 2, 1, 4, 3, 3, 4, 2];
        assert!(matches!(SimplexMesh::new(2, verts, simp), Err(Error::NonConforming(_))));
        let flat = SimplexMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![0, 1, 2]);
        assert!(matches!(flat, Err(Error::NonConforming(_))));
    }

    #[test]
    fn criss_cross_hat_matches_barycentric() {
        let mesh = SimplexMesh::criss_cross(&[0.0, 0.0], &[1.0, 1.0], 2, 2).unwrap();
        assert_eq!(mesh.patch(4).len(), 8);
        let e = hat_minmax_expr(&mesh, 4).unwrap();
        let hat = CpwlFunction::hat(&mesh, 4).unwrap();
        for z in halton_points(&[0.0, 0.0], &[1.0, 1.0], 1000).chunks(2) {
            assert!((e.eval(z) - hat.eval(z).unwrap()).abs() <= 1e-12);
        }
        for v in 0..mesh.n_vertices() {
            let want = if v == 4 { 1.0 } else { 0.0 };
            assert!((e.eval(mesh.vertex(v)) - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(s_min(0.7, 0.7, 5.0), 0.7);
        assert!((s_min(1.0, -1.0, 3.0) + (6.0f64).tanh()).abs() < 1e-15);
        assert_eq!(psi_tau(4.0, 0.0), 0.0);
        assert!((psi_tau(1.0, 20.0) - 1.0).abs() < 1e-8);
        let worst = (-50_000..=50_000).map(|k| psi_tau(1.0, k as f64 * 1e-3).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.2);
        assert!(smooth_expr(&MinMaxExpr::Leaf(AffinePiece::constant(1, 0.0)), 0.0).is_err());
    }

    #[test]
    fn smoothing_gap_halves() {
        let mesh = unit_1d();
        let e = hat_minmax_expr(&mesh, 1).unwrap();
        let gap = |tau: f64| {
            let s = smooth_expr(&e, tau).unwrap();
            (0..=10_000)
                .map(|k| {
                    let x = k as f64 / 10_000.0;
                    (s.eval(&[x]) - e.eval(&[x])).abs()
                })
                .fold(0.0, f64::max)
        };
        assert!(gap(64.0) <= 0.5 * gap(32.0) * 1.2);
    }

    #[test]
    fn compiled_expression_matches_smooth_evaluator() {
        let mesh = unit_1d();
        let e = hat_minmax_expr(&mesh, 1).unwrap();
        let net = compile_expr(&e, 64.0, &[0.0], &[1.0], 4.0f64).unwrap();
        let s = smooth_expr(&e, 64.0).unwrap();
        for k in 0..=200 {
            let x = k as f64 / 200.0;
            assert!((net.forward(&[x]).unwrap() - s.eval(&[x])).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn affine_compiles_exactly() {
        let mesh = SimplexMesh::structured(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        let values = (0..mesh.n_vertices()).map(|v| 0.3 * mesh.vertex(v)[0] - 0.2 * mesh.vertex(v)[1] + 0.1).collect();
        let f = CpwlFunction::new(mesh, values).unwrap();
        let (net, report) = compile_cpwl_to_net(&f, 1e-10, 4.0f64).unwrap();
        assert_eq!(net.widths(), &[2, 1]);
        assert_eq!(report.trace.len(), 1);
        assert!(report.trace[0].sup_error <= 1e-10);
    }

    #[test]
    fn clip_margin_enforced() {
        let mesh = unit_1d();
        let f = CpwlFunction::new(mesh, vec![0.0, 1.95, 0.0]).unwrap();
        assert!(matches!(compile_cpwl_to_net(&f, 1e-3, 4.0f64), Err(Error::Compile(_))));
    }

    #[test]
    fn standing_shock_competitor_shape() {
        let p = make_benchmark::<f64>("standing_shock").unwrap();
        let h = 0.125;
        let eps = h * h;
        let f = build_shock_competitor(&p, h).unwrap();
        for (x, want) in [(-0.5, 1.0), (-eps / 2.0, 1.0), (0.0, 0.0), (eps / 4.0, -0.5), (eps / 2.0, -1.0), (0.9, -1.0)] {
            for t in [0.0, 0.2, 0.5] {
                assert!((f.eval(&[x, t]).unwrap() - want).abs() < 1e-12, "({x}, {t})");
            }
        }
        assert!(build_shock_competitor(&p, 2.0).is_err());
        let r = make_benchmark::<f64>("rarefaction").unwrap();
        assert!(matches!(build_shock_competitor(&r, 0.1), Err(Error::Unsupported(_))));
    }
}
