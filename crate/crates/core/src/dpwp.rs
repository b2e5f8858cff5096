//! Discontinuous piecewise multilinear test functions on the background mesh
//! and the cell-average perturbation sampler used to approximate the
//! supremum over the test space.
//!
//! Corner coefficients of a cell are indexed by a bitmask `alpha`: bit `k`
//! set means the upper end of axis `k`.

use serde::{Deserialize, Serialize};

use crate::draws::{self, DrawKey};
use crate::error::{Error, Result};
use crate::mesh::QuadGrid;
use crate::scalar::Scalar;

/// Per-cell Q1 function with `2^(d+1)` Lagrange coefficients per cell.
#[derive(Clone, Debug)]
pub struct DpwpFunction<'g, S> {
    grid: &'g QuadGrid<S>,
    coeffs: Vec<S>,
}

impl<'g, S: Scalar> DpwpFunction<'g, S> {
    pub fn new(grid: &'g QuadGrid<S>, coeffs: Vec<S>) -> Result<Self> {
        let expected = grid.n_cells() * corners(grid.st_dim());
        if coeffs.len() != expected {
            return Err(Error::Shape {
                expected,
                got: coeffs.len(),
            });
        }
        Ok(Self { grid, coeffs })
    }

    pub fn constant(grid: &'g QuadGrid<S>, value: S) -> Self {
        let n = grid.n_cells() * corners(grid.st_dim());
        Self {
            grid,
            coeffs: vec![value; n],
        }
    }

    /// Piecewise constant function with the given cell values.
    pub fn from_cell_values(grid: &'g QuadGrid<S>, values: &[S]) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::Shape {
                expected: grid.n_cells(),
                got: values.len(),
            });
        }
        let nc = corners(grid.st_dim());
        let coeffs = values
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(nc))
            .collect();
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &'g QuadGrid<S> {
        self.grid
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn cell_coeffs(&self, cell: usize) -> &[S] {
        let nc = corners(self.grid.st_dim());
        &self.coeffs[cell * nc..(cell + 1) * nc]
    }

    /// Multilinear interpolation inside the cell selected by `cell_of`.
    pub fn eval(&self, z: &[S]) -> Result<S> {
        let cell = self.grid.cell_of(z)?;
        let flat = self.grid.cell_flat(&cell);
        let origin = self.grid.cell_origin(flat);
        let local: Vec<S> = self
            .grid
            .axes()
            .iter()
            .enumerate()
            .map(|(k, a)| {
                ((z[k] - origin[k]) / a.cell_width())
                    .max(S::zero())
                    .min(S::one())
            })
            .collect();
        Ok(interpolate(self.cell_coeffs(flat), &local))
    }

    /// Mesh-dependent norm `max_K (|k|_inf,K + h |grad k|_inf,K)`.
    pub fn norm(&self) -> S {
        let m = self.grid.st_dim();
        let nc = corners(m);
        let widths: Vec<S> = self.grid.axes().iter().map(|a| a.cell_width()).collect();
        let h = self.grid.h();
        let mut best = S::zero();
        for cell in 0..self.grid.n_cells() {
            let c = self.cell_coeffs(cell);
            let max_abs = c.iter().fold(S::zero(), |acc, v| acc.max(v.abs()));
            // |grad|^2 is convex in each coordinate separately, so its max
            // over the box is attained at a corner.
            let mut max_grad = S::zero();
            for alpha in 0..nc {
                let mut g2 = S::zero();
                for (k, w) in widths.iter().enumerate() {
                    let hi = alpha | (1 << k);
                    let lo = alpha & !(1 << k);
                    let dk = (c[hi] - c[lo]) / *w;
                    g2 += dk * dk;
                }
                max_grad = max_grad.max(g2.sqrt());
            }
            best = best.max(max_abs + h * max_grad);
        }
        best
    }
}

pub fn eval_dpwp<S: Scalar>(k: &DpwpFunction<'_, S>, z: &[S]) -> Result<S> {
    k.eval(z)
}

pub fn dpwp_norm<S: Scalar>(k: &DpwpFunction<'_, S>) -> S {
    k.norm()
}

#[inline]
pub(crate) fn corners(st_dim: usize) -> usize {
    1usize << st_dim
}

/// Q1 Lagrange basis value of corner `alpha` at local coordinates `s`.
#[inline]
pub(crate) fn lagrange<S: Scalar>(alpha: usize, s: &[S]) -> S {
    s.iter().enumerate().fold(S::one(), |acc, (k, &sk)| {
        if alpha & (1 << k) != 0 {
            acc * sk
        } else {
            acc * (S::one() - sk)
        }
    })
}

pub(crate) fn interpolate<S: Scalar>(coeffs: &[S], s: &[S]) -> S {
    coeffs
        .iter()
        .enumerate()
        .fold(S::zero(), |acc, (alpha, &c)| acc + c * lagrange(alpha, s))
}

/// Per-cell mean `(1/|K|) int_K field` computed with the trapezoidal rule on
/// the quadrature nodes of each cell.
pub fn cell_average<S: Scalar>(field: &[S], grid: &QuadGrid<S>) -> Result<Vec<S>> {
    if field.len() != grid.n_nodes() {
        return Err(Error::Shape {
            expected: grid.n_nodes(),
            got: field.len(),
        });
    }
    let m = grid.st_dim();
    let os = grid.oversample();
    let local_shape = vec![os + 1; m];
    let local_count: usize = local_shape.iter().product();
    // local trapezoid weights normalised to sum to 1 on the cell
    let mut local_weights = Vec::with_capacity(local_count);
    let mut offsets = Vec::with_capacity(local_count);
    let mut idx = vec![0usize; m];
    let end_w = S::of(0.5) / S::of(os as f64);
    let mid_w = S::one() / S::of(os as f64);
    for _ in 0..local_count {
        let w = idx.iter().fold(S::one(), |acc, &i| {
            acc * if i == 0 || i == os { end_w } else { mid_w }
        });
        local_weights.push(w);
        offsets.push(idx.clone());
        crate::mesh::increment(&mut idx, &local_shape);
    }
    let mut out = Vec::with_capacity(grid.n_cells());
    let mut node = vec![0usize; m];
    for cell in 0..grid.n_cells() {
        let cm = crate::mesh::unflatten(cell, grid.cell_shape());
        let mut acc = S::zero();
        for (off, &w) in offsets.iter().zip(&local_weights) {
            for k in 0..m {
                node[k] = cm[k] * os + off[k];
            }
            acc += w * field[grid.node_flat(&node)];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Hyperparameters of the candidate sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Perturbations are drawn from `U(-b, b)`.
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_n_pert")]
    pub n_pert: usize,
    /// Append the constants `+c` and `-c` to the pool.
    #[serde(default = "default_true")]
    pub augment_constants: bool,
    /// Reuse one draw per corner index across all cells.
    #[serde(default)]
    pub shared_across_cells: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_b() -> f64 {
    5.0
}
fn default_n_pert() -> usize {
    512
}
fn default_true() -> bool {
    true
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            b: default_b(),
            n_pert: default_n_pert(),
            augment_constants: true,
            shared_across_cells: false,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::Parameter(format!(
                "perturbation bound b must be >= 0, got {}",
                self.b
            )));
        }
        if self.n_pert == 0 {
            return Err(Error::Parameter("n_pert must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of candidates including the optional constants.
    pub fn pool_size(&self) -> usize {
        self.n_pert + if self.augment_constants { 2 } else { 0 }
    }

    /// Draw for candidate `j`, cell `cell`, corner `alpha`, scaled to `U(-b, b)`.
    #[inline]
    pub fn perturbation<S: Scalar>(&self, key: DrawKey, j: usize, cell: usize, alpha: usize) -> S {
        let cell_slot = if self.shared_across_cells {
            u64::MAX
        } else {
            cell as u64
        };
        let slot = cell_slot.wrapping_mul(64).wrapping_add(alpha as u64);
        let u = draws::uniform(key, j as u64, slot);
        S::of(self.b * (2.0 * u - 1.0))
    }
}

/// What a candidate index in the pool refers to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Candidate<S> {
    Perturbed(usize),
    Constant(S),
}

/// Candidate `j` of a pool built with `cfg` and clip level `c`: perturbations
/// first, then `+c`, then `-c`.
pub fn candidate_kind<S: Scalar>(cfg: &PerturbationConfig, c: S, j: usize) -> Candidate<S> {
    if j < cfg.n_pert {
        Candidate::Perturbed(j)
    } else if j == cfg.n_pert {
        Candidate::Constant(c)
    } else {
        Candidate::Constant(-c)
    }
}

/// Materialises the candidate pool
/// `k_j|_K = Avg|_K + sum_alpha eps_j^alpha l_alpha`.
pub fn sample_perturbations<'g, S: Scalar>(
    grid: &'g QuadGrid<S>,
    avgs: &[S],
    cfg: &PerturbationConfig,
    key: DrawKey,
    c: S,
) -> Result<Vec<DpwpFunction<'g, S>>> {
    cfg.validate()?;
    if avgs.len() != grid.n_cells() {
        return Err(Error::Shape {
            expected: grid.n_cells(),
            got: avgs.len(),
        });
    }
    let nc = corners(grid.st_dim());
    let mut out = Vec::with_capacity(cfg.pool_size());
    for j in 0..cfg.pool_size() {
        match candidate_kind(cfg, c, j) {
            Candidate::Perturbed(j) => {
                let mut coeffs = Vec::with_capacity(avgs.len() * nc);
                for (cell, &avg) in avgs.iter().enumerate() {
                    for alpha in 0..nc {
                        coeffs.push(avg + cfg.perturbation::<S>(key, j, cell, alpha));
                    }
                }
                out.push(DpwpFunction { grid, coeffs });
            }
            Candidate::Constant(v) => out.push(DpwpFunction::constant(grid, v)),
        }
    }
    Ok(out)
}

/// Precomputed owning cell and nonzero Lagrange weights of every quadrature
/// node, so candidates can be evaluated at nodes without materialising them.
#[derive(Clone, Debug)]
pub struct NodeBasis<S> {
    cells: Vec<usize>,
    // (alpha, l_alpha(node)) per node, flattened with `offsets`
    terms: Vec<(usize, S)>,
    offsets: Vec<usize>,
}

impl<S: Scalar> NodeBasis<S> {
    pub fn new(grid: &QuadGrid<S>) -> Self {
        let nc = corners(grid.st_dim());
        let mut cells = Vec::with_capacity(grid.n_nodes());
        let mut terms = Vec::new();
        let mut offsets = Vec::with_capacity(grid.n_nodes() + 1);
        offsets.push(0);
        for n in 0..grid.n_nodes() {
            let (cell, local) = grid.node_cell(n);
            cells.push(cell);
            for alpha in 0..nc {
                let l = lagrange(alpha, &local);
                if l != S::zero() {
                    terms.push((alpha, l));
                }
            }
            offsets.push(terms.len());
        }
        Self {
            cells,
            terms,
            offsets,
        }
    }

    pub fn cell(&self, node: usize) -> usize {
        self.cells[node]
    }

    /// Value of candidate `j` at `node`; bitwise equal to evaluating the
    /// materialised candidate from [`sample_perturbations`] at that node.
    #[inline]
    pub fn candidate_value(
        &self,
        node: usize,
        j: usize,
        avgs: &[S],
        cfg: &PerturbationConfig,
        key: DrawKey,
        c: S,
    ) -> S {
        match candidate_kind(cfg, c, j) {
            Candidate::Constant(v) => v,
            Candidate::Perturbed(j) => {
                let cell = self.cells[node];
                let avg = avgs[cell];
                let mut coeff_sum = S::zero();
                // interpolate(avg + eps) = avg * sum(l) + sum(eps * l); the
                // basis sums to one, and at corner nodes a single l = 1 term
                // survives, giving exactly avg + eps.
                let terms = &self.terms[self.offsets[node]..self.offsets[node + 1]];
                if terms.len() == 1 {
                    let (alpha, _) = terms[0];
                    return avg + cfg.perturbation::<S>(key, j, cell, alpha);
                }
                for &(alpha, l) in terms {
                    coeff_sum += (avg + cfg.perturbation::<S>(key, j, cell, alpha)) * l;
                }
                coeff_sum
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d() -> QuadGrid<f64> {
        QuadGrid::build(&[-1.0], &[1.0], 0.5, &[4], 2).unwrap()
    }

    #[test]
    fn cell_average_of_constant_and_linear() {
        let g = grid_1d();
        let avgs = cell_average(&vec![3.0; g.n_nodes()], &g).unwrap();
        assert!(avgs.iter().all(|&a| a == 3.0));

        let g = QuadGrid::build(&[0.0], &[1.0], 1.0, &[1], 1).unwrap();
        let pts = g.node_points();
        let xs: Vec<f64> = pts.chunks(2).map(|p| p[0]).collect();
        assert_eq!(cell_average(&xs, &g).unwrap(), vec![0.5]);
        assert!(cell_average(&xs[..3], &g).is_err());
    }

    #[test]
    fn zero_bound_reproduces_average() {
        let g = grid_1d();
        let avgs: Vec<f64> = (0..g.n_cells()).map(|i| i as f64 * 0.1).collect();
        let cfg = PerturbationConfig {
            b: 0.0,
            n_pert: 1,
            augment_constants: false,
            ..Default::default()
        };
        let ks = sample_perturbations(&g, &avgs, &cfg, DrawKey::new(1, 0, 1), 2.0).unwrap();
        assert_eq!(ks.len(), 1);
        for cell in 0..g.n_cells() {
            assert!(ks[0].cell_coeffs(cell).iter().all(|&c| c == avgs[cell]));
        }
    }

    #[test]
    fn augmentation_appends_constants() {
        let g = grid_1d();
        let avgs = vec![0.0; g.n_cells()];
        let cfg = PerturbationConfig {
            b: 5.0,
            n_pert: 3,
            ..Default::default()
        };
        let ks = sample_perturbations(&g, &avgs, &cfg, DrawKey::new(1, 0, 1), 4.0).unwrap();
        assert_eq!(ks.len(), 5);
        assert!(ks[3].coeffs().iter().all(|&c| c == 4.0));
        assert!(ks[4].coeffs().iter().all(|&c| c == -4.0));
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let g = grid_1d();
        let avgs: Vec<f64> = (0..g.n_cells()).map(|i| (i as f64).sin()).collect();
        let cfg = PerturbationConfig {
            b: 5.0,
            n_pert: 2,
            augment_constants: false,
            ..Default::default()
        };
        let key = DrawKey::new(42, 0, 7);
        let a = sample_perturbations(&g, &avgs, &cfg, key, 2.0).unwrap();
        let b = sample_perturbations(&g, &avgs, &cfg, key, 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.coeffs(), y.coeffs());
        }
        for k in &a {
            for cell in 0..g.n_cells() {
                for &c in k.cell_coeffs(cell) {
                    assert!((c - avgs[cell]).abs() <= 5.0);
                }
            }
        }
        assert_ne!(a[0].coeffs(), a[1].coeffs());
    }

    #[test]
    fn negative_bound_rejected() {
        let g = grid_1d();
        let cfg = PerturbationConfig {
            b: -1.0,
            ..Default::default()
        };
        let avgs = vec![0.0; g.n_cells()];
        assert!(matches!(
            sample_perturbations(&g, &avgs, &cfg, DrawKey::new(0, 0, 0), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn shared_draws_repeat_across_cells() {
        let g = grid_1d();
        let avgs = vec![0.0; g.n_cells()];
        let cfg = PerturbationConfig {
            n_pert: 1,
            augment_constants: false,
            shared_across_cells: true,
            ..Default::default()
        };
        let ks = sample_perturbations(&g, &avgs, &cfg, DrawKey::new(3, 0, 0), 1.0).unwrap();
        assert_eq!(ks[0].cell_coeffs(0), ks[0].cell_coeffs(5));
    }

    #[test]
    fn evaluation_conventions() {
        let g = QuadGrid::<f64>::build(&[0.0], &[2.0], 1.0, &[2], 1).unwrap();
        let k = DpwpFunction::constant(&g, 1.5);
        assert_eq!(k.eval(&[0.3, 0.7]).unwrap(), 1.5);

        // cell 0 ramps 0 -> 1 along x, cell 1 is constant 7
        let coeffs = vec![0.0, 1.0, 0.0, 1.0, 7.0, 7.0, 7.0, 7.0];
        let k = DpwpFunction::new(&g, coeffs).unwrap();
        assert!((k.eval(&[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(k.eval(&[1.0, 0.5]).unwrap(), 7.0);
        assert_eq!(k.eval(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(k.eval(&[2.5, 0.5]).is_err());
    }

    #[test]
    fn norm_examples() {
        let g = QuadGrid::<f64>::build(&[0.0], &[0.5], 0.25, &[1], 1).unwrap();
        assert_eq!(DpwpFunction::constant(&g, 2.0).norm(), 2.0);
        assert_eq!(DpwpFunction::constant(&g, 0.0).norm(), 0.0);
        let k = DpwpFunction::new(&g, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let expected = 1.0 + g.h() * (1.0 / 0.5);
        assert!((k.norm() - expected).abs() < 1e-15);
    }

    #[test]
    fn node_basis_matches_materialised_candidates() {
        for os in [1, 2] {
            let g = QuadGrid::build_span(&[-1.0], &[1.0], 0.0, 0.5, &[3], 2, os).unwrap();
            let avgs: Vec<f64> = (0..g.n_cells()).map(|i| 0.3 * i as f64).collect();
            let cfg = PerturbationConfig {
                n_pert: 4,
                ..Default::default()
            };
            let key = DrawKey::new(9, 2, 11);
            let ks = sample_perturbations(&g, &avgs, &cfg, key, 3.0).unwrap();
            let basis = NodeBasis::new(&g);
            let mut z = [0.0; 2];
            for n in 0..g.n_nodes() {
                g.node_point(n, &mut z);
                for (j, k) in ks.iter().enumerate() {
                    let direct = k.eval(&z).unwrap();
                    let fast = basis.candidate_value(n, j, &avgs, &cfg, key, 3.0);
                    assert!((direct - fast).abs() < 1e-12, "os {os} node {n} cand {j}");
                    if os == 1 {
                        assert_eq!(direct, fast);
                    }
                }
            }
        }
    }

    #[test]
    fn stored_coefficient_reproduced_at_interior_corner() {
        let g = QuadGrid::build(&[0.0], &[2.0], 1.0, &[2], 1).unwrap();
        let coeffs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let k = DpwpFunction::new(&g, coeffs).unwrap();
        // lower-left corner of cell 1 is owned by cell 1
        assert_eq!(k.eval(&[1.0, 0.0]).unwrap(), 5.0);
        // corner (x=0,t=1) is the alpha=0b10 corner of cell 0
        assert_eq!(k.eval(&[0.0, 1.0]).unwrap(), 3.0);
    }
}
