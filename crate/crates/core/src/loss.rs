//! The sampled entropy loss
//! `L(u) = J_ent(u; k*) + h int |div F(u)| + ||u(.,0) - u0||_1 + ||u - g||_1`,
//! where `k*` maximises `J_ent(u; k) = int div F(u) sgn(u - k)` over a sampled
//! candidate pool. Every integral is the trapezoidal rule on the grid nodes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpwp::{candidate_kind, cell_average, corners, Candidate, DpwpFunction, NodeBasis, PerturbationConfig};
use crate::draws::DrawKey;
use crate::error::{Error, Result};
use crate::flux::{Field, FluxModel};
use crate::mesh::QuadGrid;
use crate::network::{grad_loss_params, ClippedTanhNet, LinearizedObjective};
use crate::scalar::{sgn, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_ent_star: f64,
    pub l_reg: f64,
    pub l_ibc_initial: f64,
    pub l_ibc_boundary: f64,
    pub total: f64,
    pub argmax_index: usize,
    pub argmax_norm: f64,
}

/// `d_t u + f'(u) . grad_x u` at `z`, zero where the clip is saturated.
pub fn residual<S: Scalar>(net: &ClippedTanhNet<S>, flux: &FluxModel<S>, z: &[S]) -> Result<S> {
    let (u, g, _) = net.forward_with_input_grad(z)?;
    Ok(residual_from_grad(flux, u, &g))
}

#[inline]
fn residual_from_grad<S: Scalar>(flux: &FluxModel<S>, u: S, grad: &[S]) -> S {
    let d = flux.dim();
    let mut r = grad[d];
    for (i, gi) in grad[..d].iter().enumerate() {
        r += flux.f_prime_comp(i, u) * *gi;
    }
    r
}

/// Values, clip indicators and residuals at every node of a grid.
#[derive(Clone, Debug)]
pub struct NodeValues<S> {
    pub u: Vec<S>,
    pub residual: Vec<S>,
    pub active: Vec<bool>,
}

impl<S: Scalar> NodeValues<S> {
    pub fn from_net(net: &ClippedTanhNet<S>, flux: &FluxModel<S>, points: &[S]) -> Result<Self> {
        if flux.dim() + 1 != net.input_dim() {
            return Err(Error::Shape {
                expected: net.input_dim(),
                got: flux.dim() + 1,
            });
        }
        let m = net.input_dim();
        let jets = net.eval_batch(points)?;
        let n = jets.raw.len();
        let mut u = Vec::with_capacity(n);
        let mut residual = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        for (b, &raw) in jets.raw.iter().enumerate() {
            let on = net.is_active(raw);
            let v = net.clamp(raw);
            u.push(v);
            active.push(on);
            residual.push(if on {
                residual_from_grad(flux, v, &jets.grad[b * m..(b + 1) * m])
            } else {
                S::zero()
            });
        }
        Ok(Self { u, residual, active })
    }

    /// Node samples of an arbitrary field with a known residual, all active.
    pub fn from_samples(u: Vec<S>, residual: Vec<S>) -> Result<Self> {
        if u.len() != residual.len() {
            return Err(Error::Shape {
                expected: u.len(),
                got: residual.len(),
            });
        }
        let active = vec![true; u.len()];
        Ok(Self { u, residual, active })
    }
}

fn weighted_residual<S: Scalar>(grid: &QuadGrid<S>, vals: &NodeValues<S>) -> Vec<(usize, S)> {
    grid.weights()
        .iter()
        .zip(&vals.residual)
        .enumerate()
        .filter(|(_, (_, r))| **r != S::zero())
        .map(|(n, (w, r))| (n, *w * *r))
        .collect()
}

fn score<S: Scalar>(wr: &[(usize, S)], u: &[S], k: impl Fn(usize) -> S) -> S {
    let mut acc = S::zero();
    for &(n, v) in wr {
        acc += v * sgn(u[n] - k(n));
    }
    acc
}

/// `J_ent` of node samples against a DPwP `k`.
pub fn j_ent_nodes<S: Scalar>(grid: &QuadGrid<S>, vals: &NodeValues<S>, k: &DpwpFunction<'_, S>) -> Result<S> {
    check_nodes(grid, vals)?;
    let pts = grid.node_points();
    let m = grid.st_dim();
    let ks = (0..grid.n_nodes())
        .map(|n| k.eval(&pts[n * m..(n + 1) * m]))
        .collect::<Result<Vec<S>>>()?;
    Ok(score(&weighted_residual(grid, vals), &vals.u, |n| ks[n]))
}

fn check_nodes<S: Scalar>(grid: &QuadGrid<S>, vals: &NodeValues<S>) -> Result<()> {
    if vals.u.len() != grid.n_nodes() {
        return Err(Error::Shape {
            expected: grid.n_nodes(),
            got: vals.u.len(),
        });
    }
    Ok(())
}

pub fn j_ent<S: Scalar>(
    net: &ClippedTanhNet<S>,
    flux: &FluxModel<S>,
    k: &DpwpFunction<'_, S>,
    grid: &QuadGrid<S>,
) -> Result<S> {
    let vals = NodeValues::from_net(net, flux, &grid.node_points())?;
    j_ent_nodes(grid, &vals, k)
}

/// Maximum of `J_ent` over explicit candidates and the lowest index attaining it.
pub fn l_ent_hat<S: Scalar>(
    net: &ClippedTanhNet<S>,
    flux: &FluxModel<S>,
    candidates: &[DpwpFunction<'_, S>],
    grid: &QuadGrid<S>,
) -> Result<(S, usize)> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let vals = NodeValues::from_net(net, flux, &grid.node_points())?;
    let scores = candidates
        .iter()
        .map(|k| j_ent_nodes(grid, &vals, k))
        .collect::<Result<Vec<S>>>()?;
    Ok(argmax(&scores))
}

fn argmax<S: Scalar>(scores: &[S]) -> (S, usize) {
    let mut best = (scores[0], 0);
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > best.0 {
            best = (s, j);
        }
    }
    best
}

pub fn l_reg<S: Scalar>(net: &ClippedTanhNet<S>, flux: &FluxModel<S>, grid: &QuadGrid<S>, h: S) -> Result<S> {
    if !(h > S::zero()) {
        return Err(Error::Parameter("h must be positive".into()));
    }
    let vals = NodeValues::from_net(net, flux, &grid.node_points())?;
    Ok(h * l1_residual(grid, &vals))
}

fn l1_residual<S: Scalar>(grid: &QuadGrid<S>, vals: &NodeValues<S>) -> S {
    let mut acc = S::zero();
    for (w, r) in grid.weights().iter().zip(&vals.residual) {
        acc += *w * r.abs();
    }
    acc
}

/// Initial and lateral-boundary L1 mismatches; `g = None` means `g = 0`.
pub fn l_ibc<S: Scalar>(
    net: &ClippedTanhNet<S>,
    u0: &Field<S>,
    g: Option<&Field<S>>,
    grid: &QuadGrid<S>,
) -> Result<(S, S)> {
    let ibc = IbcNodes::new(grid, u0, g);
    let pts = grid.node_points();
    let m = grid.st_dim();
    let mut u = vec![S::zero(); grid.n_nodes()];
    for &(n, _, _) in ibc.initial.iter().chain(&ibc.boundary) {
        u[n] = net.forward(&pts[n * m..(n + 1) * m])?;
    }
    Ok(ibc.mismatch(&u))
}

/// Boundary nodes with their weights and target values.
#[derive(Clone, Debug)]
struct IbcNodes<S> {
    initial: Vec<(usize, S, S)>,
    boundary: Vec<(usize, S, S)>,
}

impl<S: Scalar> IbcNodes<S> {
    fn new(grid: &QuadGrid<S>, u0: &Field<S>, g: Option<&Field<S>>) -> Self {
        let m = grid.st_dim();
        let mut z = vec![S::zero(); m];
        let mut target = |n: usize, f: Option<&Field<S>>| -> S {
            grid.node_point(n, &mut z);
            f.map_or(S::zero(), |f| f(&z))
        };
        let initial = grid
            .initial_face()
            .into_iter()
            .map(|(n, w)| (n, w, target(n, Some(u0))))
            .collect();
        let boundary = grid
            .lateral_faces()
            .into_iter()
            .map(|(n, w)| (n, w, target(n, g)))
            .collect();
        Self { initial, boundary }
    }

    fn mismatch(&self, u: &[S]) -> (S, S) {
        let sum = |list: &[(usize, S, S)]| {
            let mut acc = S::zero();
            for &(n, w, target) in list {
                acc += w * (u[n] - target).abs();
            }
            acc
        };
        (sum(&self.initial), sum(&self.boundary))
    }
}

/// Everything about a grid and its data that stays fixed across iterations.
pub struct LossContext<'g, S> {
    grid: &'g QuadGrid<S>,
    flux: FluxModel<S>,
    basis: NodeBasis<S>,
    points: Vec<S>,
    ibc: IbcNodes<S>,
}

impl<'g, S: Scalar> LossContext<'g, S> {
    pub fn new(grid: &'g QuadGrid<S>, flux: FluxModel<S>, u0: &Field<S>, g: Option<&Field<S>>) -> Result<Self> {
        if flux.dim() != grid.dim() {
            return Err(Error::Shape {
                expected: grid.dim(),
                got: flux.dim(),
            });
        }
        Ok(Self {
            grid,
            basis: NodeBasis::new(grid),
            points: grid.node_points(),
            ibc: IbcNodes::new(grid, u0, g),
            flux,
        })
    }

    pub fn grid(&self) -> &'g QuadGrid<S> {
        self.grid
    }

    pub fn flux(&self) -> &FluxModel<S> {
        &self.flux
    }

    pub fn points(&self) -> &[S] {
        &self.points
    }

    pub fn node_values(&self, net: &ClippedTanhNet<S>) -> Result<NodeValues<S>> {
        NodeValues::from_net(net, &self.flux, &self.points)
    }

    /// `J_ent` of every candidate in the pool, in pool order.
    pub fn candidate_scores(
        &self,
        vals: &NodeValues<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
        c: S,
    ) -> Result<Vec<S>> {
        cfg.validate()?;
        let avgs = cell_average(&vals.u, self.grid)?;
        let wr = weighted_residual(self.grid, vals);
        Ok((0..cfg.pool_size())
            .into_par_iter()
            .map(|j| {
                score(&wr, &vals.u, |n| {
                    self.basis.candidate_value(n, j, &avgs, cfg, key, c)
                })
            })
            .collect())
    }

    /// Loss at a fixed candidate index (the argmax is not recomputed).
    pub fn loss_with_candidate(
        &self,
        vals: &NodeValues<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
        c: S,
        j: usize,
    ) -> Result<S> {
        let avgs = cell_average(&vals.u, self.grid)?;
        let wr = weighted_residual(self.grid, vals);
        let j_ent = score(&wr, &vals.u, |n| self.basis.candidate_value(n, j, &avgs, cfg, key, c));
        let (ini, bnd) = self.ibc.mismatch(&vals.u);
        Ok(j_ent + self.grid.h() * l1_residual(self.grid, vals) + ini + bnd)
    }

    /// Full sampled loss for the draw stream `key`.
    pub fn total_loss(
        &self,
        net: &ClippedTanhNet<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
    ) -> Result<(LossBreakdown, NodeValues<S>)> {
        let vals = self.node_values(net)?;
        let bd = self.breakdown_for_values(&vals, cfg, key, net.clip())?;
        Ok((bd, vals))
    }

    /// Sampled loss of arbitrary node values (not necessarily from a network).
    pub fn breakdown_for_values(
        &self,
        vals: &NodeValues<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
        c: S,
    ) -> Result<LossBreakdown> {
        if vals.u.len() != self.grid.n_nodes() {
            return Err(Error::Shape {
                expected: self.grid.n_nodes(),
                got: vals.u.len(),
            });
        }
        let scores = self.candidate_scores(vals, cfg, key, c)?;
        if scores.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let (j_star, idx) = argmax(&scores);
        let reg = self.grid.h() * l1_residual(self.grid, vals);
        let (ini, bnd) = self.ibc.mismatch(&vals.u);
        let total = j_star + reg + ini + bnd;
        let norm = self.candidate_norm(vals, cfg, key, c, idx)?;
        Ok(LossBreakdown {
            j_ent_star: j_star.as_f64(),
            l_reg: reg.as_f64(),
            l_ibc_initial: ini.as_f64(),
            l_ibc_boundary: bnd.as_f64(),
            total: total.as_f64(),
            argmax_index: idx,
            argmax_norm: norm.as_f64(),
        })
    }

    fn candidate_norm(&self, vals: &NodeValues<S>, cfg: &PerturbationConfig, key: DrawKey, c: S, j: usize) -> Result<S> {
        Ok(match candidate_kind(cfg, c, j) {
            Candidate::Constant(v) => v.abs(),
            Candidate::Perturbed(j) => {
                let avgs = cell_average(&vals.u, self.grid)?;
                let nc = corners(self.grid.st_dim());
                let mut coeffs = Vec::with_capacity(avgs.len() * nc);
                for (cell, &avg) in avgs.iter().enumerate() {
                    for alpha in 0..nc {
                        coeffs.push(avg + cfg.perturbation::<S>(key, j, cell, alpha));
                    }
                }
                DpwpFunction::new(self.grid, coeffs)?.norm()
            }
        })
    }

    /// Linear form whose parameter gradient is the loss gradient at fixed
    /// `k*`, frozen signs and frozen clip pattern.
    pub fn linearize(
        &self,
        vals: &NodeValues<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
        c: S,
        j_star: usize,
    ) -> Result<LinearizedObjective<S>> {
        let n = self.grid.n_nodes();
        let avgs = cell_average(&vals.u, self.grid)?;
        let h = self.grid.h();
        let mut du = vec![S::zero(); n];
        let mut dres = vec![S::zero(); n];
        for (node, w) in self.grid.weights().iter().enumerate() {
            if !vals.active[node] {
                continue;
            }
            let k = self.basis.candidate_value(node, j_star, &avgs, cfg, key, c);
            dres[node] = *w * (sgn(vals.u[node] - k) + h * sgn(vals.residual[node]));
        }
        for &(node, w, target) in self.ibc.initial.iter().chain(&self.ibc.boundary) {
            du[node] += w * sgn(vals.u[node] - target);
        }
        Ok(LinearizedObjective {
            points: self.points.clone(),
            du,
            dres,
        })
    }

    /// Loss breakdown and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        net: &ClippedTanhNet<S>,
        cfg: &PerturbationConfig,
        key: DrawKey,
    ) -> Result<(LossBreakdown, Vec<S>)> {
        let (bd, vals) = self.total_loss(net, cfg, key)?;
        let obj = self.linearize(&vals, cfg, key, net.clip(), bd.argmax_index)?;
        let grad = grad_loss_params(net, &self.flux, &obj)?;
        Ok((bd, grad))
    }
}

/// Free-function form of [`LossContext::total_loss`].
pub fn total_loss<S: Scalar>(
    net: &ClippedTanhNet<S>,
    flux: &FluxModel<S>,
    u0: &Field<S>,
    g: Option<&Field<S>>,
    cfg: &PerturbationConfig,
    grid: &QuadGrid<S>,
    key: DrawKey,
) -> Result<LossBreakdown> {
    let ctx = LossContext::new(grid, flux.clone(), u0, g)?;
    Ok(ctx.total_loss(net, cfg, key)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::make_flux;
    use std::sync::Arc;

    fn identity_x(c: f64) -> ClippedTanhNet<f64> {
        ClippedTanhNet::from_layers(vec![(vec![1.0, 0.0], vec![0.0])], 2, c).unwrap()
    }

    fn constant_net(v: f64) -> ClippedTanhNet<f64> {
        ClippedTanhNet::from_layers(vec![(vec![0.0, 0.0], vec![v])], 2, 4.0).unwrap()
    }

    fn zero_field() -> Field<f64> {
        Arc::new(|_: &[f64]| 0.0)
    }

    fn grid() -> QuadGrid<f64> {
        QuadGrid::build(&[-1.0], &[1.0], 0.5, &[16], 8).unwrap()
    }

    #[test]
    fn residual_examples() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        assert_eq!(residual(&constant_net(0.7), &b, &[0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(residual(&identity_x(10.0), &b, &[0.3, 0.1]).unwrap(), 0.3);
        assert_eq!(residual(&identity_x(0.2), &b, &[0.3, 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn j_ent_examples() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = grid();
        let k = DpwpFunction::constant(&g, 0.3);
        assert_eq!(j_ent(&constant_net(0.5), &b, &k, &g).unwrap(), 0.0);

        let net = identity_x(10.0);
        let k = DpwpFunction::constant(&g, -10.0);
        let vals = NodeValues::from_net(&net, &b, &g.node_points()).unwrap();
        let direct = g.integrate(&vals.residual).unwrap();
        let j = j_ent(&net, &b, &k, &g).unwrap();
        assert!((j - direct).abs() < 1e-14);
        assert!(j.abs() < 1e-12);
    }

    #[test]
    fn l_ent_hat_examples() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = QuadGrid::build(&[0.0], &[1.0], 0.5, &[8], 4).unwrap();
        let net = identity_x(10.0);
        let pool = vec![DpwpFunction::constant(&g, 10.0), DpwpFunction::constant(&g, -10.0)];
        let (v, idx) = l_ent_hat(&net, &b, &pool, &g).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert_eq!(idx, 1);

        let same = vec![DpwpFunction::constant(&g, 0.1); 3];
        assert_eq!(l_ent_hat(&net, &b, &same, &g).unwrap().1, 0);
        assert_eq!(l_ent_hat(&constant_net(0.2), &b, &pool, &g).unwrap(), (0.0, 0));
        assert!(matches!(l_ent_hat(&net, &b, &[], &g), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn l_reg_examples() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = grid();
        assert_eq!(l_reg(&constant_net(1.0), &b, &g, 0.1).unwrap(), 0.0);
        let v = l_reg(&identity_x(10.0), &b, &g, 0.1).unwrap();
        assert!((v - 0.05).abs() < 1e-14);
        assert!(l_reg(&identity_x(10.0), &b, &g, 0.0).is_err());
    }

    #[test]
    fn l_ibc_examples() {
        let g = grid();
        let one: Field<f64> = Arc::new(|_: &[f64]| 1.0);
        let zero = ClippedTanhNet::<f64>::zeros(&[2, 3, 1], 4.0).unwrap();
        let (ini, bnd) = l_ibc(&zero, &one, None, &g).unwrap();
        assert!((ini - 2.0).abs() < 1e-14);
        assert_eq!(bnd, 0.0);

        let net = identity_x(10.0);
        let x: Field<f64> = Arc::new(|z: &[f64]| z[0]);
        let (ini, bnd) = l_ibc(&net, &x, Some(&x), &g).unwrap();
        assert_eq!((ini, bnd), (0.0, 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = grid();
        let cfg = PerturbationConfig {
            n_pert: 16,
            ..Default::default()
        };
        let key = DrawKey::new(1, 0, 0);
        let zero = ClippedTanhNet::<f64>::zeros(&[2, 4, 1], 2.0).unwrap();
        let bd = total_loss(&zero, &b, &zero_field(), None, &cfg, &g, key).unwrap();
        assert_eq!(bd.total, 0.0);

        let net = ClippedTanhNet::<f64>::init(&[2, 8, 8, 1], 4.0, 3).unwrap();
        let u0: Field<f64> = Arc::new(|z: &[f64]| if z[0] <= 0.0 { 1.0 } else { -1.0 });
        let bd = total_loss(&net, &b, &u0, Some(&u0), &cfg, &g, key).unwrap();
        assert_eq!(bd.total - (bd.j_ent_star + bd.l_reg + bd.l_ibc_initial + bd.l_ibc_boundary), 0.0);
        assert!(bd.j_ent_star >= -1e-12);
        assert!(bd.l_reg >= 0.0 && bd.l_ibc_initial > 0.0);
    }

    #[test]
    fn node_scoring_matches_materialised_pool() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = QuadGrid::build(&[-1.0], &[1.0], 0.5, &[8], 4).unwrap();
        let net = ClippedTanhNet::<f64>::init(&[2, 6, 1], 4.0, 7).unwrap();
        let cfg = PerturbationConfig {
            n_pert: 8,
            b: 0.5,
            ..Default::default()
        };
        let key = DrawKey::new(3, 0, 2);
        let ctx = LossContext::new(&g, b.clone(), &zero_field(), None).unwrap();
        let vals = ctx.node_values(&net).unwrap();
        let scores = ctx.candidate_scores(&vals, &cfg, key, 4.0).unwrap();
        let avgs = cell_average(&vals.u, &g).unwrap();
        let pool = crate::dpwp::sample_perturbations(&g, &avgs, &cfg, key, 4.0).unwrap();
        for (j, k) in pool.iter().enumerate() {
            assert_eq!(scores[j], j_ent_nodes(&g, &vals, k).unwrap());
        }
        let (best, idx) = l_ent_hat(&net, &b, &pool, &g).unwrap();
        let (bd, _) = ctx.total_loss(&net, &cfg, key).unwrap();
        assert_eq!((bd.j_ent_star, bd.argmax_index), (best, idx));
    }

    #[test]
    fn zero_net_zero_data_has_zero_gradient() {
        let b = make_flux::<f64>("burgers1d").unwrap();
        let g = grid();
        let ctx = LossContext::new(&g, b, &zero_field(), None).unwrap();
        let net = ClippedTanhNet::<f64>::zeros(&[2, 4, 1], 2.0).unwrap();
        let (_, grad) = ctx
            .loss_and_grad(&net, &PerturbationConfig::default(), DrawKey::new(0, 0, 0))
            .unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
    }
}
