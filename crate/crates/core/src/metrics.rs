//! Relative L1 errors against exact or WENO references, and the mesh
//! refinement harness.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::Field;
use crate::mesh::QuadGrid;
use crate::reference::{make_benchmark, solve_reference, BenchmarkProblem, ReferenceSolution};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Exact,
    Weno,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Relative L1 error at the final time.
    pub e_r_final: f64,
    /// Relative space-time L1 error.
    pub e_r_spacetime: f64,
    pub n_cells_x: Vec<usize>,
    pub n_cells_t: usize,
    pub reference: ReferenceKind,
}

/// What the errors are measured against.
#[derive(Clone)]
pub enum ReferenceField<S> {
    Exact(Field<S>),
    Weno(Arc<ReferenceSolution<S>>),
}

impl<S: Scalar> ReferenceField<S> {
    pub fn kind(&self) -> ReferenceKind {
        match self {
            Self::Exact(_) => ReferenceKind::Exact,
            Self::Weno(_) => ReferenceKind::Weno,
        }
    }

    pub fn eval(&self, z: &[S]) -> S {
        match self {
            Self::Exact(f) => f(z),
            Self::Weno(sol) => sol.eval(z[0], z[z.len() - 1]),
        }
    }
}

/// Closed form when the problem has one, otherwise a WENO run with the
/// problem's reference settings.
pub fn reference_field<S: Scalar>(problem: &BenchmarkProblem<S>) -> Result<ReferenceField<S>> {
    match &problem.exact {
        Some(f) => Ok(ReferenceField::Exact(f.clone())),
        None => {
            let cfg = problem.reference;
            let sol = solve_reference(problem, cfg.n_cells, S::of(cfg.cfl))?;
            Ok(ReferenceField::Weno(Arc::new(sol)))
        }
    }
}

/// Errors of node `values` on `grid` (trapezoid rule for numerator and denominator).
pub fn relative_errors_from_values<S: Scalar>(
    values: &[S],
    reference: &ReferenceField<S>,
    grid: &QuadGrid<S>,
) -> Result<ErrorReport> {
    if values.len() != grid.n_nodes() {
        return Err(Error::Shape {
            expected: grid.n_nodes(),
            got: values.len(),
        });
    }
    let mut z = vec![S::zero(); grid.st_dim()];
    let refs: Vec<f64> = (0..grid.n_nodes())
        .map(|n| {
            grid.node_point(n, &mut z);
            reference.eval(&z).as_f64()
        })
        .collect();
    let ratio = |nodes: &mut dyn Iterator<Item = (usize, f64)>, what: &str| -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (n, w) in nodes {
            num += w * (values[n].as_f64() - refs[n]).abs();
            den += w * refs[n].abs();
        }
        if !(den > 0.0) {
            return Err(Error::Metric(format!("reference vanishes on the {what}")));
        }
        Ok(num / den)
    };
    let e_r_final = ratio(&mut grid.final_face().into_iter().map(|(n, w)| (n, w.as_f64())), "final time slice")?;
    let e_r_spacetime = ratio(
        &mut grid.weights().iter().enumerate().map(|(n, w)| (n, w.as_f64())),
        "space-time domain",
    )?;
    Ok(ErrorReport {
        e_r_final,
        e_r_spacetime,
        n_cells_x: grid.n_cells_x(),
        n_cells_t: grid.n_cells_t(),
        reference: reference.kind(),
    })
}

/// Errors of `field` sampled at the nodes of `grid`.
pub fn relative_errors<S: Scalar>(
    field: &(dyn Fn(&[S]) -> Result<S> + Sync),
    reference: &ReferenceField<S>,
    grid: &QuadGrid<S>,
) -> Result<ErrorReport> {
    let m = grid.st_dim();
    let values = grid
        .node_points()
        .chunks(m)
        .map(field)
        .collect::<Result<Vec<S>>>()?;
    relative_errors_from_values(&values, reference, grid)
}

/// Least-squares slope of `log e` against `log h`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, e)| *h > 0.0 && *e > 0.0 && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Metric("need at least two positive points for a slope".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Metric("all mesh sizes are equal".into()));
    }
    Ok(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// One refinement level; unset fields fall back to the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct MeshLevel {
    pub n_cells_x: Vec<usize>,
    pub n_cells_t: usize,
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub n_train: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub e_r_final: Option<f64>,
    pub e_r_spacetime: Option<f64>,
    /// Set when training at this level failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub slope_final: Option<f64>,
    pub slope_spacetime: Option<f64>,
}

impl ConvergenceTable {
    pub fn from_rows(rows: Vec<ConvergenceRow>) -> Self {
        let pick = |f: fn(&ConvergenceRow) -> Option<f64>| {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| f(r).map(|e| (r.h, e))).collect();
            fit_slope(&pts).ok()
        };
        Self {
            slope_final: pick(|r| r.e_r_final),
            slope_spacetime: pick(|r| r.e_r_spacetime),
            rows,
        }
    }
}

/// Level config derived from `base`.
pub fn level_config(base: &TrainConfig, level: &MeshLevel) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.n_cells_x = level.n_cells_x.clone();
    cfg.n_cells_t = level.n_cells_t;
    if let Some(w) = &level.widths {
        cfg.widths = w.clone();
    }
    if let Some(n) = level.n_train {
        cfg.n_train = n;
    }
    cfg
}

/// Trains every level (concurrently) and fits the log-log slopes. A failed
/// level is recorded and the study continues.
pub fn convergence_study(base: &TrainConfig, levels: &[MeshLevel]) -> Result<ConvergenceTable> {
    if levels.len() < 2 {
        return Err(Error::Parameter("a convergence study needs at least two levels".into()));
    }
    let problem = make_benchmark::<f64>(&base.benchmark)?;
    let rows = levels
        .par_iter()
        .map(|level| {
            let cfg = level_config(base, level);
            let h = QuadGrid::build(&problem.lo, &problem.hi, problem.t_final, &cfg.n_cells_x, cfg.n_cells_t)
                .map(|g| g.h())
                .unwrap_or(f64::NAN);
            match train::<f64>(&cfg) {
                Ok(res) => {
                    let m = res.metrics.expect("train fills the metrics");
                    ConvergenceRow {
                        h,
                        e_r_final: Some(m.e_r_final),
                        e_r_spacetime: Some(m.e_r_spacetime),
                        error: None,
                    }
                }
                Err(e) => ConvergenceRow {
                    h,
                    e_r_final: None,
                    e_r_spacetime: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ConvergenceTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_examples() {
        assert!((fit_slope(&[(1.0 / 16.0, 0.1), (1.0 / 32.0, 0.05)]).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_slope(&[(1.0 / 16.0, 0.1), (1.0 / 32.0, 0.1)]).unwrap().abs() < 1e-12);
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (0.5f64.powi(k), 3.0 * 0.5f64.powi(k).powf(0.7))).collect();
        assert!((fit_slope(&pts).unwrap() - 0.7).abs() < 1e-12);
        assert!(fit_slope(&[(0.1, 1.0)]).is_err());
    }

    #[test]
    fn standing_shock_examples() {
        let p = make_benchmark::<f64>("standing_shock").unwrap();
        let r = reference_field(&p).unwrap();
        let grid = QuadGrid::build(&p.lo, &p.hi, p.t_final, &[64], 16).unwrap();
        let exact = p.exact.clone().unwrap();
        let zero = relative_errors(&|_: &[f64]| Ok(0.0), &r, &grid).unwrap();
        assert!((zero.e_r_final - 1.0).abs() < 1e-12);
        let same = relative_errors(&|z: &[f64]| Ok(exact(z)), &r, &grid).unwrap();
        assert_eq!((same.e_r_final, same.e_r_spacetime), (0.0, 0.0));
        let shifted = relative_errors(&|z: &[f64]| Ok(exact(z) + 0.01), &r, &grid).unwrap();
        assert!((shifted.e_r_final - 0.01).abs() < 1e-12);
        assert_eq!(shifted.reference, ReferenceKind::Exact);
    }

    #[test]
    fn vanishing_reference_rejected() {
        let grid = QuadGrid::build(&[0.0], &[1.0], 1.0, &[4], 4).unwrap();
        let r = ReferenceField::Exact(Arc::new(|_: &[f64]| 0.0));
        assert!(matches!(relative_errors(&|_: &[f64]| Ok(1.0), &r, &grid), Err(Error::Metric(_))));
    }
}
