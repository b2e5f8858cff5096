//! Benchmark problems, their closed-form entropy solutions, and a
//! WENO5-JS / SSP-RK3 finite-volume solver for the ones without a closed form.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flux::{make_flux, Field, FluxModel};
use crate::scalar::Scalar;

pub const BENCHMARK_NAMES: [&str; 9] = [
    "standing_shock",
    "moving_shock",
    "rarefaction",
    "two_shock",
    "sine_burgers",
    "cubic",
    "buckley_leverett",
    "sine_flux",
    "burgers2d",
];

/// A straight shock `x = x0 + speed * t` between constant states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShockLine {
    pub x0: f64,
    pub speed: f64,
    pub left: f64,
    pub right: f64,
}

impl ShockLine {
    pub fn position(&self, t: f64) -> f64 {
        self.x0 + self.speed * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub n_cells: usize,
    pub cfl: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            n_cells: 4096,
            cfl: 0.4,
        }
    }
}

/// A conservation law on a box with initial data and a lateral trace.
///
/// `u0`, `boundary` and `exact` all take a space-time point `(x.., t)`;
/// `u0` ignores `t`.
#[derive(Clone)]
pub struct BenchmarkProblem<S> {
    pub name: String,
    pub flux: FluxModel<S>,
    pub lo: Vec<S>,
    pub hi: Vec<S>,
    pub t_final: S,
    pub u0: Field<S>,
    pub boundary: Field<S>,
    pub exact: Option<Field<S>>,
    /// Bounds of the initial data, used for the LF splitting speed and the default clip.
    pub data_range: (S, S),
    pub shock: Option<ShockLine>,
    pub reference: ReferenceConfig,
}

impl<S> std::fmt::Debug for BenchmarkProblem<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BenchmarkProblem")
            .field("name", &self.name)
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl<S: Scalar> BenchmarkProblem<S> {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `||u0||_inf` over the data range.
    pub fn sup_norm(&self) -> S {
        self.data_range.0.abs().max(self.data_range.1.abs())
    }

    /// Default clip level `2 (||u0||_inf + 1)`.
    pub fn default_clip(&self) -> S {
        S::of(2.0) * (self.sup_norm() + S::one())
    }
}

fn riemann<S: Scalar>(x0: f64, left: f64, right: f64, strict: bool) -> Field<S> {
    let (x0, l, r) = (S::of(x0), S::of(left), S::of(right));
    Arc::new(move |z: &[S]| {
        let is_left = if strict { z[0] < x0 } else { z[0] <= x0 };
        if is_left {
            l
        } else {
            r
        }
    })
}

fn far_field<S: Scalar>(mid: f64, left: f64, right: f64) -> Field<S> {
    let (mid, l, r) = (S::of(mid), S::of(left), S::of(right));
    Arc::new(move |z: &[S]| if z[0] <= mid { l } else { r })
}

fn shock_field<S: Scalar>(line: ShockLine) -> Field<S> {
    Arc::new(move |z: &[S]| {
        let t = z[z.len() - 1];
        if z[0] <= S::of(line.x0) + S::of(line.speed) * t {
            S::of(line.left)
        } else {
            S::of(line.right)
        }
    })
}

/// Builds a catalog benchmark by name.
pub fn make_benchmark<S: Scalar>(name: &str) -> Result<BenchmarkProblem<S>> {
    let s = S::of;
    let line_problem = |flux: &str, line: ShockLine| -> Result<BenchmarkProblem<S>> {
        let exact = shock_field::<S>(line);
        Ok(BenchmarkProblem {
            name: name.into(),
            flux: make_flux(flux)?,
            lo: vec![s(-1.0)],
            hi: vec![s(1.0)],
            t_final: s(0.5),
            u0: riemann(line.x0, line.left, line.right, false),
            boundary: exact.clone(),
            exact: Some(exact),
            data_range: (s(line.left.min(line.right)), s(line.left.max(line.right))),
            shock: Some(line),
            reference: ReferenceConfig::default(),
        })
    };
    match name {
        "standing_shock" => line_problem(
            "burgers1d",
            ShockLine {
                x0: 0.0,
                speed: 0.0,
                left: 1.0,
                right: -1.0,
            },
        ),
        "moving_shock" => line_problem(
            "burgers1d",
            ShockLine {
                x0: 0.0,
                speed: 1.0,
                left: 2.0,
                right: 0.0,
            },
        ),
        "rarefaction" => {
            let exact: Field<S> = Arc::new(|z: &[S]| {
                let (x, t) = (z[0], z[1]);
                if x <= -t {
                    -S::one()
                } else if x <= t {
                    x / t
                } else {
                    S::one()
                }
            });
            Ok(BenchmarkProblem {
                name: name.into(),
                flux: make_flux("burgers1d")?,
                lo: vec![s(-1.0)],
                hi: vec![s(1.0)],
                t_final: s(0.5),
                u0: riemann(0.0, -1.0, 1.0, false),
                boundary: exact.clone(),
                exact: Some(exact),
                data_range: (s(-1.0), s(1.0)),
                shock: None,
                reference: ReferenceConfig::default(),
            })
        }
        "two_shock" => {
            let exact: Field<S> = Arc::new(|z: &[S]| two_shock_exact(z[0].as_f64(), z[1].as_f64()));
            Ok(BenchmarkProblem {
                name: name.into(),
                flux: make_flux("burgers1d")?,
                lo: vec![s(-1.0)],
                hi: vec![s(1.0)],
                t_final: s(0.5),
                u0: Arc::new(|z: &[S]| two_shock_exact(z[0].as_f64(), 0.0)),
                boundary: exact.clone(),
                exact: Some(exact),
                data_range: (s(-1.6), s(0.8)),
                shock: None,
                reference: ReferenceConfig::default(),
            })
        }
        "sine_burgers" => Ok(BenchmarkProblem {
            name: name.into(),
            flux: make_flux("burgers1d")?,
            lo: vec![s(-1.0)],
            hi: vec![s(1.0)],
            t_final: s(1.0),
            u0: Arc::new(|z: &[S]| -(S::PI() * z[0]).sin()),
            boundary: Arc::new(|_: &[S]| S::zero()),
            exact: None,
            data_range: (s(-1.0), s(1.0)),
            shock: None,
            reference: ReferenceConfig::default(),
        }),
        "cubic" | "buckley_leverett" | "sine_flux" => {
            let (flux, lo, hi, l, r) = match name {
                "cubic" => ("cubic", -1.0, 1.0, 1.0, -1.0),
                "buckley_leverett" => ("buckley_leverett", -1.0, 1.0, 1.0, 0.0),
                _ => ("sine_flux", -1.5, 1.5, 0.5, 2.5),
            };
            Ok(BenchmarkProblem {
                name: name.into(),
                flux: make_flux(flux)?,
                lo: vec![s(lo)],
                hi: vec![s(hi)],
                t_final: s(0.5),
                u0: riemann(0.0, l, r, true),
                boundary: far_field(0.0, l, r),
                exact: None,
                data_range: (s(l.min(r)), s(l.max(r))),
                shock: None,
                reference: ReferenceConfig::default(),
            })
        }
        "burgers2d" => {
            let exact: Field<S> = Arc::new(|z: &[S]| burgers2d_exact(z[0], z[1], z[2]));
            Ok(BenchmarkProblem {
                name: name.into(),
                flux: make_flux("burgers2d")?,
                lo: vec![s(0.0), s(0.0)],
                hi: vec![s(1.0), s(1.0)],
                t_final: s(0.3),
                u0: Arc::new(|z: &[S]| burgers2d_exact(z[0], z[1], S::zero())),
                boundary: exact.clone(),
                exact: Some(exact),
                data_range: (s(-2.0), s(2.0)),
                shock: None,
                reference: ReferenceConfig::default(),
            })
        }
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}

fn two_shock_exact<S: Scalar>(x: f64, t: f64) -> S {
    let v = if t <= 1.0 / 3.0 {
        if x <= 0.3 + 0.3 * t {
            0.8
        } else if x <= 0.7 - 0.9 * t {
            -0.2
        } else {
            -1.6
        }
    } else if x <= 0.4 - 0.4 * (t - 1.0 / 3.0) {
        0.8
    } else {
        -1.6
    };
    S::of(v)
}

fn burgers2d_exact<S: Scalar>(x: S, y: S, t: S) -> S {
    let half = S::of(0.5);
    let two = S::of(2.0);
    if x <= half - t {
        if y >= half + t {
            S::zero()
        } else {
            two
        }
    } else if y >= S::one() - x {
        -two
    } else {
        two
    }
}

/// Closed-form solution at `z = (x.., t)`.
pub fn exact_solution<S: Scalar>(problem: &BenchmarkProblem<S>, z: &[S]) -> Result<S> {
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("{} has no closed-form solution", problem.name)))?;
    if z.len() != problem.dim() + 1 {
        return Err(Error::Shape {
            expected: problem.dim() + 1,
            got: z.len(),
        });
    }
    Ok(exact(z))
}

const WENO_EPS: f64 = 1e-6;

/// Left-biased WENO5-JS value at `x_{i+1/2}` from `v_{i-2} .. v_{i+2}`.
#[inline]
pub fn weno5_reconstruct<S: Scalar>(v: [S; 5]) -> S {
    let [a, b, c, d, e] = v;
    let s = S::of;
    let p0 = (s(2.0) * a - s(7.0) * b + s(11.0) * c) / s(6.0);
    let p1 = (-b + s(5.0) * c + s(2.0) * d) / s(6.0);
    let p2 = (s(2.0) * c + s(5.0) * d - e) / s(6.0);
    let k = s(13.0 / 12.0);
    let q = s(0.25);
    let sq = |x: S| x * x;
    let b0 = k * sq(a - s(2.0) * b + c) + q * sq(a - s(4.0) * b + s(3.0) * c);
    let b1 = k * sq(b - s(2.0) * c + d) + q * sq(b - d);
    let b2 = k * sq(c - s(2.0) * d + e) + q * sq(s(3.0) * c - s(4.0) * d + e);
    let eps = s(WENO_EPS);
    let w0 = s(0.1) / sq(eps + b0);
    let w1 = s(0.6) / sq(eps + b1);
    let w2 = s(0.3) / sq(eps + b2);
    (w0 * p0 + w1 * p1 + w2 * p2) / (w0 + w1 + w2)
}

/// Cell averages on a uniform grid at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FvState<S> {
    pub time: S,
    pub values: Vec<S>,
}

/// Snapshots of a finite-volume run, saved every `T/100`.
#[derive(Clone, Debug)]
pub struct ReferenceSolution<S> {
    pub lo: S,
    pub hi: S,
    pub dx: S,
    pub snapshots: Vec<FvState<S>>,
    /// Time integral of `F(hi) - F(lo)`, accumulated with the stage weights
    /// of the Runge-Kutta scheme.
    pub boundary_outflow: S,
}

impl<S: Scalar> ReferenceSolution<S> {
    pub fn n_cells(&self) -> usize {
        self.snapshots[0].values.len()
    }

    pub fn centers(&self) -> Vec<S> {
        (0..self.n_cells())
            .map(|i| self.lo + self.dx * (S::of(i as f64) + S::of(0.5)))
            .collect()
    }

    pub fn mass(&self, snapshot: usize) -> S {
        let mut acc = S::zero();
        for v in &self.snapshots[snapshot].values {
            acc += *v;
        }
        acc * self.dx
    }

    /// Snapshot closest to `t` (earlier one on ties).
    pub fn nearest_snapshot(&self, t: S) -> &FvState<S> {
        let mut best = &self.snapshots[0];
        for s in &self.snapshots[1..] {
            if (s.time - t).abs() < (best.time - t).abs() {
                best = s;
            }
        }
        best
    }

    /// Piecewise constant in `x`, nearest snapshot in `t`.
    pub fn eval(&self, x: S, t: S) -> S {
        let snap = self.nearest_snapshot(t);
        let n = snap.values.len();
        let i = ((x - self.lo) / self.dx).floor().to_isize().unwrap_or(0);
        snap.values[i.clamp(0, n as isize - 1) as usize]
    }
}

struct Solver<'a, S> {
    problem: &'a BenchmarkProblem<S>,
    n: usize,
    dx: S,
    alpha: S,
    ext: Vec<S>,
    fplus: Vec<S>,
    fminus: Vec<S>,
}

impl<S: Scalar> Solver<'_, S> {
    /// Spatial operator `-(F_{i+1/2} - F_{i-1/2}) / dx`; returns `F(hi) - F(lo)`.
    fn rhs(&mut self, u: &[S], t: S, out: &mut [S]) -> S {
        let n = self.n;
        let half = S::of(0.5);
        let g = &self.problem.boundary;
        let left = g(&[self.problem.lo[0], t]);
        let right = g(&[self.problem.hi[0], t]);
        for k in 0..3 {
            self.ext[k] = left;
            self.ext[n + 3 + k] = right;
        }
        self.ext[3..n + 3].copy_from_slice(u);
        for (k, &v) in self.ext.iter().enumerate() {
            let f = self.problem.flux.f_comp(0, v);
            self.fplus[k] = half * (f + self.alpha * v);
            self.fminus[k] = half * (f - self.alpha * v);
        }
        // interface between interior cells i and i+1 has index i+1 in 0..=n
        let flux_at = |j: usize, fp: &[S], fm: &[S]| -> S {
            let e = j; // ext index of interior cell j-1 is j+2
            let l = weno5_reconstruct([fp[e], fp[e + 1], fp[e + 2], fp[e + 3], fp[e + 4]]);
            let r = weno5_reconstruct([fm[e + 5], fm[e + 4], fm[e + 3], fm[e + 2], fm[e + 1]]);
            l + r
        };
        let mut prev = flux_at(0, &self.fplus, &self.fminus);
        let first = prev;
        for i in 0..n {
            let next = flux_at(i + 1, &self.fplus, &self.fminus);
            out[i] = -(next - prev) / self.dx;
            prev = next;
        }
        prev - first
    }
}

/// Runs WENO5 + SSP-RK3 to `T`, saving 101 snapshots.
pub fn solve_reference<S: Scalar>(problem: &BenchmarkProblem<S>, n_cells: usize, cfl: S) -> Result<ReferenceSolution<S>> {
    if problem.dim() != 1 {
        return Err(Error::Unsupported("finite-volume reference is 1D only".into()));
    }
    if n_cells < 16 {
        return Err(Error::Parameter(format!("need at least 16 cells, got {n_cells}")));
    }
    if !(cfl > S::zero() && cfl <= S::of(0.5)) {
        return Err(Error::Parameter(format!("cfl must be in (0, 0.5], got {cfl}")));
    }
    let (lo, hi) = (problem.lo[0], problem.hi[0]);
    let dx = (hi - lo) / S::of(n_cells as f64);
    let (dmin, dmax) = problem.data_range;
    let alpha = problem.flux.max_wave_speed(dmin, dmax);
    if !(alpha > S::zero()) {
        return Err(Error::Solver("degenerate flux: max |f'| is zero on the data range".into()));
    }
    let blowup = S::of(10.0) * dmin.abs().max(dmax.abs()).max(dmax - dmin);

    // initial cell averages by a 16-point midpoint rule
    let sub = 16;
    let mut u: Vec<S> = (0..n_cells)
        .map(|i| {
            let mut acc = S::zero();
            for k in 0..sub {
                let x = lo + dx * (S::of(i as f64) + S::of((k as f64 + 0.5) / sub as f64));
                acc += (problem.u0)(&[x, S::zero()]);
            }
            acc / S::of(sub as f64)
        })
        .collect();

    let mut solver = Solver {
        problem,
        n: n_cells,
        dx,
        alpha,
        ext: vec![S::zero(); n_cells + 6],
        fplus: vec![S::zero(); n_cells + 6],
        fminus: vec![S::zero(); n_cells + 6],
    };
    let n_out = 100;
    let t_final = problem.t_final;
    let dt_max = cfl * dx / alpha;
    let mut snapshots = vec![FvState {
        time: S::zero(),
        values: u.clone(),
    }];
    let mut t = S::zero();
    let mut outflow = S::zero();
    let mut l = vec![S::zero(); n_cells];
    let mut u1 = vec![S::zero(); n_cells];
    let mut u2 = vec![S::zero(); n_cells];
    let (third, two_thirds, quarter, three_quarters) = (S::of(1.0 / 3.0), S::of(2.0 / 3.0), S::of(0.25), S::of(0.75));
    for k in 1..=n_out {
        let t_next = t_final * S::of(k as f64 / n_out as f64);
        while t < t_next {
            let dt = dt_max.min(t_next - t);
            let b0 = solver.rhs(&u, t, &mut l);
            for i in 0..n_cells {
                u1[i] = u[i] + dt * l[i];
            }
            let b1 = solver.rhs(&u1, t + dt, &mut l);
            for i in 0..n_cells {
                u2[i] = three_quarters * u[i] + quarter * (u1[i] + dt * l[i]);
            }
            let b2 = solver.rhs(&u2, t + dt * S::of(0.5), &mut l);
            for i in 0..n_cells {
                u[i] = third * u[i] + two_thirds * (u2[i] + dt * l[i]);
            }
            outflow += dt * (b0 / S::of(6.0) + b1 / S::of(6.0) + b2 * two_thirds);
            t = if t_next - t <= dt_max { t_next } else { t + dt };
            let worst = u.iter().fold(S::zero(), |m, v| m.max(v.abs()));
            if !worst.is_finite() || worst > blowup {
                return Err(Error::Instability {
                    time: t.as_f64(),
                    max_abs: worst.as_f64(),
                });
            }
        }
        snapshots.push(FvState {
            time: t_next,
            values: u.clone(),
        });
    }
    Ok(ReferenceSolution {
        lo,
        hi,
        dx,
        snapshots,
        boundary_outflow: outflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_examples() {
        let m = make_benchmark::<f64>("moving_shock").unwrap();
        assert_eq!(exact_solution(&m, &[0.2, 0.3]).unwrap(), 2.0);
        assert_eq!(exact_solution(&m, &[0.3, 0.2]).unwrap(), 0.0);
        let r = make_benchmark::<f64>("rarefaction").unwrap();
        assert!((exact_solution(&r, &[0.1, 0.4]).unwrap() - 0.25).abs() < 1e-15);
        let two = make_benchmark::<f64>("two_shock").unwrap();
        assert_eq!(exact_solution(&two, &[0.5, 0.4]).unwrap(), -1.6);
        assert_eq!(exact_solution(&two, &[0.37, 0.4]).unwrap(), 0.8);
        let c = make_benchmark::<f64>("cubic").unwrap();
        assert!(matches!(exact_solution(&c, &[0.0, 0.1]), Err(Error::Unsupported(_))));
        assert!(matches!(make_benchmark::<f64>("euler"), Err(Error::UnknownBenchmark(_))));
    }

    #[test]
    fn exact_matches_initial_data() {
        for name in BENCHMARK_NAMES {
            let p = make_benchmark::<f64>(name).unwrap();
            let Some(exact) = &p.exact else { continue };
            for k in 0..1000 {
                let s = (k as f64 + 0.5) / 1000.0;
                let mut z: Vec<f64> = p.lo.iter().zip(&p.hi).map(|(a, b)| a + (b - a) * s).collect();
                if p.dim() == 2 {
                    z[1] = p.lo[1] + (p.hi[1] - p.lo[1]) * ((k * 37 % 1000) as f64 / 1000.0);
                }
                z.push(0.0);
                assert!((exact(&z) - (p.u0)(&z)).abs() <= 1e-12, "{name} at {z:?}");
            }
        }
    }

    #[test]
    fn weno_constant_and_linear() {
        assert_eq!(weno5_reconstruct([3.0f64; 5]), 3.0);
        let v = weno5_reconstruct([0.0f64, 1.0, 2.0, 3.0, 4.0]);
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn weno_fifth_order_on_smooth_data() {
        // cell averages of sin(x) on cells of width h centred at 0, h, ..
        let err = |h: f64| {
            let avg = |c: f64| ((c - h / 2.0).cos() - (c + h / 2.0).cos()) / h;
            let mut worst = 0.0f64;
            for k in 0..20 {
                let x0 = 0.3 + 0.1 * k as f64;
                let v = [-2.0, -1.0, 0.0, 1.0, 2.0].map(|o| avg(x0 + o * h));
                worst = worst.max((weno5_reconstruct(v) - (x0 + h / 2.0).sin()).abs());
            }
            worst
        };
        let (e1, e2) = (err(0.02), err(0.01));
        let order = (e1 / e2).log2();
        assert!(order >= 4.5, "order {order}");
    }

    #[test]
    fn standing_shock_stays_put() {
        let p = make_benchmark::<f64>("standing_shock").unwrap();
        let sol = solve_reference(&p, 256, 0.4).unwrap();
        let last = sol.snapshots.last().unwrap();
        let centers = sol.centers();
        let l1: f64 = centers
            .iter()
            .zip(&last.values)
            .map(|(x, v)| (v - if *x <= 0.0 { 1.0 } else { -1.0 }).abs() * sol.dx)
            .sum();
        assert!(l1 <= 4.0 * sol.dx, "{l1}");
        assert_eq!(sol.snapshots.len(), 101);
    }

    #[test]
    fn conservation_with_boundary_flux() {
        for name in ["moving_shock", "rarefaction", "sine_burgers"] {
            let p = make_benchmark::<f64>(name).unwrap();
            let sol = solve_reference(&p, 128, 0.4).unwrap();
            let drift = sol.mass(100) - sol.mass(0) + sol.boundary_outflow;
            assert!(drift.abs() <= 1e-8, "{name}: {drift}");
        }
    }

    #[test]
    fn riemann_data_stays_bounded() {
        for name in ["standing_shock", "moving_shock", "rarefaction"] {
            let p = make_benchmark::<f64>(name).unwrap();
            let (lo, hi) = p.data_range;
            let pad = 0.05 * (hi - lo);
            let sol = solve_reference(&p, 256, 0.4).unwrap();
            for s in &sol.snapshots {
                assert!(s.values.iter().all(|&v| v >= lo - pad && v <= hi + pad), "{name}");
            }
        }
    }

    #[test]
    fn argument_checks() {
        let p = make_benchmark::<f64>("standing_shock").unwrap();
        assert!(solve_reference(&p, 8, 0.4).is_err());
        assert!(solve_reference(&p, 64, 0.9).is_err());
        let two_d = make_benchmark::<f64>("burgers2d").unwrap();
        assert!(matches!(solve_reference(&two_d, 64, 0.4), Err(Error::Unsupported(_))));
        let mut flat = p.clone();
        flat.data_range = (0.0, 0.0);
        assert!(matches!(solve_reference(&flat, 64, 0.4), Err(Error::Solver(_))));
    }

    #[test]
    fn eval_is_piecewise_constant_nearest_in_time() {
        let p = make_benchmark::<f64>("rarefaction").unwrap();
        let sol = solve_reference(&p, 64, 0.4).unwrap();
        let snap = sol.nearest_snapshot(0.2514);
        assert!((snap.time - 0.25).abs() < 1e-12);
        assert_eq!(sol.eval(-1.0, 0.5), sol.snapshots[100].values[0]);
        assert_eq!(sol.eval(1.0, 0.5), sol.snapshots[100].values[63]);
        assert_eq!(sol.eval(sol.dx * 0.5, 0.5), sol.snapshots[100].values[32]);
    }
}
