use entropy_net::reference::{make_benchmark, solve_reference, ReferenceSolution};

/// First `x` (linearly interpolated between centres) where `u` falls through `level`.
fn crossing(sol: &ReferenceSolution<f64>, level: f64) -> f64 {
    let u = &sol.snapshots.last().unwrap().values;
    let xs = sol.centers();
    for i in 0..u.len() - 1 {
        if u[i] >= level && u[i + 1] < level {
            return xs[i] + (u[i] - level) / (u[i] - u[i + 1]) * sol.dx;
        }
    }
    panic!("no crossing of {level}");
}

fn l1_coarse_vs_fine(coarse: &ReferenceSolution<f64>, fine: &ReferenceSolution<f64>) -> f64 {
    let c = &coarse.snapshots.last().unwrap().values;
    let f = &fine.snapshots.last().unwrap().values;
    c.iter()
        .enumerate()
        .map(|(i, v)| (v - 0.5 * (f[2 * i] + f[2 * i + 1])).abs() * coarse.dx)
        .sum()
}

#[test]
fn moving_shock_front() {
    let p = make_benchmark::<f64>("moving_shock").unwrap();
    let sol = solve_reference(&p, 1024, 0.4).unwrap();
    let x = crossing(&sol, 1.0);
    assert!((x - 0.5).abs() <= 0.005, "front at {x}");
}

#[test]
fn rarefaction_l1_error() {
    let p = make_benchmark::<f64>("rarefaction").unwrap();
    let sol = solve_reference(&p, 512, 0.4).unwrap();
    let exact = p.exact.as_ref().unwrap();
    let err: f64 = sol
        .centers()
        .iter()
        .zip(&sol.snapshots[100].values)
        .map(|(x, v)| (v - exact(&[*x, 0.5])).abs() * sol.dx)
        .sum();
    assert!(err <= 2e-2, "{err}");
}

#[test]
fn cubic_trailing_shock() {
    let p = make_benchmark::<f64>("cubic").unwrap();
    let sol = solve_reference(&p, 1024, 0.4).unwrap();
    let x_s = crossing(&sol, 0.25);
    let speed = x_s / 0.5;
    assert!((speed - 0.25).abs() <= 0.02 * 0.25, "speed {speed}");
    // the fan right of the shock satisfies u^2 = x / t; extrapolate to the shock
    let u = &sol.snapshots[100].values;
    let pts: Vec<(f64, f64)> = sol
        .centers()
        .into_iter()
        .zip(u.iter().copied())
        .filter(|(x, _)| *x > x_s + 0.05 && *x < 0.45)
        .map(|(x, v)| (x, v * v))
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let state = -(my + slope * (x_s - mx)).sqrt();
    assert!((state + 0.5).abs() <= 0.02, "state {state}");
    // x = -0.5 is untouched by the waves
    let left = u[((-0.5 - sol.lo) / sol.dx) as usize];
    assert!((left - 1.0).abs() < 1e-6);
}

#[test]
fn non_convex_references_are_refinement_consistent() {
    for name in ["buckley_leverett", "sine_flux"] {
        let p = make_benchmark::<f64>(name).unwrap();
        let coarse = solve_reference(&p, 512, 0.4).unwrap();
        let fine = solve_reference(&p, 1024, 0.4).unwrap();
        let d = l1_coarse_vs_fine(&coarse, &fine);
        assert!(d <= 5e-3, "{name}: {d}");
    }
}
