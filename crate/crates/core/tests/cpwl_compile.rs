use entropy_net::cpwl::{
    build_shock_competitor, compile_cpwl_to_net, competitor_grid, competitor_loss, halton_points, hat_minmax_expr,
    lattice_expr, CpwlFunction, SimplexMesh,
};
use entropy_net::dpwp::PerturbationConfig;
use entropy_net::draws::DrawKey;
use entropy_net::loss::LossContext;
use entropy_net::reference::make_benchmark;
use proptest::prelude::*;

#[test]
fn hat_compiles_within_tolerance() {
    let mesh = SimplexMesh::new(1, vec![0.0, 0.5, 1.0], vec![0, 1, 1, 2]).unwrap();
    let hat = CpwlFunction::hat(&mesh, 1).unwrap();
    let (net, report) = compile_cpwl_to_net(&hat, 1e-3, 4.0f64).unwrap();
    let last = report.trace.last().unwrap();
    assert!(last.sup_error <= 1e-3);
    for w in report.trace.windows(2) {
        assert!(w[1].w11_error <= w[0].w11_error, "{:?}", report.trace);
    }
    for k in 0..=100 {
        let x = k as f64 / 100.0;
        let raw = net.raw(&[x]).unwrap();
        assert!(raw.abs() < 2.0);
    }
}

#[test]
fn partition_of_unity() {
    let mesh = SimplexMesh::criss_cross(&[0.0, 0.0], &[1.0, 1.0], 3, 2).unwrap();
    let exprs: Vec<_> = (0..mesh.n_vertices()).map(|v| hat_minmax_expr(&mesh, v).unwrap()).collect();
    for z in halton_points(&[0.0, 0.0], &[1.0, 1.0], 1000).chunks(2) {
        let sum: f64 = exprs.iter().map(|e| e.eval(z)).sum();
        assert!((sum - 1.0).abs() <= 1e-12, "{sum}");
    }
}

#[test]
fn competitor_initial_mismatch_closed_form() {
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let h = 0.25;
    let f = build_shock_competitor(&p, h).unwrap();
    let n = 200_000;
    let dx = 2.0 / n as f64;
    let l1: f64 = (0..n)
        .map(|i| {
            let x = -1.0 + (i as f64 + 0.5) * dx;
            (f.eval(&[x, 0.0]).unwrap() - (p.u0)(&[x, 0.0])).abs() * dx
        })
        .sum();
    assert!((l1 - h * h / 2.0).abs() <= 1e-6, "{l1}");
}

#[test]
fn competitor_loss_decays_linearly() {
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let cfg = PerturbationConfig::default();
    let hs = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let losses: Vec<f64> = hs
        .iter()
        .map(|&h| competitor_loss(&p, &build_shock_competitor(&p, h).unwrap(), h, &cfg).unwrap().total)
        .collect();
    let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 4.0, ly.iter().sum::<f64>() / 4.0);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((0.8..=1.2).contains(&slope), "slope {slope}, losses {losses:?}");
}

#[test]
fn compiled_competitor_loss_close() {
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let h = 1.0 / 32.0;
    let f = build_shock_competitor(&p, h).unwrap();
    let (net, _) = compile_cpwl_to_net(&f, 1e-4, p.default_clip()).unwrap();
    let cfg = PerturbationConfig::default();
    let l_hat = competitor_loss(&p, &f, h, &cfg).unwrap().total;
    let grid = competitor_grid(&p, h).unwrap();
    let ctx = LossContext::new(&grid, p.flux.clone(), &p.u0, Some(&p.boundary)).unwrap();
    let (bd, _) = ctx.total_loss(&net, &cfg, DrawKey::new(cfg.seed, 0, 0)).unwrap();
    assert!(bd.total - l_hat <= 0.1, "{} vs {}", bd.total, l_hat);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lattice_reproduces_interpolant(values in proptest::collection::vec(-2.0f64..2.0, 16), seed in 0usize..1000) {
        let mesh = SimplexMesh::structured(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        let f = CpwlFunction::new(mesh, values).unwrap();
        let e = lattice_expr(&f);
        for z in halton_points(&[0.0, 0.0], &[1.0, 1.0], 200 + seed).chunks(2).skip(seed) {
            prop_assert!((e.eval(z) - f.eval(z).unwrap()).abs() <= 1e-9);
        }
    }
}
