use entropy_net::draws::DrawKey;
use entropy_net::loss::LossContext;
use entropy_net::mesh::QuadGrid;
use entropy_net::reference::make_benchmark;
use entropy_net::train::{initial_network, train_problem, train_strip, StitchedNet, TrainConfig};

fn tiny(benchmark: &str) -> TrainConfig {
    TrainConfig {
        n_train: 40,
        n_pert: 16,
        n_cells_x: vec![16],
        n_cells_t: 8,
        widths: vec![2, 8, 8, 1],
        ..TrainConfig::smoke(benchmark)
    }
}

#[test]
fn single_iteration_keeps_the_sole_iterate() {
    let cfg = TrainConfig { n_train: 1, ..tiny("standing_shock") };
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let res = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    let s = &res.strips[0];
    assert_eq!(s.history.len(), 1);
    assert_eq!(s.best_iteration, 1);
    assert_eq!(s.net, initial_network(&cfg, &p).unwrap());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let cfg = tiny("moving_shock");
    let p = make_benchmark::<f64>("moving_shock").unwrap();
    let a = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    let b = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    assert_eq!(a.strips[0].history, b.strips[0].history);
    assert_eq!(a.strips[0].net.params(), b.strips[0].net.params());
}

#[test]
fn best_snapshot_reproduces_recorded_loss() {
    let cfg = tiny("standing_shock");
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let res = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    let s = &res.strips[0];
    let grid = QuadGrid::build(&p.lo, &p.hi, p.t_final, &cfg.n_cells_x, cfg.n_cells_t).unwrap();
    let ctx = LossContext::new(&grid, p.flux.clone(), &p.u0, Some(&p.boundary)).unwrap();
    let key = DrawKey::new(cfg.seed, 0, s.best_iteration as u64);
    let (bd, _) = ctx.total_loss(&s.net, &cfg.perturbation(), key).unwrap();
    assert_eq!(bd.total, s.best_loss);
    for (i, h) in s.history.iter().enumerate() {
        assert!(h.j_ent_star >= -1e-12);
        if 10 * (i + 1) > 9 * cfg.n_train {
            assert!(s.best_loss <= h.total);
        } else {
            assert!(i + 1 != s.best_iteration);
        }
    }
}

#[test]
fn strips_hand_off_at_the_interface() {
    let cfg = TrainConfig { n_strips: 2, ..tiny("moving_shock") };
    let p = make_benchmark::<f64>("moving_shock").unwrap();
    let res = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    assert_eq!((res.strips[0].t_lo, res.strips[0].t_hi), (0.0, 0.25));
    assert_eq!((res.strips[1].t_lo, res.strips[1].t_hi), (0.25, 0.5));
    // strip 1 started from strip 0's best and matched its trace at t = 0.25
    let net0 = res.strips[0].net.clone();
    let data: entropy_net::flux::Field<f64> = std::sync::Arc::new(move |z: &[f64]| net0.forward(&[z[0], 0.25]).unwrap());
    let again = train_strip(&cfg, &p, 1, &data, res.strips[0].net.clone(), &mut |_| {}).unwrap();
    assert_eq!(again.history, res.strips[1].history);

    let stitched = res.evaluator();
    let z = [0.1, 0.25];
    assert_eq!(stitched.eval(&z).unwrap(), res.strips[1].net.forward(&z).unwrap());
    let z = [0.1, 0.2];
    assert_eq!(stitched.eval(&z).unwrap(), res.strips[0].net.forward(&z).unwrap());
    let batch = stitched.eval_batch(&[0.1, 0.2, 0.1, 0.25, -0.3, 0.5]).unwrap();
    // the batched path sums in a different order
    assert!((batch[0] - res.strips[0].net.forward(&[0.1, 0.2]).unwrap()).abs() < 1e-14);
    assert!((batch[1] - res.strips[1].net.forward(&[0.1, 0.25]).unwrap()).abs() < 1e-14);
    assert!(StitchedNet::<f64>::new(vec![]).is_err());
}

#[test]
fn single_strip_train_matches_train_strip() {
    let cfg = tiny("rarefaction");
    let p = make_benchmark::<f64>("rarefaction").unwrap();
    let res = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    let direct = train_strip(&cfg, &p, 0, &p.u0, initial_network(&cfg, &p).unwrap(), &mut |_| {}).unwrap();
    assert_eq!(res.strips[0].history, direct.history);
}

#[test]
fn invalid_configs_rejected() {
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    for cfg in [
        TrainConfig { widths: vec![3, 8, 1], ..tiny("standing_shock") },
        TrainConfig { n_train: 0, ..tiny("standing_shock") },
        TrainConfig { b: -1.0, ..tiny("standing_shock") },
        TrainConfig { n_cells_x: vec![4, 4], ..tiny("standing_shock") },
    ] {
        assert!(train_problem(&cfg, &p, &mut |_| {}).is_err());
    }
}

#[test]
fn smoke_training_descends() {
    let cfg = TrainConfig::smoke("standing_shock");
    let p = make_benchmark::<f64>("standing_shock").unwrap();
    let t = std::time::Instant::now();
    let res = train_problem(&cfg, &p, &mut |_| {}).unwrap();
    let s = &res.strips[0];
    eprintln!("smoke: {:?}, first {} best {}", t.elapsed(), s.history[0].total, s.best_loss);
    assert!(s.best_loss < s.history[0].total);
}
