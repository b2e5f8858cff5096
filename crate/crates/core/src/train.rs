//! Training driver: sample candidates, pick the worst one, take an Adam step,
//! and keep the best iterate from the last tenth of the run. Long horizons are
//! split into time slabs trained one after another.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dpwp::PerturbationConfig;
use crate::draws::DrawKey;
use crate::error::{Error, Result};
use crate::flux::Field;
use crate::loss::{LossBreakdown, LossContext};
use crate::mesh::QuadGrid;
use crate::metrics::{reference_field, relative_errors_from_values, ErrorReport};
use crate::network::{adam_step, AdamState, ClippedTanhNet};
use crate::reference::{make_benchmark, BenchmarkProblem};
use crate::scalar::Scalar;

fn one() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_b() -> f64 {
    5.0
}
fn default_true() -> bool {
    true
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub benchmark: String,
    /// Layer widths including the input (`d + 1`) and the scalar output.
    pub widths: Vec<usize>,
    /// Number of time slabs.
    #[serde(default = "one")]
    pub n_strips: usize,
    /// Mesh cells per spatial axis.
    pub n_cells_x: Vec<usize>,
    /// Mesh cells in time over the whole horizon, split evenly across slabs.
    pub n_cells_t: usize,
    /// Quadrature sub-intervals per mesh cell and axis.
    #[serde(default = "one")]
    pub oversample: usize,
    pub n_train: usize,
    pub n_pert: usize,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_true")]
    pub augment_constants: bool,
    #[serde(default)]
    pub shared_across_cells: bool,
    /// Seeds both the initialisation and the candidate draws.
    #[serde(default)]
    pub seed: u64,
    /// Clip level; defaults to `2 (||u0||_inf + 1)`.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl TrainConfig {
    /// Small defaults for a benchmark, mostly useful in tests.
    pub fn smoke(benchmark: &str) -> Self {
        Self {
            benchmark: benchmark.into(),
            widths: vec![2, 16, 16, 1],
            n_strips: 1,
            n_cells_x: vec![32],
            n_cells_t: 16,
            oversample: 1,
            n_train: 500,
            n_pert: 64,
            b: 5.0,
            lr: 1e-3,
            augment_constants: true,
            shared_across_cells: false,
            seed: 0,
            clip: None,
        }
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            b: self.b,
            n_pert: self.n_pert,
            augment_constants: self.augment_constants,
            shared_across_cells: self.shared_across_cells,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return bad(format!("widths must have at least two positive entries, got {:?}", self.widths));
        }
        if *self.widths.last().unwrap() != 1 {
            return bad("the output width must be 1".into());
        }
        for (name, v) in [
            ("n_strips", self.n_strips),
            ("n_cells_t", self.n_cells_t),
            ("oversample", self.oversample),
            ("n_train", self.n_train),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.n_cells_x.is_empty() || self.n_cells_x.iter().any(|&n| n == 0) {
            return bad("n_cells_x entries must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        self.perturbation().validate()
    }

    /// Checks that the config fits `problem`.
    pub fn validate_for<S: Scalar>(&self, problem: &BenchmarkProblem<S>) -> Result<()> {
        self.validate()?;
        let m = problem.dim() + 1;
        if self.widths[0] != m {
            return Err(Error::Parameter(format!(
                "{} has {} space-time inputs but widths[0] = {}",
                problem.name, m, self.widths[0]
            )));
        }
        if self.n_cells_x.len() != problem.dim() {
            return Err(Error::Parameter(format!(
                "{} needs {} spatial cell counts, got {}",
                problem.name,
                problem.dim(),
                self.n_cells_x.len()
            )));
        }
        Ok(())
    }

    /// Time cells per slab.
    pub fn n_cells_t_per_strip(&self) -> usize {
        self.n_cells_t.div_ceil(self.n_strips)
    }
}

/// Outcome of training one slab.
#[derive(Clone, Debug)]
pub struct StripResult<S> {
    pub index: usize,
    pub t_lo: S,
    pub t_hi: S,
    /// Best snapshot (parameters that produced `best_loss`).
    pub net: ClippedTanhNet<S>,
    pub history: Vec<LossBreakdown>,
    /// 1-based iteration of the best snapshot.
    pub best_iteration: usize,
    pub best_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult<S> {
    pub config: TrainConfig,
    pub strips: Vec<StripResult<S>>,
    pub wall_time: Duration,
    pub metrics: Option<ErrorReport>,
}

impl<S: Scalar> TrainResult<S> {
    pub fn evaluator(&self) -> StitchedNet<S> {
        StitchedNet {
            strips: self.strips.iter().map(|s| (s.t_lo, s.net.clone())).collect(),
        }
    }
}

/// Per-iteration progress report.
#[derive(Clone, Copy, Debug)]
pub struct Progress<'a> {
    pub strip: usize,
    pub iteration: usize,
    pub n_train: usize,
    pub breakdown: &'a LossBreakdown,
}

/// Slab networks evaluated by membership of `t`; at an interface the later
/// slab wins.
#[derive(Clone, Debug)]
pub struct StitchedNet<S> {
    strips: Vec<(S, ClippedTanhNet<S>)>,
}

impl<S: Scalar> StitchedNet<S> {
    pub fn new(strips: Vec<(S, ClippedTanhNet<S>)>) -> Result<Self> {
        if strips.is_empty() {
            return Err(Error::Parameter("no strips".into()));
        }
        Ok(Self { strips })
    }

    pub fn strip_of(&self, t: S) -> usize {
        self.strips.iter().rposition(|(lo, _)| t >= *lo).unwrap_or(0)
    }

    pub fn nets(&self) -> impl Iterator<Item = &ClippedTanhNet<S>> {
        self.strips.iter().map(|(_, n)| n)
    }

    pub fn eval(&self, z: &[S]) -> Result<S> {
        let t = *z.last().ok_or(Error::Shape { expected: 1, got: 0 })?;
        self.strips[self.strip_of(t)].1.forward(z)
    }

    /// Clipped values at `points` (flattened, `m` per point).
    pub fn eval_batch(&self, points: &[S]) -> Result<Vec<S>> {
        let m = self.strips[0].1.input_dim();
        let n = points.len() / m;
        let mut out = vec![S::zero(); n];
        for (k, (_, net)) in self.strips.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&i| self.strip_of(points[i * m + m - 1]) == k).collect();
            if idx.is_empty() {
                continue;
            }
            let pts: Vec<S> = idx.iter().flat_map(|&i| points[i * m..(i + 1) * m].iter().copied()).collect();
            let jets = net.eval_batch(&pts)?;
            for (j, &i) in idx.iter().enumerate() {
                out[i] = net.clamp(jets.raw[j]);
            }
        }
        Ok(out)
    }
}

fn strip_grid<S: Scalar>(cfg: &TrainConfig, problem: &BenchmarkProblem<S>, strip: usize) -> Result<QuadGrid<S>> {
    let dt = problem.t_final / S::of(cfg.n_strips as f64);
    let t_lo = dt * S::of(strip as f64);
    let t_hi = if strip + 1 == cfg.n_strips {
        problem.t_final
    } else {
        dt * S::of((strip + 1) as f64)
    };
    QuadGrid::build_span(
        &problem.lo,
        &problem.hi,
        t_lo,
        t_hi,
        &cfg.n_cells_x,
        cfg.n_cells_t_per_strip(),
        cfg.oversample,
    )
}

fn clip_for<S: Scalar>(cfg: &TrainConfig, problem: &BenchmarkProblem<S>) -> S {
    cfg.clip.map(S::of).unwrap_or_else(|| problem.default_clip())
}

/// Fresh network for strip 0.
pub fn initial_network<S: Scalar>(cfg: &TrainConfig, problem: &BenchmarkProblem<S>) -> Result<ClippedTanhNet<S>> {
    ClippedTanhNet::init(&cfg.widths, clip_for(cfg, problem), cfg.seed)
}

/// Trains slab `strip_index` starting from `start` with initial data
/// `initial_data` on the slab floor. Returns the best snapshot.
pub fn train_strip<S: Scalar>(
    cfg: &TrainConfig,
    problem: &BenchmarkProblem<S>,
    strip_index: usize,
    initial_data: &Field<S>,
    start: ClippedTanhNet<S>,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<StripResult<S>> {
    cfg.validate_for(problem)?;
    if strip_index >= cfg.n_strips {
        return Err(Error::Parameter(format!(
            "strip {strip_index} out of range for {} strips",
            cfg.n_strips
        )));
    }
    let grid = strip_grid(cfg, problem, strip_index)?;
    let ctx = LossContext::new(&grid, problem.flux.clone(), initial_data, Some(&problem.boundary))?;
    let pert = cfg.perturbation();
    let mut net = start;
    let mut adam = AdamState::new(net.num_params(), S::of(cfg.lr));
    let mut history = Vec::with_capacity(cfg.n_train);
    let mut best: Option<(ClippedTanhNet<S>, usize, f64)> = None;
    for i in 1..=cfg.n_train {
        let key = DrawKey::new(cfg.seed, strip_index as u64, i as u64);
        let (bd, grad) = ctx.loss_and_grad(&net, &pert, key)?;
        if !bd.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let worst = grad.iter().map(|g| g.as_f64().abs()).fold(0.0, f64::max);
            return Err(Error::NonFiniteLoss {
                strip: strip_index,
                iteration: i,
                detail: format!(
                    "breakdown {}, max |grad| = {worst}",
                    serde_json::to_string(&bd).unwrap_or_default()
                ),
            });
        }
        observer(Progress {
            strip: strip_index,
            iteration: i,
            n_train: cfg.n_train,
            breakdown: &bd,
        });
        // the snapshot is the iterate the loss was measured at, before the update
        if 10 * i > 9 * cfg.n_train && best.as_ref().map_or(true, |b| bd.total < b.2) {
            best = Some((net.clone(), i, bd.total));
        }
        history.push(bd);
        adam_step(&mut adam, &mut net, &grad)?;
    }
    let (net, best_iteration, best_loss) = best.expect("the last iteration is always eligible");
    Ok(StripResult {
        index: strip_index,
        t_lo: grid.t_lo(),
        t_hi: grid.t_hi(),
        net,
        history,
        best_iteration,
        best_loss,
    })
}

/// Initial data for the slab after `prev`: its network at the interface.
fn handoff<S: Scalar>(prev: &StripResult<S>) -> Field<S> {
    let net = prev.net.clone();
    let t = prev.t_hi;
    Arc::new(move |z: &[S]| {
        let mut p = z.to_vec();
        *p.last_mut().unwrap() = t;
        net.forward(&p).unwrap_or_else(|_| S::nan())
    })
}

/// Trains all slabs of `problem` in order. Slab `k > 0` starts from the
/// previous slab's best network and takes its values at the interface as
/// initial data.
pub fn train_problem<S: Scalar>(
    cfg: &TrainConfig,
    problem: &BenchmarkProblem<S>,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<TrainResult<S>> {
    cfg.validate_for(problem)?;
    let started = Instant::now();
    let mut strips: Vec<StripResult<S>> = Vec::with_capacity(cfg.n_strips);
    for k in 0..cfg.n_strips {
        let (data, start) = match strips.last() {
            None => (problem.u0.clone(), initial_network(cfg, problem)?),
            Some(prev) => (handoff(prev), prev.net.clone()),
        };
        strips.push(train_strip(cfg, problem, k, &data, start, observer)?);
    }
    Ok(TrainResult {
        config: cfg.clone(),
        strips,
        wall_time: started.elapsed(),
        metrics: None,
    })
}

/// Trains the benchmark named in `cfg` and measures the errors on a grid four
/// times finer than the training grid.
pub fn train<S: Scalar>(cfg: &TrainConfig) -> Result<TrainResult<S>> {
    train_with(cfg, &mut |_| {})
}

pub fn train_with<S: Scalar>(cfg: &TrainConfig, observer: &mut dyn FnMut(Progress<'_>)) -> Result<TrainResult<S>> {
    let problem = make_benchmark::<S>(&cfg.benchmark)?;
    let mut result = train_problem(cfg, &problem, observer)?;
    let reference = reference_field(&problem)?;
    let grid = eval_grid(cfg, &problem, 4)?;
    let values = result.evaluator().eval_batch(&grid.node_points())?;
    result.metrics = Some(relative_errors_from_values(&values, &reference, &grid)?);
    Ok(result)
}

/// Evaluation grid over the whole horizon, `refine` times finer than training.
pub fn eval_grid<S: Scalar>(cfg: &TrainConfig, problem: &BenchmarkProblem<S>, refine: usize) -> Result<QuadGrid<S>> {
    let nx: Vec<usize> = cfg.n_cells_x.iter().map(|n| n * refine).collect();
    let nt = cfg.n_cells_t_per_strip() * cfg.n_strips * refine;
    QuadGrid::build(&problem.lo, &problem.hi, problem.t_final, &nx, nt)
}
