//! Command-line front end: training, evaluation, reference solutions,
//! convergence studies and compiler checks, each writing CSV/JSON artifacts.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use entropy_net::cpwl::{build_shock_competitor, compile_cpwl_to_net, competitor_grid, competitor_loss, CpwlFunction, SimplexMesh};
use entropy_net::dpwp::PerturbationConfig;
use entropy_net::draws::DrawKey;
use entropy_net::loss::LossContext;
use entropy_net::metrics::{
    fit_slope, reference_field, relative_errors_from_values, ConvergenceRow, ConvergenceTable, ErrorReport, MeshLevel,
};
use entropy_net::network::{Checkpoint, ClippedTanhNet};
use entropy_net::reference::{make_benchmark, solve_reference};
use entropy_net::train::{eval_grid, train_with, StitchedNet, TrainConfig, TrainResult};
use schemars::JsonSchema;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub mod artifacts;
pub mod plot;

use artifacts::{num, opt, prepare_dir, write_json, Csv};

pub const THREADS_ENV: &str = "ENTROPY_NET_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<entropy_net::Error> for CliError {
    fn from(e: entropy_net::Error) -> Self {
        use entropy_net::Error as E;
        match e {
            E::Parameter(_) | E::UnknownBenchmark(_) | E::UnknownFlux(_) | E::Grid(_) | E::Json(_) => {
                Self::Validation(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "entropy-net", version, about = "Entropy-residual training of clipped tanh networks")]
struct Cli {
    /// Worker threads (overridden by ENTROPY_NET_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a benchmark.
    Train(TrainArgs),
    /// Recompute the error report of a trained model.
    Eval(EvalArgs),
    /// Write reference solution snapshots.
    Reference(ReferenceArgs),
    /// Train at several mesh levels and fit the error slope.
    Convergence(ConvergenceArgs),
    /// Check the piecewise linear competitor and its network compilation.
    CpwlVerify(CpwlArgs),
    /// Print the JSON schema of a config file.
    Schema(SchemaArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
    /// On a diverging run, retry this many times with the next seed.
    #[arg(long, default_value_t = 0)]
    retries: u32,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// `model.json` written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Evaluation grid refinement relative to the training grid.
    #[arg(long, default_value_t = 4)]
    refine: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReferenceArgs {
    #[arg(long)]
    benchmark: String,
    #[arg(long, default_value_t = 4096)]
    cells: usize,
    #[arg(long, default_value_t = 0.4)]
    cfl: f64,
    /// Output times (nearest stored snapshot); defaults to the final time.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Sample the closed-form solution instead of running WENO.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    plot: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum CpwlCase {
    StandingShock,
    MovingShock,
    Hat,
}

#[derive(Args, Debug)]
struct CpwlArgs {
    #[arg(long, value_enum)]
    case: CpwlCase,
    /// Mesh sizes (repeatable or comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0.0625,0.03125,0.015625")]
    h: Vec<f64>,
    /// Sup-norm tolerance of the compiled network.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Skip the network compilation.
    #[arg(long)]
    no_compile: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemaKind {
    Train,
    Convergence,
}

#[derive(Args, Debug)]
struct SchemaArgs {
    #[arg(long, value_enum, default_value = "train")]
    kind: SchemaKind,
}

/// Config file of the `convergence` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub train: TrainConfig,
    pub levels: Vec<MeshLevel>,
}

/// Written next to the per-strip checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub config: TrainConfig,
    pub strips: Vec<StripEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripEntry {
    pub index: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub checkpoint: String,
}

pub fn schema_json(kind: &str) -> Option<String> {
    let schema = match kind {
        "train" => schemars::schema_for!(TrainConfig),
        "convergence" => schemars::schema_for!(ConvergenceConfig),
        _ => return None,
    };
    Some(serde_json::to_string_pretty(&schema).unwrap() + "\n")
}

/// Reads a JSON config, reporting the path of the offending field.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Validation(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => match flag {
            Some(0) => Err(CliError::Validation("--threads must be positive".into())),
            other => Ok(other),
        },
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = thread_count(cli.threads).and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reference(a) => cmd_reference(a),
        Command::Convergence(a) => cmd_convergence(a),
        Command::CpwlVerify(a) => cmd_cpwl(a),
        Command::Schema(a) => {
            let kind = match a.kind {
                SchemaKind::Train => "train",
                SchemaKind::Convergence => "convergence",
            };
            print!("{}", schema_json(kind).unwrap());
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let problem = make_benchmark::<f64>(&cfg.benchmark)?;
    cfg.validate_for(&problem)?;
    let out = prepare_dir(&a.out)?;
    let mut attempt = 0;
    let result = loop {
        let every = (cfg.n_train / 10).max(1);
        let quiet = a.quiet;
        let res = train_with::<f64>(&cfg, &mut |p| {
            if !quiet && (p.iteration % every == 0 || p.iteration == 1) {
                eprintln!(
                    "strip {} iter {}/{} loss {:.6e} (j_ent {:.3e}, reg {:.3e}, ini {:.3e}, bnd {:.3e})",
                    p.strip,
                    p.iteration,
                    p.n_train,
                    p.breakdown.total,
                    p.breakdown.j_ent_star,
                    p.breakdown.l_reg,
                    p.breakdown.l_ibc_initial,
                    p.breakdown.l_ibc_boundary
                );
            }
        });
        match res {
            Err(entropy_net::Error::NonFiniteLoss { .. }) if attempt < a.retries => {
                attempt += 1;
                eprintln!("diverged with seed {}; retrying with seed {}", cfg.seed, cfg.seed + 1);
                cfg.seed += 1;
            }
            other => break other?,
        }
    };
    write_training(&out, &cfg, &result, a.plot)?;
    let report = result.metrics.as_ref().expect("train fills the metrics");
    eprintln!(
        "done in {:.1?}: E_r(T) = {:.4e}, E_r = {:.4e}",
        result.wall_time, report.e_r_final, report.e_r_spacetime
    );
    Ok(())
}

fn write_training(out: &Path, cfg: &TrainConfig, res: &TrainResult<f64>, plot: bool) -> Result<(), CliError> {
    let mut hist = Csv::new(
        cfg,
        &[
            "strip",
            "iteration",
            "total",
            "j_ent_star",
            "l_reg",
            "l_ibc_initial",
            "l_ibc_boundary",
            "argmax_index",
            "argmax_norm",
        ],
    )?;
    let mut strips = Vec::new();
    for s in &res.strips {
        for (i, b) in s.history.iter().enumerate() {
            hist.row(&[
                s.index.to_string(),
                (i + 1).to_string(),
                num(b.total),
                num(b.j_ent_star),
                num(b.l_reg),
                num(b.l_ibc_initial),
                num(b.l_ibc_boundary),
                b.argmax_index.to_string(),
                num(b.argmax_norm),
            ]);
        }
        let name = format!("checkpoint_strip{}.json", s.index);
        write_json(&out.join(&name), &s.net.to_checkpoint())?;
        strips.push(StripEntry {
            index: s.index,
            t_lo: s.t_lo,
            t_hi: s.t_hi,
            best_iteration: s.best_iteration,
            best_loss: s.best_loss,
            checkpoint: name,
        });
    }
    hist.write(&out.join("history.csv"))?;
    write_json(
        &out.join("model.json"),
        &ModelManifest {
            config: cfg.clone(),
            strips,
        },
    )?;
    if let Some(report) = &res.metrics {
        write_json(&out.join("report.json"), report)?;
    }
    write_profile(out, cfg, &res.evaluator(), plot)
}

/// Final-time profile of the model next to the reference (1D only).
fn write_profile(out: &Path, cfg: &TrainConfig, model: &StitchedNet<f64>, plot: bool) -> Result<(), CliError> {
    let problem = make_benchmark::<f64>(&cfg.benchmark)?;
    if problem.dim() != 1 {
        return Ok(());
    }
    let reference = reference_field(&problem)?;
    let n = cfg.n_cells_x[0] * 4;
    let mut pts = Vec::with_capacity(2 * (n + 1));
    for i in 0..=n {
        pts.extend([problem.lo[0] + (problem.hi[0] - problem.lo[0]) * i as f64 / n as f64, problem.t_final]);
    }
    let u = model.eval_batch(&pts)?;
    let mut csv = Csv::new(cfg, &["x", "u_net", "u_ref"])?;
    let mut net_line = Vec::new();
    let mut ref_line = Vec::new();
    for (i, z) in pts.chunks(2).enumerate() {
        let r = reference.eval(z);
        csv.row(&[num(z[0]), num(u[i]), num(r)]);
        net_line.push((z[0], u[i]));
        ref_line.push((z[0], r));
    }
    csv.write(&out.join("profile.csv"))?;
    if plot {
        plot::render(
            &out.join("profile.png"),
            &[
                plot::Series {
                    points: &ref_line,
                    markers: false,
                },
                plot::Series {
                    points: &net_line,
                    markers: false,
                },
            ],
            false,
        )?;
    }
    Ok(())
}

/// Loads the stitched model described by a manifest.
pub fn load_model(path: &Path) -> Result<(ModelManifest, StitchedNet<f64>), CliError> {
    let manifest: ModelManifest = load_config(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut strips = Vec::new();
    for s in &manifest.strips {
        let ck: Checkpoint = load_config(&dir.join(&s.checkpoint))?;
        strips.push((s.t_lo, ClippedTanhNet::from_checkpoint(&ck)?));
    }
    Ok((manifest, StitchedNet::new(strips)?))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if a.refine == 0 {
        return Err(CliError::Validation("--refine must be positive".into()));
    }
    let (manifest, model) = load_model(&a.model)?;
    let problem = make_benchmark::<f64>(&manifest.config.benchmark)?;
    let grid = eval_grid(&manifest.config, &problem, a.refine)?;
    let values = model.eval_batch(&grid.node_points())?;
    let report: ErrorReport = relative_errors_from_values(&values, &reference_field(&problem)?, &grid)?;
    let out = match a.out {
        Some(d) => prepare_dir(&d)?,
        None => a.model.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    write_json(&out.join("eval_report.json"), &report)?;
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}

#[derive(Serialize)]
struct ReferenceRecord<'a> {
    benchmark: &'a str,
    cells: usize,
    cfl: f64,
    times: &'a [f64],
    source: &'a str,
}

fn cmd_reference(a: ReferenceArgs) -> Result<(), CliError> {
    let problem = make_benchmark::<f64>(&a.benchmark)?;
    if a.cells < 16 {
        return Err(CliError::Validation("--cells must be at least 16".into()));
    }
    let times = if a.times.is_empty() { vec![problem.t_final] } else { a.times.clone() };
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && **t <= problem.t_final)) {
        return Err(CliError::Validation(format!("time {t} outside [0, {}]", problem.t_final)));
    }
    let exact = a.exact || problem.dim() > 1;
    if exact && problem.exact.is_none() {
        return Err(CliError::Validation(format!("{} has no closed-form solution", problem.name)));
    }
    let record = ReferenceRecord {
        benchmark: &a.benchmark,
        cells: a.cells,
        cfl: a.cfl,
        times: &times,
        source: if exact { "exact" } else { "weno" },
    };
    let out = prepare_dir(&a.out)?;
    let d = problem.dim();
    let mut header: Vec<String> = ["x", "y"][..d].iter().map(|s| s.to_string()).collect();
    header.extend(times.iter().map(|t| format!("u_t{t}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&record, &header_refs)?;
    let mut lines: Vec<Vec<(f64, f64)>> = vec![Vec::new(); times.len()];
    if exact {
        let f = problem.exact.as_ref().unwrap();
        let centre = |k: usize, i: usize| problem.lo[k] + (problem.hi[k] - problem.lo[k]) * (i as f64 + 0.5) / a.cells as f64;
        let count = a.cells.pow(d as u32);
        for flat in 0..count {
            let idx = [flat % a.cells, flat / a.cells];
            let x: Vec<f64> = (0..d).map(|k| centre(k, idx[k])).collect();
            let mut row: Vec<String> = x.iter().map(|v| num(*v)).collect();
            for (j, &t) in times.iter().enumerate() {
                let mut z = x.clone();
                z.push(t);
                let u = f(&z);
                row.push(num(u));
                lines[j].push((x[0], u));
            }
            csv.row(&row);
        }
    } else {
        if !(a.cfl > 0.0 && a.cfl <= 0.5) {
            return Err(CliError::Validation(format!("--cfl must lie in (0, 0.5], got {}", a.cfl)));
        }
        let sol = solve_reference(&problem, a.cells, a.cfl)?;
        let snaps: Vec<_> = times.iter().map(|&t| sol.nearest_snapshot(t)).collect();
        for (i, x) in sol.centers().into_iter().enumerate() {
            let mut row = vec![num(x)];
            for (j, s) in snaps.iter().enumerate() {
                row.push(num(s.values[i]));
                lines[j].push((x, s.values[i]));
            }
            csv.row(&row);
        }
    }
    csv.write(&out.join("reference.csv"))?;
    if a.plot && d == 1 {
        let series: Vec<plot::Series> = lines
            .iter()
            .map(|l| plot::Series {
                points: l,
                markers: false,
            })
            .collect();
        plot::render(&out.join("reference.png"), &series, false)?;
    }
    Ok(())
}

fn cmd_convergence(a: ConvergenceArgs) -> Result<(), CliError> {
    let cfg: ConvergenceConfig = load_config(&a.config)?;
    if cfg.levels.len() < 2 {
        return Err(CliError::Validation("a convergence study needs at least two levels".into()));
    }
    let problem = make_benchmark::<f64>(&cfg.train.benchmark)?;
    for level in &cfg.levels {
        entropy_net::metrics::level_config(&cfg.train, level).validate_for(&problem)?;
    }
    let table: ConvergenceTable = entropy_net::metrics::convergence_study(&cfg.train, &cfg.levels)?;
    let out = prepare_dir(&a.out)?;
    let mut csv = Csv::new(&cfg, &["h", "e_r_T", "e_r", "slope_T", "slope", "error"])?;
    for r in &table.rows {
        csv.row(&[
            num(r.h),
            opt(r.e_r_final),
            opt(r.e_r_spacetime),
            opt(table.slope_final),
            opt(table.slope_spacetime),
            r.error.clone().unwrap_or_default().replace([',', '\n'], ";"),
        ]);
    }
    csv.write(&out.join("convergence.csv"))?;
    if a.plot {
        let pick = |f: fn(&ConvergenceRow) -> Option<f64>| -> Vec<(f64, f64)> {
            table.rows.iter().filter_map(|r| f(r).map(|e| (r.h, e))).collect()
        };
        let (fin, st) = (pick(|r| r.e_r_final), pick(|r| r.e_r_spacetime));
        plot::render(
            &out.join("convergence.png"),
            &[
                plot::Series {
                    points: &fin,
                    markers: true,
                },
                plot::Series {
                    points: &st,
                    markers: true,
                },
            ],
            true,
        )?;
    }
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("level h = {} failed: {}", r.h, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

#[derive(Serialize)]
struct CpwlRecord<'a> {
    case: CpwlCase,
    h: &'a [f64],
    tol: f64,
    compile: bool,
    perturbation: &'a PerturbationConfig,
}

fn cmd_cpwl(a: CpwlArgs) -> Result<(), CliError> {
    if !(a.tol > 0.0) {
        return Err(CliError::Validation("--tol must be positive".into()));
    }
    let pert = PerturbationConfig::default();
    let record = CpwlRecord {
        case: a.case,
        h: &a.h,
        tol: a.tol,
        compile: !a.no_compile,
        perturbation: &pert,
    };
    let out = prepare_dir(&a.out)?;
    let mut smoothing = Csv::new(&record, &["h", "tau", "sup_error", "w11_error"])?;
    if a.case == CpwlCase::Hat {
        let mesh = SimplexMesh::new(1, vec![0.0, 0.5, 1.0], vec![0, 1, 1, 2])?;
        let hat = CpwlFunction::hat(&mesh, 1)?;
        let (_, report) = compile_cpwl_to_net(&hat, a.tol, 4.0f64)?;
        for s in &report.trace {
            smoothing.row(&[String::new(), num(s.tau), num(s.sup_error), num(s.w11_error)]);
        }
        return smoothing.write(&out.join("smoothing.csv"));
    }
    let name = match a.case {
        CpwlCase::StandingShock => "standing_shock",
        _ => "moving_shock",
    };
    let problem = make_benchmark::<f64>(name)?;
    if let Some(h) = a.h.iter().find(|h| !(**h > 0.0 && **h < 1.0)) {
        return Err(CliError::Validation(format!("mesh size {h} outside (0, 1)")));
    }
    let mut table = Csv::new(
        &record,
        &[
            "h",
            "eps",
            "L_total",
            "j_ent_star",
            "l_reg",
            "l_ibc_initial",
            "l_ibc_boundary",
            "compiled_total",
            "tau",
            "neurons",
        ],
    )?;
    let mut points = Vec::new();
    for &h in &a.h {
        let f = build_shock_competitor(&problem, h)?;
        let bd = competitor_loss(&problem, &f, h, &pert)?;
        points.push((h, bd.total));
        let mut compiled = [String::new(), String::new(), String::new()];
        if !a.no_compile {
            let (net, report) = compile_cpwl_to_net(&f, a.tol, problem.default_clip())?;
            let grid = competitor_grid(&problem, h)?;
            let ctx = LossContext::new(&grid, problem.flux.clone(), &problem.u0, Some(&problem.boundary))?;
            let (nb, _) = ctx.total_loss(&net, &pert, DrawKey::new(pert.seed, 0, 0))?;
            compiled = [num(nb.total), num(report.tau), report.neurons.to_string()];
            for s in &report.trace {
                smoothing.row(&[num(h), num(s.tau), num(s.sup_error), num(s.w11_error)]);
            }
        }
        let [ct, tau, neurons] = compiled;
        table.row(&[
            num(h),
            num(h * h),
            num(bd.total),
            num(bd.j_ent_star),
            num(bd.l_reg),
            num(bd.l_ibc_initial),
            num(bd.l_ibc_boundary),
            ct,
            tau,
            neurons,
        ]);
    }
    table.write(&out.join("competitor.csv"))?;
    if !a.no_compile {
        smoothing.write(&out.join("smoothing.csv"))?;
    }
    if let Ok(slope) = fit_slope(&points) {
        println!("loss slope against h: {slope:.4}");
    }
    Ok(())
}
