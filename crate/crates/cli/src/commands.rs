use std::fs;
use std::path::{Path, PathBuf};

use markovid::bounds::{bound_report, gram_threshold, BoundInputs};
use markovid::estimators::{estimate, EstimateReport, Method};
use markovid::extraction::{extract, predictor_blocks_newest_first, ExtractionMethod};
use markovid::harness::{preset, run_experiment, unix_ms, write_outputs, ExperimentConfig, RunMetadata};
use markovid::linalg::spectral_norm;
use markovid::model::{markov_input, markov_noise, predictor_markov, to_predictor, StateSpaceModel, SystemSpec};
use markovid::rollout::{assemble_predictor, simulate, DatasetManifest, PredictorMode, RolloutDataset, SimConfig};
use markovid::estimators::predictor_ls;
use markovid::Error;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::{
    BenchmarkArgs, BoundsArgs, Command, EstimateArgs, EstimatorChoice, ExtractArgs, ExtractionChoice, ModeChoice, SimArgs,
    SimulateArgs,
};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SIMULATION: u8 = 3;
pub const EXIT_NUMERICS: u8 = 4;
pub const EXIT_EXPERIMENT: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Overflow { .. } => EXIT_SIMULATION,
            e if e.is_numerical() => EXIT_NUMERICS,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Extract(a) => cmd_extract(a),
    }
}

fn load_system(name: &str) -> CliResult<StateSpaceModel> {
    if let Ok(sys) = preset(name) {
        return Ok(sys);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::config(format!(
            "system {name:?} is neither a preset (siso-paper, mimo-paper) nor a readable file"
        )));
    }
    let text = fs::read_to_string(path)?;
    StateSpaceModel::from_json_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn mode(m: ModeChoice) -> PredictorMode {
    match m {
        ModeChoice::Strict => PredictorMode::Strict,
        ModeChoice::FullLag => PredictorMode::FullLag,
    }
}

fn extraction(m: ExtractionChoice) -> ExtractionMethod {
    match m {
        ExtractionChoice::Recursive => ExtractionMethod::Recursive,
        ExtractionChoice::HoKalman => ExtractionMethod::HoKalman,
    }
}

fn sim_config(a: &SimArgs) -> SimConfig {
    SimConfig {
        n_rollouts: a.n,
        horizon: a.t,
        sigma_u: a.sigma_u,
        sigma_e: a.sigma_e,
        seed: a.seed,
    }
}

fn echo(pairs: &[(&str, String)]) {
    println!("config:");
    for (k, v) in pairs {
        println!("  {k:<16} {v}");
    }
}

fn sim_echo(sim: &SimArgs) -> Vec<(&'static str, String)> {
    vec![
        ("system", sim.system.clone()),
        ("N", sim.n.to_string()),
        ("T", sim.t.to_string()),
        ("sigma_u", sim.sigma_u.to_string()),
        ("sigma_e", sim.sigma_e.to_string()),
        ("seed", sim.seed.to_string()),
    ]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn input_gram_lambda_min(data: &RolloutDataset) -> f64 {
    let dim = data.horizon() * data.n_u();
    let mut gram = DMatrix::zeros(dim, dim);
    for i in 0..data.n_rollouts() {
        let u = data.input_toeplitz(i);
        gram += &u * u.transpose();
    }
    gram.symmetric_eigen().eigenvalues.min()
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let mut pairs = sim_echo(&a.sim);
    pairs.push(("out", a.out.display().to_string()));
    pairs.push(("innovations", (!a.no_innovations).to_string()));
    echo(&pairs);
    let sys = load_system(&a.sim.system)?;
    let cfg = sim_config(&a.sim);
    cfg.validate()?;
    let data = simulate(&sys, &cfg)?;

    fs::create_dir_all(&a.out)?;
    let data_file = "data.csv";
    data.write_csv(fs::File::create(a.out.join(data_file))?, !a.no_innovations)?;
    let manifest = DatasetManifest {
        config: cfg,
        n_u: sys.n_u(),
        n_y: sys.n_y(),
        data_file: data_file.into(),
        includes_innovations: !a.no_innovations,
        system: Some(SystemSpec::from(sys.clone())),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let lmin = input_gram_lambda_min(&data);
    let threshold = gram_threshold(cfg.sigma_u, cfg.n_rollouts);
    println!("wrote {} rollouts to {}", data.n_rollouts(), a.out.display());
    println!("lambda_min(U U^T)      {lmin:.6}");
    println!("sigma_u^2 N / 4        {threshold:.6}");
    Ok(())
}

fn load_dataset(manifest_path: &Path) -> CliResult<(RolloutDataset, Option<StateSpaceModel>)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| CliError::config(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(dir.join(&manifest.data_file))?;
    let data = RolloutDataset::read_csv(file)?;
    let sys = manifest.system.map(StateSpaceModel::try_from).transpose()?;
    Ok((data, sys))
}

fn method_of(choice: EstimatorChoice, ex: ExtractionChoice) -> Method {
    match (choice, ex) {
        (EstimatorChoice::Ols, _) => Method::Ols,
        (EstimatorChoice::WlsOptimal, _) => Method::WlsOptimal,
        (EstimatorChoice::WlsEstimated, ExtractionChoice::Recursive) => Method::WlsEstimatedRecursive,
        (EstimatorChoice::WlsEstimated, ExtractionChoice::HoKalman) => Method::WlsEstimatedHokalman,
    }
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let method = method_of(a.method, a.extraction);
    let mut pairs = match &a.input {
        Some(p) => vec![("in", p.display().to_string())],
        None => sim_echo(&a.sim),
    };
    pairs.extend([
        ("method", method.to_string()),
        ("predictor_mode", format!("{:?}", mode(a.predictor_mode))),
        ("nx", a.nx.map_or("auto".into(), |n| n.to_string())),
        ("out", a.out.display().to_string()),
    ]);
    echo(&pairs);

    let (data, sys) = match &a.input {
        Some(p) => load_dataset(p)?,
        None => {
            let sys = load_system(&a.sim.system)?;
            let cfg = sim_config(&a.sim);
            cfg.validate()?;
            (simulate(&sys, &cfg)?, Some(sys))
        }
    };
    if method == Method::WlsOptimal && sys.is_none() {
        return Err(CliError::config("optimal weighting needs the true model; the dataset has no system spec"));
    }
    let n_x = a.nx.or(sys.as_ref().map(|s| s.n_x()));
    let mut report: EstimateReport = estimate(&data, method, sys.as_ref(), mode(a.predictor_mode), n_x)?;
    if let Some(sys) = &sys {
        report = report.with_truth(&markov_input(sys, data.horizon())?.to_row());
    }
    let path = a.out.join(format!("estimate-{method}.json"));
    write_json(&path, &report.to_json())?;

    println!("method           {method}");
    println!("N, T             {}, {}", report.n_rollouts, report.horizon);
    match (report.relative_error, report.spectral_error, report.frobenius_error) {
        (Some(r), Some(s), Some(f)) => {
            println!("relative error   {r:.6e}");
            println!("spectral error   {s:.6e}");
            println!("frobenius error  {f:.6e}");
        }
        _ => println!("relative error   unknown (no system spec)"),
    }
    println!("wall time        {:.2} ms", report.wall_time_ms);
    println!("report           {}", path.display());
    Ok(())
}

fn cmd_bounds(a: BoundsArgs) -> CliResult<()> {
    let h_norm = match a.h_norm {
        Some(h) => h,
        None => {
            let sys = load_system(&a.system)?;
            if sys.n_u() != a.nu || sys.n_y() != a.ny {
                return Err(CliError::config(format!(
                    "system {} has n_u={}, n_y={}; pass --h-norm or matching --nu/--ny",
                    a.system,
                    sys.n_u(),
                    sys.n_y()
                )));
            }
            spectral_norm(&markov_noise(&sys, a.t.max(1))?.to_row())
        }
    };
    let inp = BoundInputs {
        n_u: a.nu,
        n_y: a.ny,
        horizon: a.t,
        delta: a.delta,
        h_norm,
        sigma_u: a.sigma_u,
        sigma_e: a.sigma_e,
        n_rollouts: a.n,
    };
    echo(&[
        ("n_u", a.nu.to_string()),
        ("n_y", a.ny.to_string()),
        ("T", a.t.to_string()),
        ("delta", a.delta.to_string()),
        ("||H||", format!("{h_norm:.6}")),
        ("N", a.n.to_string()),
        ("sigma_u", a.sigma_u.to_string()),
        ("sigma_e", a.sigma_e.to_string()),
    ]);
    let r = bound_report(&inp)?;
    let fmt_bound = |b: Option<f64>| b.map_or("infeasible (N < N_min)".to_string(), |v| format!("{v:.6}"));
    println!("{:<10} {:>14} {:>14} {:>10}  bound", "estimator", "N_min", "C", "feasible");
    println!("{:<10} {:>14.4} {:>14.4} {:>10}  {}", "ols", r.n_min_ols, r.c_ols, r.feasible_ols, fmt_bound(r.bound_ols));
    println!("{:<10} {:>14.4} {:>14.4} {:>10}  {}", "wls", r.n_min_wls, r.c_wls, r.feasible_wls, fmt_bound(r.bound_wls));
    if let Some(dir) = &a.out {
        write_json(&dir.join("bounds.json"), &r)?;
    }
    Ok(())
}

fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &BenchmarkArgs) -> CliResult<()> {
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(k) = a.points {
        cfg.sweep.values.truncate(k);
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if let Some(list) = &a.estimators {
        cfg.estimators = list.iter().map(|s| s.parse()).collect::<markovid::Result<_>>()?;
    }
    if let Some(m) = a.predictor_mode {
        cfg.predictor_mode = mode(m);
    }
    if let Some(v) = a.sigma_u {
        cfg.sigma_u = v;
    }
    if let Some(v) = a.sigma_e {
        cfg.sigma_e = v;
    }
    if a.nx.is_some() {
        cfg.nx = a.nx;
    }
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> CliResult<()> {
    let mut cfg = load_experiment(&a.config)?;
    apply_overrides(&mut cfg, &a)?;
    println!("config ({}):", a.config.display());
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    println!("out: {}", a.out.display());
    cfg.validate()?;

    let started = unix_ms();
    let report = run_experiment(&cfg)?;
    let meta = RunMetadata {
        config: cfg.clone(),
        base_seed: cfg.base_seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    write_outputs(&report, &meta, &a.out)?;

    let axis = match cfg.sweep.axis {
        markovid::harness::SweepAxis::N => "N",
        markovid::harness::SweepAxis::T => "T",
    };
    println!("{axis:>6} {:<26} {:>12} {:>12} {:>6} {:>8}", "estimator", "mean", "variance", "count", "excluded");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for r in &report.summary {
        println!(
            "{:>6} {:<26} {:>12} {:>12} {:>6} {:>8}",
            r.sweep_axis_value,
            r.estimator.as_str(),
            opt(r.mean),
            opt(r.variance),
            r.count,
            r.excluded
        );
    }
    for (label, fits) in [("error", &report.rate_fits), ("gap", &report.gap_fits)] {
        for f in fits {
            match (&f.fit, &f.error) {
                (Some(fit), _) => println!(
                    "{label} slope {:<26} {:.4} ± {:.4}",
                    f.estimator.as_str(),
                    fit.slope,
                    fit.half_width
                ),
                (None, Some(msg)) => println!("{label} slope {:<26} none ({msg})", f.estimator.as_str()),
                (None, None) => {}
            }
        }
    }
    println!("failed trials: {}", report.failed_trials);
    println!("artifacts: {}", a.out.display());
    if !report.invalid_points.is_empty() {
        return Err(CliError {
            code: EXIT_EXPERIMENT,
            message: format!("every trial failed at sweep values {:?}", report.invalid_points),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct ExtractOutput {
    method: ExtractionMethod,
    source: String,
    blocks: Vec<Vec<Vec<f64>>>,
    max_deviation: Option<f64>,
    diagnostics: markovid::extraction::ExtractionDiagnostics,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_extract(a: ExtractArgs) -> CliResult<()> {
    let method = extraction(a.method);
    let source = a
        .input
        .as_ref()
        .map_or_else(|| format!("exact predictor parameters of {}", a.system), |p| p.display().to_string());
    echo(&[
        ("source", source.clone()),
        ("method", format!("{method:?}")),
        ("count", a.count.to_string()),
        ("nx", a.nx.map_or("auto".into(), |n| n.to_string())),
        ("out", a.out.display().to_string()),
    ]);

    let (pred, sys): (Vec<DMatrix<f64>>, Option<StateSpaceModel>) = match &a.input {
        Some(p) => {
            let (data, sys) = load_dataset(p)?;
            let reg = assemble_predictor(&data, mode(a.predictor_mode))?;
            let (_, h_k) = predictor_ls(&reg)?;
            (predictor_blocks_newest_first(&h_k), sys)
        }
        None => {
            let sys = load_system(&a.system)?;
            let (_, h_k) = predictor_markov(&to_predictor(&sys), a.count + 1)?;
            (predictor_blocks_newest_first(&h_k), Some(sys))
        }
    };
    let count = pred.len();
    let n_x = a.nx.or(sys.as_ref().map(|s| s.n_x()));
    let (blocks, diagnostics) = extract(method, &pred, n_x, count)?;
    let max_deviation = match &sys {
        Some(s) => {
            let truth = markov_noise(s, count + 1)?;
            Some(
                blocks
                    .iter()
                    .zip(&truth.blocks()[1..])
                    .map(|(b, t)| (b - t).norm() / t.norm().max(1.0))
                    .fold(0.0, f64::max),
            )
        }
        None => None,
    };
    println!("{:>4}  C A^i K", "i");
    for (i, b) in blocks.iter().enumerate() {
        let entries: Vec<String> = b.iter().map(|v| format!("{v:.6}")).collect();
        println!("{i:>4}  [{}]", entries.join(", "));
    }
    if let Some(d) = max_deviation {
        println!("max deviation from truth  {d:.3e}");
    }
    let out = ExtractOutput {
        method,
        source,
        blocks: blocks.iter().map(rows).collect(),
        max_deviation,
        diagnostics,
    };
    let path: PathBuf = a.out.join("extract.json");
    write_json(&path, &out)?;
    println!("report  {}", path.display());
    Ok(())
}
