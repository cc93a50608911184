//! Seeded Monte Carlo sweeps over the rollout count or horizon, with paired trials,
//! aggregation and log-log rate fits.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{estimate, Method};
use crate::linalg::spectral_norm;
use crate::model::{markov_input, mimo_preset, siso_preset, StateSpaceModel, SystemSpec};
use crate::rollout::{simulate, PredictorMode, SimConfig};

/// Gap norms at or below this are treated as zero when fitting decay rates.
pub const DEGENERATE_GAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemChoice {
    Preset(String),
    Inline(SystemSpec),
}

impl SystemChoice {
    pub fn resolve(&self) -> Result<StateSpaceModel> {
        match self {
            SystemChoice::Preset(name) => preset(name),
            SystemChoice::Inline(spec) => StateSpaceModel::try_from(spec.clone()),
        }
    }
}

pub fn preset(name: &str) -> Result<StateSpaceModel> {
    match name {
        "siso-paper" => Ok(siso_preset()),
        "mimo-paper" => Ok(mimo_preset()),
        other => Err(Error::InvalidConfig(format!(
            "unknown system preset {other:?} (expected siso-paper or mimo-paper)"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Vary the rollout count at a fixed horizon.
    N,
    /// Vary the horizon at a fixed rollout count.
    T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// The other dimension, held constant.
    pub fixed: usize,
}

impl Sweep {
    /// `(N, T)` at a sweep value.
    pub fn point(&self, value: usize) -> (usize, usize) {
        match self.axis {
            SweepAxis::N => (value, self.fixed),
            SweepAxis::T => (self.fixed, value),
        }
    }
}

fn default_estimators() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_sigma() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemChoice,
    pub sweep: Sweep,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default)]
    pub predictor_mode: PredictorMode,
    /// State dimension for Ho-Kalman extraction; defaults to that of the system.
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default = "default_sigma")]
    pub sigma_u: f64,
    #[serde(default = "default_sigma")]
    pub sigma_e: f64,
    /// Record `||G(W_hat) - G(W*)||` for each estimated weighting when wls-optimal also runs.
    #[serde(default = "default_true")]
    pub record_gaps: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::InvalidConfig("sweep values must not be empty".into()));
        }
        if self.sweep.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("sweep values must be strictly increasing".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator set must not be empty".into()));
        }
        if self.estimators.contains(&Method::Wls) {
            return Err(Error::InvalidConfig(
                "plain wls has no weighting in an experiment; use wls-optimal or wls-estimated-*".into(),
            ));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::InvalidConfig("estimator set has duplicates".into()));
        }
        for &v in &self.sweep.values {
            let (n, t) = self.sweep.point(v);
            SimConfig {
                n_rollouts: n,
                horizon: t,
                sigma_u: self.sigma_u,
                sigma_e: self.sigma_e,
                seed: 0,
            }
            .validate()?;
        }
        self.system.resolve()?;
        Ok(())
    }

    pub fn sim_config(&self, value: usize, trial: usize) -> SimConfig {
        let (n, t) = self.sweep.point(value);
        SimConfig {
            n_rollouts: n,
            horizon: t,
            sigma_u: self.sigma_u,
            sigma_e: self.sigma_e,
            seed: trial_seed(self.base_seed, value, trial),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed derived from the base seed, the sweep value and the trial index.
pub fn trial_seed(base_seed: u64, sweep_value: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ sweep_value as u64) ^ trial as u64)
}

/// Short status label for a failed trial.
pub fn status_label(err: &Error) -> &'static str {
    match err {
        Error::IllConditioned { .. } => "ill-conditioned",
        Error::RankDeficient(_) => "rank-deficient",
        Error::Extraction(_) => "extraction-failed",
        Error::Overflow { .. } => "overflow",
        Error::InvalidConfig(_) | Error::Dimension(_) => "invalid",
        _ => "error",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sweep_axis_value: usize,
    pub trial: usize,
    pub estimator: Method,
    pub relative_error: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub sweep_axis_value: usize,
    pub trial: usize,
    pub estimator: Method,
    pub gap_norm: Option<f64>,
    pub status: String,
}

#[derive(Debug)]
pub struct TrialOutcome {
    pub errors: Vec<(Method, Result<f64>)>,
    /// `||G_hat(W_hat) - G_hat(W*)||` for each estimated weighting, when wls-optimal ran.
    pub gaps: Vec<(Method, Result<f64>)>,
}

/// Simulates one dataset and runs every estimator on it.
pub fn run_trial(
    sys: &StateSpaceModel,
    cfg: &SimConfig,
    estimators: &[Method],
    mode: PredictorMode,
    n_x: Option<usize>,
    record_gaps: bool,
) -> TrialOutcome {
    let data = match simulate(sys, cfg) {
        Ok(d) => d,
        Err(e) => {
            return TrialOutcome {
                errors: estimators.iter().map(|m| (*m, Err(clone_error(&e)))).collect(),
                gaps: Vec::new(),
            };
        }
    };
    let truth = markov_input(sys, cfg.horizon).map(|g| g.to_row());
    let n_x = n_x.or(Some(sys.n_x()));
    let fits: Vec<(Method, Result<DMatrix<f64>>)> = estimators
        .iter()
        .map(|&m| (m, estimate(&data, m, Some(sys), mode, n_x).map(|r| r.g_hat)))
        .collect();
    let errors = fits
        .iter()
        .map(|(m, fit)| {
            let err = match (fit, &truth) {
                (Ok(g_hat), Ok(g)) => Ok(spectral_norm(&(g_hat - g)) / spectral_norm(g)),
                (Err(e), _) => Err(clone_error(e)),
                (_, Err(e)) => Err(clone_error(e)),
            };
            (*m, err)
        })
        .collect();
    let optimal = fits.iter().find(|(m, _)| *m == Method::WlsOptimal);
    let gaps = match optimal {
        Some((_, opt)) if record_gaps => fits
            .iter()
            .filter(|(m, _)| m.extraction().is_some())
            .map(|(m, fit)| {
                let gap = match (fit, opt) {
                    (Ok(a), Ok(b)) => Ok(spectral_norm(&(a - b))),
                    (Err(e), _) | (_, Err(e)) => Err(clone_error(e)),
                };
                (*m, gap)
            })
            .collect(),
        _ => Vec::new(),
    };
    TrialOutcome { errors, gaps }
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::IllConditioned { what, cond, limit } => Error::IllConditioned {
            what,
            cond: *cond,
            limit: *limit,
        },
        Error::RankDeficient(s) => Error::RankDeficient(s.clone()),
        Error::Extraction(s) => Error::Extraction(s.clone()),
        Error::Overflow { rollout, step } => Error::Overflow {
            rollout: *rollout,
            step: *step,
        },
        Error::Dimension(s) => Error::Dimension(s.clone()),
        other => Error::InvalidConfig(other.to_string()),
    }
}

fn status_of<T>(r: &Result<T>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => status_label(e).into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_axis_value: usize,
    pub estimator: Method,
    pub mean: Option<f64>,
    /// Sample variance (denominator `count - 1`); absent below two successful trials.
    pub variance: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    /// 95% confidence half-width of the slope.
    pub half_width: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorFit {
    pub estimator: Method,
    pub fit: Option<RateFit>,
    /// Set when every gap is numerically zero and no fit is attempted.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub gaps: Vec<GapRecord>,
    pub summary: Vec<SummaryRow>,
    pub gap_summary: Vec<SummaryRow>,
    pub rate_fits: Vec<EstimatorFit>,
    pub gap_fits: Vec<EstimatorFit>,
    pub invalid_points: Vec<usize>,
    pub failed_trials: usize,
}

impl ExperimentReport {
    pub fn summary_for(&self, estimator: Method) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|r| r.estimator == estimator).collect()
    }

    pub fn mean_at(&self, value: usize, estimator: Method) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.sweep_axis_value == value && r.estimator == estimator)
            .and_then(|r| r.mean)
    }

    pub fn rate_fit(&self, estimator: Method) -> Option<&EstimatorFit> {
        self.rate_fits.iter().find(|f| f.estimator == estimator)
    }

    pub fn gap_fit(&self, estimator: Method) -> Option<&EstimatorFit> {
        self.gap_fits.iter().find(|f| f.estimator == estimator)
    }
}

/// Mean and sample variance of the successful values.
pub fn mean_variance(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.len() > 1).then(|| values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0));
    (Some(mean), var)
}

fn summarize<'a>(
    values: &[usize],
    estimators: &[Method],
    rows: impl Iterator<Item = (usize, Method, Option<f64>)> + Clone + 'a,
) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &v in values {
        for &m in estimators {
            let at: Vec<_> = rows.clone().filter(|(pv, pm, _)| *pv == v && *pm == m).collect();
            let ok: Vec<f64> = at.iter().filter_map(|(_, _, e)| *e).collect();
            if at.is_empty() {
                continue;
            }
            let (mean, variance) = mean_variance(&ok);
            out.push(SummaryRow {
                sweep_axis_value: v,
                estimator: m,
                mean,
                variance,
                count: ok.len(),
                excluded: at.len() - ok.len(),
            });
        }
    }
    out
}

/// Least-squares fit of `ln(error)` on `ln(x)`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::InvalidConfig(format!("rate fit needs at least 4 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::InvalidConfig(format!("rate fit needs positive values, got ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let slope_std_error = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit {
        slope,
        intercept,
        slope_std_error,
        half_width: t * slope_std_error,
        points: points.len(),
    })
}

/// Rate fit of gap norms; degenerate when every gap is numerically zero.
pub fn fit_gap(estimator: Method, points: &[(f64, f64)]) -> EstimatorFit {
    if !points.is_empty() && points.iter().all(|p| p.1 <= DEGENERATE_GAP) {
        return EstimatorFit {
            estimator,
            fit: None,
            degenerate: true,
            error: Some("degenerate: all gaps are zero".into()),
        };
    }
    to_fit(estimator, fit_rate(points))
}

fn to_fit(estimator: Method, r: Result<RateFit>) -> EstimatorFit {
    match r {
        Ok(fit) => EstimatorFit {
            estimator,
            fit: Some(fit),
            degenerate: false,
            error: None,
        },
        Err(e) => EstimatorFit {
            estimator,
            fit: None,
            degenerate: false,
            error: Some(e.to_string()),
        },
    }
}

fn mean_points(summary: &[SummaryRow], estimator: Method) -> Vec<(f64, f64)> {
    summary
        .iter()
        .filter(|r| r.estimator == estimator)
        .filter_map(|r| r.mean.map(|m| (r.sweep_axis_value as f64, m)))
        .collect()
}

/// Runs every sweep point and trial. Trials run in parallel; the result is ordered by
/// `(sweep value, trial, estimator)` regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sys = cfg.system.resolve()?;
    let jobs: Vec<(usize, usize)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|&v| (0..cfg.trials).map(move |t| (v, t)))
        .collect();
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(v, t)| {
            run_trial(
                &sys,
                &cfg.sim_config(v, t),
                &cfg.estimators,
                cfg.predictor_mode,
                cfg.nx,
                cfg.record_gaps,
            )
        })
        .collect();

    let mut records = Vec::new();
    let mut gaps = Vec::new();
    for (&(v, t), out) in jobs.iter().zip(&outcomes) {
        for (m, r) in &out.errors {
            records.push(TrialRecord {
                sweep_axis_value: v,
                trial: t,
                estimator: *m,
                relative_error: r.as_ref().ok().copied(),
                status: status_of(r),
            });
        }
        for (m, r) in &out.gaps {
            gaps.push(GapRecord {
                sweep_axis_value: v,
                trial: t,
                estimator: *m,
                gap_norm: r.as_ref().ok().copied(),
                status: status_of(r),
            });
        }
    }

    let values = &cfg.sweep.values;
    let summary = summarize(
        values,
        &cfg.estimators,
        records.iter().map(|r| (r.sweep_axis_value, r.estimator, r.relative_error)),
    );
    let gap_summary = summarize(
        values,
        &cfg.estimators,
        gaps.iter().map(|r| (r.sweep_axis_value, r.estimator, r.gap_norm)),
    );
    let invalid_points = values
        .iter()
        .copied()
        .filter(|&v| records.iter().filter(|r| r.sweep_axis_value == v).all(|r| r.relative_error.is_none()))
        .collect();
    let failed_trials = records.iter().filter(|r| r.relative_error.is_none()).count();

    let n_sweep = cfg.sweep.axis == SweepAxis::N && values.len() >= 4;
    let rate_fits = if n_sweep {
        cfg.estimators
            .iter()
            .map(|&m| to_fit(m, fit_rate(&mean_points(&summary, m))))
            .collect()
    } else {
        Vec::new()
    };
    let gap_fits = if n_sweep {
        let mut methods: Vec<Method> = gaps.iter().map(|g| g.estimator).collect();
        methods.sort();
        methods.dedup();
        methods
            .into_iter()
            .map(|m| fit_gap(m, &mean_points(&gap_summary, m)))
            .collect()
    } else {
        Vec::new()
    };

    Ok(ExperimentReport {
        config: cfg.clone(),
        records,
        gaps,
        summary,
        gap_summary,
        rate_fits,
        gap_fits,
        invalid_points,
        failed_trials,
    })
}

/// Runs an N-sweep and fits the decay of `||G(W_hat) - G(W*)||` for each estimated weighting.
pub fn gap_decay(cfg: &ExperimentConfig) -> Result<Vec<EstimatorFit>> {
    if !cfg.estimators.contains(&Method::WlsOptimal) || !cfg.estimators.iter().any(|m| m.extraction().is_some()) {
        return Err(Error::InvalidConfig(
            "gap decay needs wls-optimal and at least one estimated weighting".into(),
        ));
    }
    if cfg.sweep.axis != SweepAxis::N {
        return Err(Error::InvalidConfig("gap decay needs an N sweep".into()));
    }
    let cfg = ExperimentConfig {
        record_gaps: true,
        ..cfg.clone()
    };
    let report = run_experiment(&cfg)?;
    let mut methods: Vec<Method> = cfg.estimators.iter().copied().filter(|m| m.extraction().is_some()).collect();
    methods.sort();
    Ok(methods
        .into_iter()
        .map(|m| fit_gap(m, &mean_points(&report.gap_summary, m)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub base_seed: u64,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    sweep_axis_value: usize,
    trial: usize,
    estimator: &'a str,
    relative_error: Option<f64>,
    status: &'a str,
}

#[derive(Serialize)]
struct GapRow<'a> {
    sweep_axis_value: usize,
    trial: usize,
    estimator: &'a str,
    gap_norm: Option<f64>,
    status: &'a str,
}

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    sweep_axis_value: usize,
    estimator: &'a str,
    mean: Option<f64>,
    variance: Option<f64>,
    count: usize,
    excluded: usize,
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(SummaryCsvRow {
            sweep_axis_value: r.sweep_axis_value,
            estimator: r.estimator.as_str(),
            mean: r.mean,
            variance: r.variance,
            count: r.count,
            excluded: r.excluded,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv`, `report.json` and `meta.json` (plus `gaps.csv` and
/// `gap_summary.csv` when gaps were recorded). Only `meta.json` carries timestamps.
pub fn write_outputs(report: &ExperimentReport, meta: &RunMetadata, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for r in &report.records {
        w.serialize(ResultRow {
            sweep_axis_value: r.sweep_axis_value,
            trial: r.trial,
            estimator: r.estimator.as_str(),
            relative_error: r.relative_error,
            status: &r.status,
        })?;
    }
    w.flush()?;
    write_summary_csv(&dir.join("summary.csv"), &report.summary)?;
    if !report.gaps.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("gaps.csv"))?;
        for r in &report.gaps {
            w.serialize(GapRow {
                sweep_axis_value: r.sweep_axis_value,
                trial: r.trial,
                estimator: r.estimator.as_str(),
                gap_norm: r.gap_norm,
                status: &r.status,
            })?;
        }
        w.flush()?;
        write_summary_csv(&dir.join("gap_summary.csv"), &report.gap_summary)?;
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(axis: SweepAxis, values: Vec<usize>, fixed: usize, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            system: SystemChoice::Preset("siso-paper".into()),
            sweep: Sweep { axis, values, fixed },
            trials,
            base_seed: 11,
            estimators: Method::ALL.to_vec(),
            predictor_mode: PredictorMode::Strict,
            nx: None,
            sigma_u: 1.0,
            sigma_e: 1.0,
            record_gaps: true,
        }
    }

    #[test]
    fn synthetic_rates() {
        let half: Vec<_> = [50.0, 100.0, 200.0, 400.0, 800.0].iter().map(|&n: &f64| (n, 3.0 / n.sqrt())).collect();
        let fit = fit_rate(&half).unwrap();
        assert!((fit.slope + 0.5).abs() <= 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() <= 1e-12);
        let one: Vec<_> = [50.0, 100.0, 200.0, 400.0].iter().map(|&n: &f64| (n, 2.0 / n)).collect();
        assert!((fit_rate(&one).unwrap().slope + 1.0).abs() <= 1e-12);
        assert!(fit_rate(&one[..3]).is_err());
        assert!(fit_rate(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)]).is_err());
    }

    #[test]
    fn zero_gaps_are_degenerate() {
        let pts: Vec<_> = (1..=5).map(|n| (n as f64 * 100.0, 0.0)).collect();
        let fit = fit_gap(Method::WlsEstimatedRecursive, &pts);
        assert!(fit.degenerate && fit.fit.is_none());
    }

    #[test]
    fn sample_variance() {
        let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, Some(2.5));
        assert!((v.unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_variance(&[2.0]), (Some(2.0), None));
    }

    #[test]
    fn seeds_differ_across_points_and_trials() {
        let a = trial_seed(1, 50, 0);
        assert_ne!(a, trial_seed(1, 50, 1));
        assert_ne!(a, trial_seed(1, 100, 0));
        assert_ne!(a, trial_seed(2, 50, 0));
        assert_eq!(a, trial_seed(1, 50, 0));
    }

    #[test]
    fn single_trial_report_is_the_trial() {
        let cfg = small(SweepAxis::N, vec![100], 6, 1);
        let report = run_experiment(&cfg).unwrap();
        let sys = siso_preset();
        let out = run_trial(&sys, &cfg.sim_config(100, 0), &cfg.estimators, PredictorMode::Strict, None, true);
        for (m, r) in out.errors {
            assert_eq!(report.mean_at(100, m), Some(r.unwrap()));
        }
        assert!(report.rate_fits.is_empty());
    }

    #[test]
    fn repeated_estimator_is_deterministic() {
        let sys = siso_preset();
        let cfg = SimConfig { n_rollouts: 60, horizon: 6, sigma_u: 1.0, sigma_e: 1.0, seed: 5 };
        let a = run_trial(&sys, &cfg, &[Method::Ols], PredictorMode::Strict, None, false);
        let b = run_trial(&sys, &cfg, &[Method::Ols], PredictorMode::Strict, None, false);
        assert_eq!(a.errors[0].1.as_ref().unwrap(), b.errors[0].1.as_ref().unwrap());
    }

    #[test]
    fn noise_free_trial() {
        let sys = siso_preset();
        let cfg = SimConfig { n_rollouts: 60, horizon: 6, sigma_u: 1.0, sigma_e: 0.0, seed: 5 };
        let out = run_trial(&sys, &cfg, &[Method::Ols, Method::WlsOptimal], PredictorMode::Strict, None, false);
        for (_, r) in out.errors {
            assert!(r.unwrap() <= 1e-9);
        }
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        // N = 12 < 2T - 1 predictor regressors: estimated weightings fail, OLS succeeds.
        let cfg = small(SweepAxis::N, vec![12, 40], 8, 3);
        let report = run_experiment(&cfg).unwrap();
        let row = report.summary.iter().find(|r| r.sweep_axis_value == 12 && r.estimator == Method::WlsEstimatedRecursive).unwrap();
        assert_eq!((row.count, row.excluded), (0, 3));
        assert!(report.mean_at(12, Method::Ols).is_some());
        assert!(report.invalid_points.is_empty());
        assert_eq!(report.failed_trials, 6);
        assert!(report.records.iter().any(|r| r.status == "rank-deficient"));
    }

    #[test]
    fn invalid_point_when_all_fail() {
        let mut cfg = small(SweepAxis::N, vec![5], 8, 2);
        cfg.estimators = vec![Method::WlsEstimatedRecursive];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.invalid_points, vec![5]);
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let cfg = small(SweepAxis::T, vec![6, 8], 80, 4);
        let report = run_experiment(&cfg).unwrap();
        for row in &report.summary {
            let vals: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.sweep_axis_value == row.sweep_axis_value && r.estimator == row.estimator)
                .filter_map(|r| r.relative_error)
                .collect();
            let (m, v) = mean_variance(&vals);
            assert!((m.unwrap() - row.mean.unwrap()).abs() <= 1e-12);
            assert!((v.unwrap() - row.variance.unwrap()).abs() <= 1e-12);
        }
        assert!(!report.gaps.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(SweepAxis::N, vec![50, 40], 10, 1);
        assert!(cfg.validate().is_err());
        cfg.sweep.values = vec![40, 50];
        cfg.validate().unwrap();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        cfg.trials = 1;
        cfg.system = SystemChoice::Preset("nope".into());
        assert!(cfg.validate().is_err());
        let text = r#"{"system":"mimo-paper","sweep":{"axis":"t","values":[10,15],"fixed":200},"trials":2,"base_seed":1}"#;
        let parsed = ExperimentConfig::from_json_str(text).unwrap();
        assert_eq!(parsed.estimators, Method::ALL.to_vec());
        assert!(ExperimentConfig::from_json_str(r#"{"system":"siso-paper","bogus":1}"#).is_err());
    }

    #[test]
    fn gap_decay_requires_both_estimators() {
        let mut cfg = small(SweepAxis::N, vec![50, 100, 150, 200], 6, 1);
        cfg.estimators = vec![Method::Ols, Method::WlsOptimal];
        assert!(gap_decay(&cfg).is_err());
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(SweepAxis::N, vec![60, 80], 5, 2);
        let report = run_experiment(&cfg).unwrap();
        let meta = RunMetadata {
            config: cfg.clone(),
            base_seed: cfg.base_seed,
            tool_version: "test".into(),
            started_unix_ms: 0,
            finished_unix_ms: 1,
        };
        write_outputs(&report, &meta, dir.path()).unwrap();
        for f in ["results.csv", "summary.csv", "report.json", "meta.json", "gaps.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(text.starts_with("sweep_axis_value,trial,estimator,relative_error,status\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 4);
    }
}
