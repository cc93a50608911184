//! Seeded multi-rollout simulation and the stacked regression matrices built from it.
//!
//! Every rollout starts from `x_0 = 0`. Rollout `i` draws from its own ChaCha8 stream
//! (`seed`, stream `i`), so a dataset does not depend on how rollouts are scheduled.
//! Within a rollout the draw order is time-major: at each step the `n_u` input
//! components are drawn, then the `n_y` innovation components. Standard normals are
//! always drawn and then scaled, so changing `sigma_e` leaves the inputs untouched.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hstack, vstack};
use crate::model::{block_toeplitz_upper, StateSpaceModel, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of rollouts `N`.
    pub n_rollouts: usize,
    /// Rollout length `T`.
    pub horizon: usize,
    pub sigma_u: f64,
    pub sigma_e: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts < 1 {
            return Err(Error::InvalidConfig("rollout count N must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("horizon T must be >= 1".into()));
        }
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_u must be > 0, got {}",
                self.sigma_u
            )));
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_e must be >= 0, got {}",
                self.sigma_e
            )));
        }
        Ok(())
    }
}

/// Raw signals of one rollout; column `t` holds the sample at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub innovations: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutDataset {
    n_u: usize,
    n_y: usize,
    horizon: usize,
    rollouts: Vec<Rollout>,
    config: Option<SimConfig>,
}

impl RolloutDataset {
    pub fn from_rollouts(
        n_u: usize,
        n_y: usize,
        horizon: usize,
        rollouts: Vec<Rollout>,
        config: Option<SimConfig>,
    ) -> Result<Self> {
        if rollouts.is_empty() {
            return Err(Error::InvalidConfig("dataset needs at least one rollout".into()));
        }
        for (i, r) in rollouts.iter().enumerate() {
            let bad = r.inputs.shape() != (n_u, horizon)
                || r.outputs.shape() != (n_y, horizon)
                || r.innovations.as_ref().is_some_and(|e| e.shape() != (n_y, horizon));
            if bad {
                return Err(Error::Dimension(format!("rollout {i} has inconsistent signal shapes")));
            }
        }
        Ok(Self {
            n_u,
            n_y,
            horizon,
            rollouts,
            config,
        })
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn n_rollouts(&self) -> usize {
        self.rollouts.len()
    }
    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }
    pub fn config(&self) -> Option<&SimConfig> {
        self.config.as_ref()
    }
    pub fn has_innovations(&self) -> bool {
        self.rollouts.iter().all(|r| r.innovations.is_some())
    }

    fn innovations_of(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.rollouts[i]
            .innovations
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("dataset carries no innovations".into()))
    }

    /// `U^{(i)}`: `(T n_u) x T` block upper-triangular Toeplitz, block `(r, c) = u_{c-r}`.
    pub fn input_toeplitz(&self, i: usize) -> DMatrix<f64> {
        signal_toeplitz(&self.rollouts[i].inputs)
    }

    /// `E^{(i)}`: same layout as [`Self::input_toeplitz`] built from the innovations.
    pub fn innovation_toeplitz(&self, i: usize) -> Result<DMatrix<f64>> {
        Ok(signal_toeplitz(self.innovations_of(i)?))
    }

    /// `Y = [Y^{(1)} ... Y^{(N)}]`, `n_y x (N T)`.
    pub fn stacked_outputs(&self) -> DMatrix<f64> {
        let blocks: Vec<_> = self.rollouts.iter().map(|r| r.outputs.clone()).collect();
        hstack(&blocks)
    }

    /// `U = [U^{(1)} ... U^{(N)}]`, `(T n_u) x (N T)`.
    pub fn stacked_inputs(&self) -> DMatrix<f64> {
        let blocks: Vec<_> = (0..self.n_rollouts()).map(|i| self.input_toeplitz(i)).collect();
        hstack(&blocks)
    }

    /// `E = [E^{(1)} ... E^{(N)}]`, `(T n_y) x (N T)`.
    pub fn stacked_innovation_toeplitz(&self) -> Result<DMatrix<f64>> {
        let blocks = (0..self.n_rollouts())
            .map(|i| self.innovation_toeplitz(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(hstack(&blocks))
    }

    /// Innovation row-stack `[e_0 .. e_{T-1}]` over all rollouts, `n_y x (N T)`.
    pub fn innovation_rows(&self) -> Result<DMatrix<f64>> {
        let blocks = (0..self.n_rollouts())
            .map(|i| self.innovations_of(i).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(hstack(&blocks))
    }

    /// Writes one row per `(rollout, t)`: `rollout,t,u0..,y0..[,e0..]`.
    pub fn write_csv<W: Write>(&self, writer: W, include_innovations: bool) -> Result<()> {
        if include_innovations && !self.has_innovations() {
            return Err(Error::InvalidConfig("dataset carries no innovations".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["rollout".to_string(), "t".to_string()];
        header.extend((0..self.n_u).map(|j| format!("u{j}")));
        header.extend((0..self.n_y).map(|j| format!("y{j}")));
        if include_innovations {
            header.extend((0..self.n_y).map(|j| format!("e{j}")));
        }
        w.write_record(&header)?;
        for (i, r) in self.rollouts.iter().enumerate() {
            for t in 0..self.horizon {
                let mut rec = vec![i.to_string(), t.to_string()];
                rec.extend(r.inputs.column(t).iter().map(|v| v.to_string()));
                rec.extend(r.outputs.column(t).iter().map(|v| v.to_string()));
                if include_innovations {
                    let e = r.innovations.as_ref().expect("checked above");
                    rec.extend(e.column(t).iter().map(|v| v.to_string()));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`Self::write_csv`]. Rows may come in any order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let header = rd.headers()?.clone();
        let count = |p: char| {
            header
                .iter()
                .filter(|h| h.starts_with(p) && h[1..].parse::<usize>().is_ok())
                .count()
        };
        let (n_u, n_y, n_e) = (count('u'), count('y'), count('e'));
        if header.get(0) != Some("rollout") || header.get(1) != Some("t") || n_u == 0 || n_y == 0 {
            return Err(Error::InvalidConfig(
                "dataset CSV must start with rollout,t and have u*/y* columns".into(),
            ));
        }
        if n_e != 0 && n_e != n_y {
            return Err(Error::InvalidConfig("innovation columns must match output columns".into()));
        }
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    Error::InvalidConfig(format!("bad value in data row {}, column {}", line + 1, k + 1))
                })
            };
            let i = parse(0)? as usize;
            let t = parse(1)? as usize;
            let vals = (2..2 + n_u + n_y + n_e).map(parse).collect::<Result<Vec<_>>>()?;
            rows.push((i, t, vals));
        }
        let n = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
        let horizon = rows.iter().map(|r| r.1).max().map_or(0, |m| m + 1);
        if n == 0 || rows.len() != n * horizon {
            return Err(Error::InvalidConfig(format!(
                "dataset CSV has {} rows, expected a full {n} x {horizon} grid",
                rows.len()
            )));
        }
        let mut rollouts: Vec<Rollout> = (0..n)
            .map(|_| Rollout {
                inputs: DMatrix::zeros(n_u, horizon),
                outputs: DMatrix::zeros(n_y, horizon),
                innovations: (n_e > 0).then(|| DMatrix::zeros(n_y, horizon)),
            })
            .collect();
        for (i, t, vals) in rows {
            let r = &mut rollouts[i];
            for j in 0..n_u {
                r.inputs[(j, t)] = vals[j];
            }
            for j in 0..n_y {
                r.outputs[(j, t)] = vals[n_u + j];
            }
            if let Some(e) = r.innovations.as_mut() {
                for j in 0..n_y {
                    e[(j, t)] = vals[n_u + n_y + j];
                }
            }
        }
        Self::from_rollouts(n_u, n_y, horizon, rollouts, None)
    }
}

fn signal_toeplitz(signal: &DMatrix<f64>) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = signal.column_iter().map(|c| DMatrix::from_column_slice(c.nrows(), 1, c.as_slice())).collect();
    block_toeplitz_upper(&blocks, signal.ncols())
}

/// JSON sidecar written next to an exported dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SimConfig,
    pub n_u: usize,
    pub n_y: usize,
    pub data_file: String,
    pub includes_innovations: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
}

fn simulate_rollout(sys: &StateSpaceModel, cfg: &SimConfig, index: usize) -> Result<Rollout> {
    let (n_u, n_y, horizon) = (sys.n_u(), sys.n_y(), cfg.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut inputs = DMatrix::zeros(n_u, horizon);
    let mut innovations = DMatrix::zeros(n_y, horizon);
    for t in 0..horizon {
        for j in 0..n_u {
            inputs[(j, t)] = cfg.sigma_u * rng.sample::<f64, _>(StandardNormal);
        }
        for j in 0..n_y {
            innovations[(j, t)] = cfg.sigma_e * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut outputs = DMatrix::zeros(n_y, horizon);
    let mut x = nalgebra::DVector::zeros(sys.n_x());
    for t in 0..horizon {
        let u = inputs.column(t);
        let e = innovations.column(t);
        let y = sys.c() * &x + sys.d() * u + e;
        x = sys.a() * &x + sys.b() * u + sys.k() * e;
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Overflow {
                rollout: index,
                step: t,
            });
        }
        outputs.set_column(t, &y);
    }
    Ok(Rollout {
        inputs,
        outputs,
        innovations: Some(innovations),
    })
}

/// Simulates `N` independent zero-initial-state rollouts of length `T`.
pub fn simulate(sys: &StateSpaceModel, cfg: &SimConfig) -> Result<RolloutDataset> {
    cfg.validate()?;
    let results: Vec<Result<Rollout>> = (0..cfg.n_rollouts)
        .into_par_iter()
        .map(|i| simulate_rollout(sys, cfg, i))
        .collect();
    // first failure in rollout order, independent of scheduling
    let rollouts = results.into_iter().collect::<Result<Vec<_>>>()?;
    RolloutDataset::from_rollouts(sys.n_u(), sys.n_y(), cfg.horizon, rollouts, Some(*cfg))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    /// Output regressors `y_0 .. y_{T-1}`, including the target itself.
    #[serde(rename = "paper-literal")]
    FullLag,
    /// Output regressors `y_0 .. y_{T-2}`.
    #[default]
    Strict,
}

impl std::str::FromStr for PredictorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "paper-literal" => Ok(Self::FullLag),
            other => Err(Error::InvalidConfig(format!(
                "unknown predictor mode {other:?} (expected strict or paper-literal)"
            ))),
        }
    }
}

/// Last-step predictor regression `y_{T-1} = G_K u + H_K y + e_{T-1}`, one column per rollout.
#[derive(Debug, Clone)]
pub struct PredictorRegression {
    pub target: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub mode: PredictorMode,
    pub horizon: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl PredictorRegression {
    /// Number of output lags used as regressors.
    pub fn output_lags(&self) -> usize {
        self.outputs.nrows() / self.n_y
    }

    pub fn n_samples(&self) -> usize {
        self.target.ncols()
    }

    /// `[u; y]`.
    pub fn regressors(&self) -> DMatrix<f64> {
        vstack(&[self.inputs.clone(), self.outputs.clone()])
    }

    pub fn check_identifiable(&self) -> Result<()> {
        let dim = self.inputs.nrows() + self.outputs.nrows();
        if self.n_samples() <= dim {
            return Err(Error::RankDeficient(format!(
                "predictor regression has {} rollouts but {dim} regressors; need N > {dim}",
                self.n_samples()
            )));
        }
        Ok(())
    }
}

pub fn assemble_predictor(data: &RolloutDataset, mode: PredictorMode) -> Result<PredictorRegression> {
    let horizon = data.horizon();
    if horizon < 2 {
        return Err(Error::InvalidConfig("predictor regression needs T >= 2".into()));
    }
    let (n_u, n_y) = (data.n_u(), data.n_y());
    let lags = match mode {
        PredictorMode::FullLag => horizon,
        PredictorMode::Strict => horizon - 1,
    };
    let n = data.n_rollouts();
    let mut target = DMatrix::zeros(n_y, n);
    let mut inputs = DMatrix::zeros(horizon * n_u, n);
    let mut outputs = DMatrix::zeros(lags * n_y, n);
    for (i, r) in data.rollouts().iter().enumerate() {
        target.set_column(i, &r.outputs.column(horizon - 1));
        for t in 0..horizon {
            for j in 0..n_u {
                inputs[(t * n_u + j, i)] = r.inputs[(j, t)];
            }
        }
        for t in 0..lags {
            for j in 0..n_y {
                outputs[(t * n_y + j, i)] = r.outputs[(j, t)];
            }
        }
    }
    let reg = PredictorRegression {
        target,
        inputs,
        outputs,
        mode,
        horizon,
        n_u,
        n_y,
    };
    reg.check_identifiable()?;
    Ok(reg)
}
