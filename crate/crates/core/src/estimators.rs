//! Ordinary, weighted and predictor-form least-squares estimators of the Markov parameters.
//!
//! The weighted estimator is written for the general multi-output case as a generalized
//! least-squares problem on the vectorized data equation of each rollout,
//!
//! ```text
//! vec(Y_i) = (U_i^T ⊗ I_ny) vec(G) + vec(H E_i),   Cov(vec(H E_i)) ∝ L L^T,
//! ```
//!
//! where `L` is the block lower-triangular Toeplitz factor of the noise Markov parameters.
//! The per-rollout weighting block is `W_blk = (L L^T)^{-1}`; with one output this is
//! `(T_H^T T_H)^{-1}` and the estimator reduces to `Y W U^T (U W U^T)^{-1}`. The full
//! `N T n_y`-sized weighting matrix is never formed.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{extract, predictor_blocks_newest_first, ExtractionMethod};
use crate::linalg::{self, solve_gram, spd_condition_number, spectral_norm, CONDITION_LIMIT};
use crate::model::{markov_noise, toeplitz_stack, MarkovKind, MarkovSequence, StateSpaceModel, ToeplitzStack};
use crate::rollout::{PredictorRegression, RolloutDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ols,
    /// Weighted least squares with a caller-supplied weighting.
    Wls,
    WlsOptimal,
    WlsEstimatedRecursive,
    WlsEstimatedHokalman,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Ols,
        Method::WlsOptimal,
        Method::WlsEstimatedRecursive,
        Method::WlsEstimatedHokalman,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Wls => "wls",
            Method::WlsOptimal => "wls-optimal",
            Method::WlsEstimatedRecursive => "wls-estimated-recursive",
            Method::WlsEstimatedHokalman => "wls-estimated-hokalman",
        }
    }

    pub fn extraction(&self) -> Option<ExtractionMethod> {
        match self {
            Method::WlsEstimatedRecursive => Some(ExtractionMethod::Recursive),
            Method::WlsEstimatedHokalman => Some(ExtractionMethod::HoKalman),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Method::Wls]
            .into_iter()
            .chain(Method::ALL)
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone)]
enum Whitener {
    /// `W = L^{-T} L^{-1}`; whitening solves `L z = x`.
    LowerFactor(DMatrix<f64>),
    /// `W = R R^T` (Cholesky); whitening multiplies by `R^T`.
    Cholesky(DMatrix<f64>),
}

/// Per-rollout weighting block `W_blk`, applied as `I_N ⊗ W_blk`.
#[derive(Debug, Clone)]
pub struct WeightingOperator {
    block: DMatrix<f64>,
    whitener: Whitener,
    toeplitz: Option<ToeplitzStack>,
    n_y: usize,
    origin: Method,
}

impl WeightingOperator {
    /// Weighting implied by a noise Toeplitz stack: `W_blk = (L L^T)^{-1}`, computed by
    /// triangular solves with the unit lower factor `L`.
    pub fn from_toeplitz(stack: &ToeplitzStack, origin: Method) -> Self {
        let lower = stack.lower_factor();
        let n = lower.nrows();
        let inv = lower
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("unit triangular factor is invertible");
        let block = linalg::symmetrize(&(inv.transpose() * &inv));
        Self {
            block,
            whitener: Whitener::LowerFactor(lower),
            toeplitz: Some(stack.clone()),
            n_y: stack.n_y(),
            origin,
        }
    }

    /// Arbitrary symmetric positive-definite block of size `(T n_y) x (T n_y)`.
    pub fn from_block(block: DMatrix<f64>, n_y: usize) -> Result<Self> {
        let n = block.nrows();
        if n != block.ncols() || n_y == 0 || n % n_y != 0 {
            return Err(Error::Dimension(format!(
                "weighting block is {}x{}, not square in multiples of n_y={n_y}",
                block.nrows(),
                block.ncols()
            )));
        }
        let asym = (&block - block.transpose()).amax();
        if asym > 1e-12 * block.amax().max(1.0) {
            return Err(Error::InvalidConfig(format!("weighting block is not symmetric (max deviation {asym:.2e})")));
        }
        let chol = block
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("weighting block is not positive definite".into()))?;
        Ok(Self {
            whitener: Whitener::Cholesky(chol.l()),
            block,
            toeplitz: None,
            n_y,
            origin: Method::Wls,
        })
    }

    pub fn identity(horizon: usize, n_y: usize) -> Self {
        Self::from_block(DMatrix::identity(horizon * n_y, horizon * n_y), n_y)
            .expect("identity is a valid weighting")
    }

    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }
    pub fn horizon(&self) -> usize {
        self.block.nrows() / self.n_y
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn origin(&self) -> Method {
        self.origin
    }
    /// The Toeplitz stack this weighting was built from, when there is one.
    pub fn toeplitz(&self) -> Option<&ToeplitzStack> {
        self.toeplitz.as_ref()
    }

    /// `R` with `W_blk = R^T R` applied to the rows of `x`.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.whitener {
            Whitener::LowerFactor(l) => l.solve_lower_triangular(x).expect("unit triangular factor is invertible"),
            Whitener::Cholesky(r) => r.transpose() * x,
        }
    }

    /// `W_blk^{-1}`, the per-rollout noise covariance shape.
    pub fn covariance_block(&self) -> DMatrix<f64> {
        match &self.whitener {
            Whitener::LowerFactor(l) => l * l.transpose(),
            Whitener::Cholesky(r) => {
                let n = r.nrows();
                let rinv = r.solve_lower_triangular(&DMatrix::identity(n, n)).expect("Cholesky factor is invertible");
                linalg::symmetrize(&(rinv.transpose() * rinv))
            }
        }
    }
}

/// `U_i^T ⊗ I_ny`: maps `vec(G)` to the stacked outputs of one rollout.
pub(crate) fn rollout_design(u_toeplitz: &DMatrix<f64>, n_y: usize) -> DMatrix<f64> {
    if n_y == 1 {
        return u_toeplitz.transpose();
    }
    u_toeplitz.transpose().kronecker(&DMatrix::<f64>::identity(n_y, n_y))
}

/// Column-major `vec` of a matrix as a column.
fn vec_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.len(), 1, m.as_slice())
}

/// Estimate of the input Markov parameters and its errors against the truth, when known.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub method: Method,
    pub g_hat: DMatrix<f64>,
    /// `||G_hat - G|| / ||G||` in the spectral norm.
    pub relative_error: Option<f64>,
    pub spectral_error: Option<f64>,
    pub frobenius_error: Option<f64>,
    pub wall_time_ms: f64,
    pub n_rollouts: usize,
    pub horizon: usize,
    pub seed: Option<u64>,
}

impl EstimateReport {
    fn new(method: Method, g_hat: DMatrix<f64>, data: &RolloutDataset, started: Instant) -> Self {
        Self {
            method,
            g_hat,
            relative_error: None,
            spectral_error: None,
            frobenius_error: None,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            n_rollouts: data.n_rollouts(),
            horizon: data.horizon(),
            seed: data.config().map(|c| c.seed),
        }
    }

    pub fn with_truth(mut self, g: &DMatrix<f64>) -> Self {
        let diff = &self.g_hat - g;
        let spectral = spectral_norm(&diff);
        self.spectral_error = Some(spectral);
        self.frobenius_error = Some(diff.norm());
        let scale = spectral_norm(g);
        self.relative_error = Some(if scale > 0.0 { spectral / scale } else { spectral });
        self
    }

    pub fn to_json(&self) -> EstimateReportJson {
        EstimateReportJson {
            method: self.method,
            relative_error: self.relative_error,
            spectral_error: self.spectral_error,
            frobenius_error: self.frobenius_error,
            wall_time_ms: self.wall_time_ms,
            n: self.n_rollouts,
            t: self.horizon,
            seed: self.seed,
            g_hat: self.g_hat.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReportJson {
    pub method: Method,
    pub relative_error: Option<f64>,
    pub spectral_error: Option<f64>,
    pub frobenius_error: Option<f64>,
    pub wall_time_ms: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: Option<u64>,
    pub g_hat: Vec<Vec<f64>>,
}

/// `G_hat = Y U^T (U U^T)^{-1}`.
pub fn ols(data: &RolloutDataset) -> Result<EstimateReport> {
    let started = Instant::now();
    let g_hat = ols_estimate(data)?;
    Ok(EstimateReport::new(Method::Ols, g_hat, data, started))
}

pub(crate) fn input_gram(data: &RolloutDataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = data.horizon() * data.n_u();
    let mut gram = DMatrix::zeros(dim, dim);
    let mut cross = DMatrix::zeros(dim, data.n_y());
    for (i, r) in data.rollouts().iter().enumerate() {
        let u = data.input_toeplitz(i);
        gram += &u * u.transpose();
        cross += &u * r.outputs.transpose();
    }
    (gram, cross)
}

fn ols_estimate(data: &RolloutDataset) -> Result<DMatrix<f64>> {
    let (gram, cross) = input_gram(data);
    Ok(solve_gram(&gram, &cross, "input Gram matrix U U^T")?.transpose())
}

fn check_weighting(data: &RolloutDataset, w: &WeightingOperator) -> Result<()> {
    if w.n_y() != data.n_y() || w.horizon() != data.horizon() {
        return Err(Error::Dimension(format!(
            "weighting is for T={}, n_y={}; data has T={}, n_y={}",
            w.horizon(),
            w.n_y(),
            data.horizon(),
            data.n_y()
        )));
    }
    Ok(())
}

/// Weighted least squares with weighting `I_N ⊗ W_blk`, accumulated rollout by rollout.
pub fn wls(data: &RolloutDataset, w: &WeightingOperator) -> Result<EstimateReport> {
    let started = Instant::now();
    let g_hat = wls_estimate(data, w)?;
    Ok(EstimateReport::new(w.origin(), g_hat, data, started))
}

fn wls_estimate(data: &RolloutDataset, w: &WeightingOperator) -> Result<DMatrix<f64>> {
    check_weighting(data, w)?;
    let (n_u, n_y, horizon) = (data.n_u(), data.n_y(), data.horizon());
    let dim = n_y * horizon * n_u;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, 1);
    for (i, r) in data.rollouts().iter().enumerate() {
        let z = w.whiten(&rollout_design(&data.input_toeplitz(i), n_y));
        let target = w.whiten(&vec_of(&r.outputs));
        gram += z.transpose() * &z;
        rhs += z.transpose() * target;
    }
    let vec_g = solve_gram(&gram, &rhs, "weighted input Gram matrix U W U^T")?;
    Ok(DMatrix::from_column_slice(n_y, horizon * n_u, vec_g.as_slice()))
}

/// `W* = I_N ⊗ (T_H^T T_H)^{-1}` from the true noise Markov parameters.
pub fn optimal_weighting(sys: &StateSpaceModel, horizon: usize) -> Result<WeightingOperator> {
    let h = markov_noise(sys, horizon)?;
    Ok(WeightingOperator::from_toeplitz(&toeplitz_stack(&h, horizon)?, Method::WlsOptimal))
}

/// Builds `T_hat_H` from an estimated `H_K` (oldest-first, trailing structural block) by
/// extracting `T - 1` blocks `{C A^i K}` and prepending the identity.
pub fn estimated_weighting(
    h_k_hat: &MarkovSequence,
    method: ExtractionMethod,
    n_x: Option<usize>,
) -> Result<WeightingOperator> {
    let horizon = h_k_hat.len();
    let n_y = h_k_hat.block_rows();
    let pred = predictor_blocks_newest_first(h_k_hat);
    let mut blocks = vec![DMatrix::identity(n_y, n_y)];
    if horizon > 1 {
        let (extracted, _) = extract(method, &pred, n_x, horizon - 1)?;
        blocks.extend(extracted);
    }
    let h = MarkovSequence::new(MarkovKind::Noise, blocks)?;
    let origin = match method {
        ExtractionMethod::Recursive => Method::WlsEstimatedRecursive,
        ExtractionMethod::HoKalman => Method::WlsEstimatedHokalman,
    };
    Ok(WeightingOperator::from_toeplitz(&toeplitz_stack(&h, horizon)?, origin))
}

fn split_predictor_solution(reg: &PredictorRegression, theta: &DMatrix<f64>) -> Result<(MarkovSequence, MarkovSequence)> {
    let (n_u, n_y, horizon) = (reg.n_u, reg.n_y, reg.horizon);
    let g_blocks: Vec<_> = (0..horizon)
        .map(|t| theta.columns(t * n_u, n_u).into_owned())
        .collect();
    let offset = horizon * n_u;
    let mut h_blocks: Vec<_> = (0..reg.output_lags())
        .map(|t| theta.columns(offset + t * n_y, n_y).into_owned())
        .collect();
    if h_blocks.len() < horizon {
        h_blocks.push(DMatrix::zeros(n_y, n_y));
    }
    Ok((
        MarkovSequence::estimated(MarkovKind::PredictorInput, g_blocks)?,
        MarkovSequence::estimated(MarkovKind::PredictorNoise, h_blocks)?,
    ))
}

/// Joint least squares of `y_{T-1}` on `[u; y]`. In strict mode the returned `H_K` is
/// padded with the structural zero block.
pub fn predictor_ls(reg: &PredictorRegression) -> Result<(MarkovSequence, MarkovSequence)> {
    reg.check_identifiable()?;
    let z = reg.regressors();
    let gram = &z * z.transpose();
    let cross = &z * reg.target.transpose();
    let theta = solve_gram(&gram, &cross, "predictor regressor Gram matrix")?.transpose();
    split_predictor_solution(reg, &theta)
}

/// Orthonormal basis of the row space of `u` (columns of `Q` from a thin QR of `u^T`).
fn row_space_basis(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = u * u.transpose();
    let cond = spd_condition_number(&gram);
    if cond > CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            what: "input regressor Gram matrix u u^T",
            cond,
            limit: CONDITION_LIMIT,
        });
    }
    Ok(u.transpose().qr().q())
}

/// Applies `Pi_u^perp = I - u^T (u u^T)^{-1} u` from the right without forming it.
fn project_out(m: &DMatrix<f64>, basis: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match basis {
        Some(q) => m - (m * q) * q.transpose(),
        None => m.clone(),
    }
}

/// `H_hat_K = y_{T-1} Pi y^T (y Pi y^T)^{-1}` with `Pi` the projector onto the orthogonal
/// complement of the input rows. Agrees with the `H_K` part of [`predictor_ls`].
pub fn projection_hk(reg: &PredictorRegression) -> Result<MarkovSequence> {
    reg.check_identifiable()?;
    let basis = if reg.inputs.nrows() > 0 {
        Some(row_space_basis(&reg.inputs)?)
    } else {
        None
    };
    let y_perp = project_out(&reg.outputs, basis.as_ref());
    let target_perp = project_out(&reg.target, basis.as_ref());
    let gram = &y_perp * y_perp.transpose();
    let cross = &y_perp * target_perp.transpose();
    let h = solve_gram(&gram, &cross, "projected output Gram matrix")?.transpose();
    let mut blocks: Vec<_> = (0..reg.output_lags())
        .map(|t| h.columns(t * reg.n_y, reg.n_y).into_owned())
        .collect();
    if blocks.len() < reg.horizon {
        blocks.push(DMatrix::zeros(reg.n_y, reg.n_y));
    }
    MarkovSequence::estimated(MarkovKind::PredictorNoise, blocks)
}

/// Dense `N x N` projector `I - u^T (u u^T)^{-1} u`. Only for small `N`.
pub fn orthogonal_projector(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = row_space_basis(u)?;
    let n = u.ncols();
    Ok(DMatrix::identity(n, n) - &q * q.transpose())
}

/// Single-output shortcut that relies on Toeplitz commutativity:
/// `G_hat = (sum_i Y_i T_H^{-1} U_i^T) (U U^T)^{-1} T_H`.
/// Equal to [`wls`] for one input and one output; diagnostic only.
pub fn wls_siso_commuted(data: &RolloutDataset, w: &WeightingOperator) -> Result<DMatrix<f64>> {
    check_weighting(data, w)?;
    if data.n_u() != 1 || data.n_y() != 1 {
        return Err(Error::InvalidConfig("the commuted WLS path only holds for a single input and output".into()));
    }
    let stack = w
        .toeplitz()
        .ok_or_else(|| Error::InvalidConfig("the commuted WLS path needs a Toeplitz weighting".into()))?;
    let t_inv = stack.inverse();
    let (gram, _) = input_gram(data);
    let mut acc = DMatrix::zeros(1, data.horizon());
    for (i, r) in data.rollouts().iter().enumerate() {
        acc += &r.outputs * &t_inv * data.input_toeplitz(i).transpose();
    }
    let left = solve_gram(&gram, &acc.transpose(), "input Gram matrix U U^T")?.transpose();
    Ok(left * stack.dense())
}

/// Single-output error expression `E U^T (U U^T)^{-1} T_H` (innovation row-stack `E`).
pub fn wls_error_commuted(data: &RolloutDataset, stack: &ToeplitzStack) -> Result<DMatrix<f64>> {
    if data.n_u() != 1 || data.n_y() != 1 {
        return Err(Error::InvalidConfig("the commuted error identity only holds for a single input and output".into()));
    }
    let eps = data.innovation_rows()?;
    let u = data.stacked_inputs();
    let gram = &u * u.transpose();
    let cross = &u * eps.transpose();
    let left = solve_gram(&gram, &cross, "input Gram matrix U U^T")?.transpose();
    Ok(left * stack.dense())
}

/// Runs one named estimator. `sys` is needed for the optimal weighting; `n_x` for
/// Ho-Kalman extraction.
pub fn estimate(
    data: &RolloutDataset,
    method: Method,
    sys: Option<&StateSpaceModel>,
    predictor_mode: crate::rollout::PredictorMode,
    n_x: Option<usize>,
) -> Result<EstimateReport> {
    match method {
        Method::Ols => ols(data),
        Method::Wls => Err(Error::InvalidConfig("plain wls needs an explicit weighting; call wls()".into())),
        Method::WlsOptimal => {
            let sys = sys.ok_or_else(|| {
                Error::InvalidConfig("optimal weighting needs the true model".into())
            })?;
            wls(data, &optimal_weighting(sys, data.horizon())?)
        }
        Method::WlsEstimatedRecursive | Method::WlsEstimatedHokalman => {
            let started = Instant::now();
            let reg = crate::rollout::assemble_predictor(data, predictor_mode)?;
            let (_, h_k) = predictor_ls(&reg)?;
            let w = estimated_weighting(&h_k, method.extraction().expect("estimated method"), n_x)?;
            let g_hat = wls_estimate(data, &w)?;
            Ok(EstimateReport::new(method, g_hat, data, started))
        }
    }
}
