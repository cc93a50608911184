//! Recovering the open-loop noise Markov parameters `{C A^i K}` from the predictor-form
//! parameters `{C A_K^i K}`.
//!
//! Both extractors take the predictor blocks newest-first, `[CK, C A_K K, C A_K^2 K, ...]`,
//! and return `[CK, CAK, CA^2K, ...]` of the same length. Estimated `H_K` sequences come
//! out of the regression oldest-first with a trailing zero block; use
//! [`predictor_blocks_newest_first`] at the boundary.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MarkovSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    Recursive,
    HoKalman,
}

impl std::str::FromStr for ExtractionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(Self::Recursive),
            "ho-kalman" | "hokalman" => Ok(Self::HoKalman),
            other => Err(Error::InvalidConfig(format!(
                "unknown extraction method {other:?} (expected recursive or ho-kalman)"
            ))),
        }
    }
}

/// Reverses an oldest-first `H_K = [C A_K^{T-2} K, ..., CK, 0]` into
/// `[CK, C A_K K, ..., C A_K^{T-2} K]`, dropping the structural trailing block.
pub fn predictor_blocks_newest_first(h_k: &MarkovSequence) -> Vec<DMatrix<f64>> {
    let blocks = h_k.blocks();
    blocks[..blocks.len().saturating_sub(1)].iter().rev().cloned().collect()
}

fn check_blocks(pred: &[DMatrix<f64>], count: usize) -> Result<usize> {
    if count == 0 {
        return Err(Error::InvalidConfig("extraction needs at least one block".into()));
    }
    if pred.len() < count {
        return Err(Error::Dimension(format!(
            "asked for {count} blocks but only {} predictor blocks are available",
            pred.len()
        )));
    }
    let n_y = pred[0].nrows();
    if let Some(bad) = pred[..count].iter().position(|b| b.shape() != (n_y, n_y)) {
        return Err(Error::Dimension(format!(
            "predictor block {bad} is {:?}, expected {n_y}x{n_y}",
            pred[bad].shape()
        )));
    }
    Ok(n_y)
}

/// `C A^{i-1} K = C A_K^{i-1} K + sum_{j=1}^{i-1} (C A_K^{j-1} K)(C A^{i-j-1} K)`, for
/// `i = 1..=count`, using the outputs computed so far.
pub fn recursive_extract(pred: &[DMatrix<f64>], count: usize) -> Result<Vec<DMatrix<f64>>> {
    check_blocks(pred, count)?;
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(count);
    for i in 1..=count {
        let mut block = pred[i - 1].clone();
        for j in 1..i {
            block += &pred[j - 1] * &out[i - j - 1];
        }
        out.push(block);
    }
    Ok(out)
}

/// Block Hankel matrix with block `(i, j) = seq[offset + i + j]`.
#[derive(Debug, Clone)]
pub struct HankelBlock {
    pub rows: usize,
    pub cols: usize,
    pub matrix: DMatrix<f64>,
}

impl HankelBlock {
    pub fn new(seq: &[DMatrix<f64>], rows: usize, cols: usize, offset: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig("Hankel needs at least one block row and column".into()));
        }
        if offset + rows + cols - 1 > seq.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} Hankel at offset {offset} needs {} blocks, have {}",
                offset + rows + cols - 1,
                seq.len()
            )));
        }
        let (br, bc) = seq[0].shape();
        let mut matrix = DMatrix::zeros(rows * br, cols * bc);
        for i in 0..rows {
            for j in 0..cols {
                matrix
                    .view_mut((i * br, j * bc), (br, bc))
                    .copy_from(&seq[offset + i + j]);
            }
        }
        Ok(Self { rows, cols, matrix })
    }
}

/// State-space triple recovered from a Markov sequence, up to similarity.
#[derive(Debug, Clone)]
pub struct Realization {
    pub c: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub retained: Vec<f64>,
    pub discarded: Vec<f64>,
}

impl Realization {
    /// `[C K, C A K, ..., C A^{count-1} K]`.
    pub fn markov(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut ak = self.k.clone();
        for _ in 0..count {
            out.push(&self.c * &ak);
            ak = &self.a * ak;
        }
        out
    }
}

/// Extraction diagnostics, serialized for the harness and the CLI.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExtractionDiagnostics {
    pub method: Option<ExtractionMethod>,
    pub singular_values: Vec<f64>,
    pub order: usize,
    pub hankel_rows: usize,
    pub hankel_cols: usize,
    /// Largest relative misfit between the realization and the predictor blocks it was fitted to.
    pub residual: f64,
    /// `sigma_{n+1} / sigma_n > 0.99`: the chosen order is not separated from the noise floor.
    pub ill_separated: bool,
}

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;
const SEPARATION_WARNING: f64 = 0.99;

/// Ho-Kalman realization of `(C, A_K, K)` from the first `count` predictor blocks.
///
/// The Hankel uses `p = ceil(count / 2)` block rows and `q = count - p` block columns,
/// so that the shifted Hankel still fits in `count` blocks. The rank-`n_x` truncated SVD
/// is split evenly between the observability and controllability factors.
pub fn ho_kalman_realize(
    pred: &[DMatrix<f64>],
    n_x: usize,
    count: usize,
) -> Result<(Realization, ExtractionDiagnostics)> {
    let n_y = check_blocks(pred, count)?;
    if n_x == 0 {
        return Err(Error::InvalidConfig("state dimension must be >= 1".into()));
    }
    if count < 2 * n_x {
        return Err(Error::InvalidConfig(format!(
            "Ho-Kalman with n_x={n_x} needs at least {} blocks, got {count}",
            2 * n_x
        )));
    }
    let p = count.div_ceil(2);
    let q = count - p;
    let hankel = HankelBlock::new(pred, p, q, 0)?;
    let shifted = HankelBlock::new(pred, p, q, 1)?;
    if n_x > p.min(q) * n_y {
        return Err(Error::Extraction(format!(
            "n_x={n_x} exceeds the {}x{} Hankel's dimensions",
            p * n_y,
            q * n_y
        )));
    }

    let svd = crate::linalg::svd(&hankel.matrix)?;
    let sv = svd.s.clone();
    let top = sv[0];
    if !(top > 0.0) || sv[n_x - 1] <= RANK_TOLERANCE * top {
        return Err(Error::Extraction(format!(
            "requested order n_x={n_x} exceeds the numerical rank of the Hankel matrix"
        )));
    }
    let ill_separated = sv.get(n_x).is_some_and(|&next| next / sv[n_x - 1] > SEPARATION_WARNING);

    let u = svd.u.columns(0, n_x).into_owned();
    let v_t = svd.v_t.rows(0, n_x).into_owned();
    let sqrt_s = DMatrix::from_fn(n_x, n_x, |i, j| if i == j { sv[i].sqrt() } else { 0.0 });
    let inv_sqrt_s = DMatrix::from_fn(n_x, n_x, |i, j| if i == j { 1.0 / sv[i].sqrt() } else { 0.0 });

    let observability = &u * &sqrt_s;
    let controllability = &sqrt_s * &v_t;
    let a_k = &inv_sqrt_s * u.transpose() * &shifted.matrix * v_t.transpose() * &inv_sqrt_s;
    let c = observability.rows(0, n_y).into_owned();
    let k = controllability.columns(0, n_y).into_owned();

    let predictor = Realization {
        c,
        a: a_k,
        k,
        retained: sv[..n_x].to_vec(),
        discarded: sv[n_x..].to_vec(),
    };
    let scale = pred[..count].iter().map(|b| b.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let residual = predictor
        .markov(count)
        .iter()
        .zip(pred)
        .map(|(fit, want)| (fit - want).norm() / scale)
        .fold(0.0, f64::max);
    let diagnostics = ExtractionDiagnostics {
        method: Some(ExtractionMethod::HoKalman),
        singular_values: sv,
        order: n_x,
        hankel_rows: p,
        hankel_cols: q,
        residual,
        ill_separated,
    };
    Ok((predictor, diagnostics))
}

/// Ho-Kalman extraction: realize `(C, A_K, K)`, set `A = A_K + K C`, and evaluate
/// `C A^i K` for `i = 0..count`. The result does not depend on the realization's basis.
pub fn ho_kalman_extract(
    pred: &[DMatrix<f64>],
    n_x: usize,
    count: usize,
) -> Result<(Vec<DMatrix<f64>>, ExtractionDiagnostics)> {
    let (predictor, diagnostics) = ho_kalman_realize(pred, n_x, count)?;
    let open_loop = Realization {
        a: &predictor.a + &predictor.k * &predictor.c,
        ..predictor
    };
    Ok((open_loop.markov(count), diagnostics))
}

/// Picks the order at the largest ratio between consecutive singular values, ignoring
/// values below the rank tolerance. Returns at least 1.
pub fn select_order(singular_values: &[f64], max_order: usize) -> usize {
    let top = singular_values.first().copied().unwrap_or(0.0);
    let limit = max_order.min(singular_values.len().saturating_sub(1));
    let mut best = (1, 0.0);
    for n in 1..=limit {
        let (hi, lo) = (singular_values[n - 1], singular_values[n]);
        if hi <= RANK_TOLERANCE * top {
            break;
        }
        let ratio = if lo <= RANK_TOLERANCE * top { f64::INFINITY } else { hi / lo };
        if ratio > best.1 {
            best = (n, ratio);
        }
    }
    best.0
}

/// Runs the chosen extractor. `n_x` is required for Ho-Kalman only.
pub fn extract(
    method: ExtractionMethod,
    pred: &[DMatrix<f64>],
    n_x: Option<usize>,
    count: usize,
) -> Result<(Vec<DMatrix<f64>>, ExtractionDiagnostics)> {
    match method {
        ExtractionMethod::Recursive => {
            let out = recursive_extract(pred, count)?;
            let diag = ExtractionDiagnostics {
                method: Some(ExtractionMethod::Recursive),
                ..Default::default()
            };
            Ok((out, diag))
        }
        ExtractionMethod::HoKalman => {
            let n_x = n_x.ok_or_else(|| {
                Error::InvalidConfig("Ho-Kalman extraction needs the state dimension n_x".into())
            })?;
            ho_kalman_extract(pred, n_x, count)
        }
    }
}
