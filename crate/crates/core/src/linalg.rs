//! Small dense helpers shared by the estimators.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Hard ceiling on the condition number of any Gram matrix we are asked to invert.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Thin singular value decomposition `m = u diag(s) v_t`, singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

/// Divide-and-conquer SVD from LAPACK.
pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    use lax::{layout::MatrixLayout, JobSvd, Lapack};
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(rows, 0),
            s: Vec::new(),
            v_t: DMatrix::zeros(0, cols),
        });
    }
    if !all_finite(m) {
        return Err(Error::RankDeficient("SVD input has non-finite entries".into()));
    }
    let mut a = m.as_slice().to_vec();
    let layout = MatrixLayout::F {
        col: cols as i32,
        lda: rows as i32,
    };
    let out = f64::svddc(layout, JobSvd::Some, &mut a)
        .map_err(|e| Error::RankDeficient(format!("SVD did not converge: {e}")))?;
    let u = out.u.ok_or_else(|| Error::RankDeficient("SVD returned no left vectors".into()))?;
    let v_t = out.vt.ok_or_else(|| Error::RankDeficient("SVD returned no right vectors".into()))?;
    Ok(Svd {
        u: DMatrix::from_column_slice(rows, k, &u),
        s: out.s,
        v_t: DMatrix::from_column_slice(k, cols, &v_t),
    })
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    match svd(m) {
        Ok(d) => d.s[0],
        Err(_) => f64::NAN,
    }
}

/// Frobenius-relative deviation of `a` from `b`, guarded against a zero reference.
pub fn relative_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

/// Ratio of extreme eigenvalues of a symmetric matrix. Non-positive spectra give +inf.
pub fn spd_condition_number(gram: &DMatrix<f64>) -> f64 {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || !max.is_finite() {
        return f64::INFINITY;
    }
    max / min
}

/// Solves `gram * x = rhs` for a symmetric positive-definite `gram` after checking its
/// condition number against [`CONDITION_LIMIT`].
pub fn solve_gram(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if gram.nrows() != gram.ncols() || gram.nrows() != rhs.nrows() {
        return Err(Error::Dimension(format!(
            "{what}: gram is {}x{}, rhs has {} rows",
            gram.nrows(),
            gram.ncols(),
            rhs.nrows()
        )));
    }
    let cond = spd_condition_number(gram);
    if cond > CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            what,
            cond,
            limit: CONDITION_LIMIT,
        });
    }
    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient(format!("{what} is not positive definite"))
    })?;
    Ok(chol.solve(rhs))
}

/// Horizontal concatenation of equally tall blocks.
pub fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Vertical concatenation of equally wide blocks.
pub fn vstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Splits a block row `[M_0 M_1 ...]` into `count` blocks of width `width`.
pub fn split_columns(row: &DMatrix<f64>, width: usize, count: usize) -> Vec<DMatrix<f64>> {
    (0..count)
        .map(|k| row.columns(k * width, width).into_owned())
        .collect()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
