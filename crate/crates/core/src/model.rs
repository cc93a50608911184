//! LTI systems in innovations and predictor form, their Markov parameters, and the
//! block Toeplitz operators built from them.
//!
//! The innovations form is
//!
//! ```text
//! x_{t+1} = A x_t + B u_t + K e_t
//! y_t     = C x_t + D u_t + e_t
//! ```
//!
//! and the predictor form replaces `(A, B)` with `(A - K C, B - K D)` and feeds the
//! measured output back through `K`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Innovations-form state-space model `(A, B, C, D, K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemSpec", into = "SystemSpec")]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let n_u = b.ncols();
        let n_y = c.nrows();
        if n_x == 0 || n_u == 0 || n_y == 0 {
            return Err(Error::Dimension(format!(
                "state, input and output dimensions must be positive (got n_x={n_x}, n_u={n_u}, n_y={n_y})"
            )));
        }
        check_shape("A", &a, n_x, n_x)?;
        check_shape("B", &b, n_x, n_u)?;
        check_shape("C", &c, n_y, n_x)?;
        check_shape("D", &d, n_y, n_u)?;
        check_shape("K", &k, n_x, n_y)?;
        Ok(Self { a, b, c, d, k })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_siso(&self) -> bool {
        self.n_u() == 1 && self.n_y() == 1
    }

    /// Same system with a different innovation gain.
    pub fn with_gain(&self, k: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone(), k)
    }

    /// Applies the change of basis `x -> S x`; Markov parameters are unchanged.
    pub fn similarity(&self, s: &DMatrix<f64>) -> Result<Self> {
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("similarity transform is singular".into()))?;
        Self::new(
            s * &self.a * &s_inv,
            s * &self.b,
            &self.c * &s_inv,
            self.d.clone(),
            s * &self.k,
        )
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Row-major JSON layout: `{"A": [[..],..], "B": .., "C": .., "D": .., "K": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<SystemSpec> for StateSpaceModel {
    type Error = Error;

    fn try_from(spec: SystemSpec) -> Result<Self> {
        let a = rows_to_matrix("A", &spec.a)?;
        let b = rows_to_matrix("B", &spec.b)?;
        let c = rows_to_matrix("C", &spec.c)?;
        // D may be written as [] or [[0]]-style zeros; an empty D means zero feedthrough.
        let d = if spec.d.is_empty() {
            DMatrix::zeros(c.nrows(), b.ncols())
        } else {
            rows_to_matrix("D", &spec.d)?
        };
        let k = rows_to_matrix("K", &spec.k)?;
        StateSpaceModel::new(a, b, c, d, k)
    }
}

impl From<StateSpaceModel> for SystemSpec {
    fn from(m: StateSpaceModel) -> Self {
        SystemSpec {
            a: matrix_to_rows(&m.a),
            b: matrix_to_rows(&m.b),
            c: matrix_to_rows(&m.c),
            d: matrix_to_rows(&m.d),
            k: matrix_to_rows(&m.k),
        }
    }
}

/// Marginally stable double integrator with a single input and output.
///
/// `C` is the row `[1 0]`. The innovation gain defaults to `[1; -2]`.
pub fn siso_preset() -> StateSpaceModel {
    siso_preset_with_gain(DMatrix::from_column_slice(2, 1, &[1.0, -2.0]))
}

pub fn siso_preset_with_gain(k: DMatrix<f64>) -> StateSpaceModel {
    StateSpaceModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
        k,
    )
    .expect("preset dimensions are consistent")
}

/// Stable 4-state, 2-input, 2-output system with zero feedthrough.
pub fn mimo_preset() -> StateSpaceModel {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
         0.67, 0.67,  0.0,   0.0,
        -0.67, 0.67,  0.0,   0.0,
         0.0,  0.0,  -0.67, -0.67,
         0.0,  0.0,   0.67, -0.67,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
         0.65, -0.52,
         1.96,  0.48,
         4.31, -0.48,
        -2.64, -0.34,
    ]);
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(2, 4, &[
        -0.37, 0.07, -0.52, 0.58,
        -0.89, 0.75,  0.11, 0.09,
    ]);
    #[rustfmt::skip]
    let k = DMatrix::from_row_slice(4, 2, &[
        -0.69, -0.14,
         0.17,  0.56,
         0.64, -0.46,
        -0.94,  0.10,
    ]);
    StateSpaceModel::new(a, b, c, DMatrix::zeros(2, 2), k).expect("preset dimensions are consistent")
}

/// Draws an innovation gain with integer entries uniform in `[-2, 2]`.
pub fn random_integer_gain<R: Rng + ?Sized>(rng: &mut R, n_x: usize, n_y: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_x, n_y, |_, _| rng.random_range(-2i32..=2) as f64)
}

/// Random model with Gaussian entries; `A` is rescaled to spectral norm `a_scale`.
pub fn random_model<R: Rng + ?Sized>(
    rng: &mut R,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    a_scale: f64,
) -> StateSpaceModel {
    let mut gauss = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = gauss(n_x, n_x);
    let norm = crate::linalg::spectral_norm(&a);
    if norm > 0.0 {
        a *= a_scale / norm;
    }
    let b = gauss(n_x, n_u);
    let c = gauss(n_y, n_x);
    let d = gauss(n_y, n_u);
    let k = gauss(n_x, n_y) * 0.5;
    StateSpaceModel::new(a, b, c, d, k).expect("generated dimensions are consistent")
}

/// Predictor form `(A_K, B_K, C, D, K)` with `A_K = A - K C`, `B_K = B - K D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

pub fn to_predictor(sys: &StateSpaceModel) -> PredictorModel {
    let kc = &sys.k * &sys.c;
    let kd = &sys.k * &sys.d;
    PredictorModel {
        a_k: &sys.a - kc,
        b_k: &sys.b - kd,
        c: sys.c.clone(),
        d: sys.d.clone(),
        k: sys.k.clone(),
    }
}

impl PredictorModel {
    /// Recovers the innovations form: `A = A_K + K C`, `B = B_K + K D`.
    pub fn recompose(&self) -> Result<StateSpaceModel> {
        StateSpaceModel::new(
            &self.a_k + &self.k * &self.c,
            &self.b_k + &self.k * &self.d,
            self.c.clone(),
            self.d.clone(),
            self.k.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkovKind {
    /// `G = [D, CB, CAB, ...]`
    Input,
    /// `H = [I, CK, CAK, ...]`
    Noise,
    /// `G_K = [C A_K^{T-2} B_K, ..., C B_K, D]`, oldest lag first.
    PredictorInput,
    /// `H_K = [C A_K^{T-2} K, ..., C K, 0]`, oldest lag first.
    PredictorNoise,
}

/// Ordered list of equally sized parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSequence {
    kind: MarkovKind,
    blocks: Vec<DMatrix<f64>>,
}

impl MarkovSequence {
    /// Validates block shapes and the structural blocks of the given kind
    /// (identity head for `Noise`, zero tail for `PredictorNoise`).
    pub fn new(kind: MarkovKind, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Dimension("Markov sequence needs at least one block".into()))?;
        let (rows, cols) = first.shape();
        if let Some(bad) = blocks.iter().position(|b| b.shape() != (rows, cols)) {
            return Err(Error::Dimension(format!(
                "block {bad} is {:?}, expected {rows}x{cols}",
                blocks[bad].shape()
            )));
        }
        match kind {
            MarkovKind::Noise | MarkovKind::PredictorNoise if rows != cols => {
                return Err(Error::Dimension(format!(
                    "noise-side blocks must be square, got {rows}x{cols}"
                )));
            }
            MarkovKind::Noise if *first != DMatrix::identity(rows, cols) => {
                return Err(Error::InvalidConfig(
                    "noise Markov sequence must start with the identity".into(),
                ));
            }
            MarkovKind::PredictorNoise if blocks.last().is_some_and(|b| b.iter().any(|&v| v != 0.0)) => {
                return Err(Error::InvalidConfig(
                    "predictor noise Markov sequence must end with the zero block".into(),
                ));
            }
            _ => {}
        }
        Ok(Self { kind, blocks })
    }

    /// Shape checks only; for estimates whose structural blocks hold only approximately.
    pub fn estimated(kind: MarkovKind, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Dimension("Markov sequence needs at least one block".into()))?;
        let shape = first.shape();
        if blocks.iter().any(|b| b.shape() != shape) {
            return Err(Error::Dimension("Markov blocks have inconsistent shapes".into()));
        }
        Ok(Self { kind, blocks })
    }

    pub fn kind(&self) -> MarkovKind {
        self.kind
    }
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }
    pub fn len(&self) -> usize {
        self.blocks.len()
    }
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
    pub fn block_rows(&self) -> usize {
        self.blocks[0].nrows()
    }
    pub fn block_cols(&self) -> usize {
        self.blocks[0].ncols()
    }

    /// The sequence as one block row `[M_0 M_1 ... M_{T-1}]`.
    pub fn to_row(&self) -> DMatrix<f64> {
        crate::linalg::hstack(&self.blocks)
    }

    pub fn into_blocks(self) -> Vec<DMatrix<f64>> {
        self.blocks
    }
}

fn require_horizon(horizon: usize, min: usize) -> Result<()> {
    if horizon < min {
        return Err(Error::InvalidConfig(format!("horizon must be at least {min}, got {horizon}")));
    }
    Ok(())
}

/// `[first, C M, C A M, ..., C A^{T-2} M]` with `A^k M` accumulated as a running product.
fn impulse_blocks(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    m: &DMatrix<f64>,
    first: DMatrix<f64>,
    horizon: usize,
) -> Vec<DMatrix<f64>> {
    let mut blocks = Vec::with_capacity(horizon);
    blocks.push(first);
    let mut acc = m.clone();
    for _ in 1..horizon {
        blocks.push(c * &acc);
        acc = a * acc;
    }
    blocks
}

/// Input-side Markov parameters `G = [D, CB, CAB, ..., CA^{T-2}B]`.
pub fn markov_input(sys: &StateSpaceModel, horizon: usize) -> Result<MarkovSequence> {
    require_horizon(horizon, 1)?;
    let blocks = impulse_blocks(&sys.a, &sys.c, &sys.b, sys.d.clone(), horizon);
    MarkovSequence::new(MarkovKind::Input, blocks)
}

/// Noise-side Markov parameters `H = [I, CK, CAK, ..., CA^{T-2}K]`.
pub fn markov_noise(sys: &StateSpaceModel, horizon: usize) -> Result<MarkovSequence> {
    require_horizon(horizon, 1)?;
    let n_y = sys.n_y();
    let blocks = impulse_blocks(&sys.a, &sys.c, &sys.k, DMatrix::identity(n_y, n_y), horizon);
    MarkovSequence::new(MarkovKind::Noise, blocks)
}

/// Predictor-form Markov parameters `(G_K, H_K)` in oldest-lag-first order.
pub fn predictor_markov(
    pred: &PredictorModel,
    horizon: usize,
) -> Result<(MarkovSequence, MarkovSequence)> {
    require_horizon(horizon, 2)?;
    let n_y = pred.c.nrows();
    // newest-first: [D, C B_K, C A_K B_K, ...] then reversed
    let mut g = impulse_blocks(&pred.a_k, &pred.c, &pred.b_k, pred.d.clone(), horizon);
    g.reverse();
    let mut h = impulse_blocks(&pred.a_k, &pred.c, &pred.k, DMatrix::zeros(n_y, n_y), horizon);
    h.reverse();
    Ok((
        MarkovSequence::new(MarkovKind::PredictorInput, g)?,
        MarkovSequence::new(MarkovKind::PredictorNoise, h)?,
    ))
}

/// Block upper-triangular Toeplitz matrix with block `(i, j) = blocks[j - i]` for `j >= i`.
/// Blocks may be rectangular; the result has `n_blocks` block rows and columns.
pub fn block_toeplitz_upper(blocks: &[DMatrix<f64>], n_blocks: usize) -> DMatrix<f64> {
    let (r, c) = blocks[0].shape();
    let mut out = DMatrix::zeros(n_blocks * r, n_blocks * c);
    for i in 0..n_blocks {
        for j in i..n_blocks {
            out.view_mut((i * r, j * c), (r, c)).copy_from(&blocks[j - i]);
        }
    }
    out
}

/// Block lower-triangular Toeplitz matrix with block `(i, j) = blocks[i - j]` for `i >= j`.
pub fn block_toeplitz_lower(blocks: &[DMatrix<f64>], n_blocks: usize) -> DMatrix<f64> {
    let (r, c) = blocks[0].shape();
    let mut out = DMatrix::zeros(n_blocks * r, n_blocks * c);
    for i in 0..n_blocks {
        for j in 0..=i {
            out.view_mut((i * r, j * c), (r, c)).copy_from(&blocks[i - j]);
        }
    }
    out
}

/// Unit block upper-triangular Toeplitz matrix `T_H` built from a noise sequence.
#[derive(Debug, Clone)]
pub struct ToeplitzStack {
    base: MarkovSequence,
    dense: DMatrix<f64>,
}

pub fn toeplitz_stack(h: &MarkovSequence, horizon: usize) -> Result<ToeplitzStack> {
    if h.kind() != MarkovKind::Noise {
        return Err(Error::InvalidConfig(format!(
            "Toeplitz stack needs a noise sequence, got {:?}",
            h.kind()
        )));
    }
    if h.len() != horizon {
        return Err(Error::Dimension(format!(
            "noise sequence has {} blocks, horizon is {horizon}",
            h.len()
        )));
    }
    Ok(ToeplitzStack {
        base: h.clone(),
        dense: block_toeplitz_upper(h.blocks(), horizon),
    })
}

impl ToeplitzStack {
    pub fn base(&self) -> &MarkovSequence {
        &self.base
    }
    pub fn horizon(&self) -> usize {
        self.base.len()
    }
    pub fn n_y(&self) -> usize {
        self.base.block_rows()
    }
    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    /// Block lower-triangular factor `L` with block `(i, j) = H_{i-j}`, so that the
    /// stacked noise of one rollout is `vec(H E) = L vec(e_0 .. e_{T-1})`.
    /// For a single output this is `dense()` transposed.
    pub fn lower_factor(&self) -> DMatrix<f64> {
        block_toeplitz_lower(self.base.blocks(), self.horizon())
    }

    /// `T_H^{-1}` by back substitution on the unit triangular factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dense.nrows();
        self.dense
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .expect("unit triangular matrix is invertible")
    }
}
