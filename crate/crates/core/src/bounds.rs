//! Finite-sample bound constants for the OLS and optimally weighted estimators, and the
//! explicit covariance comparison between them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{rollout_design, WeightingOperator};
use crate::linalg::{self, solve_gram, spectral_norm};
use crate::model::ToeplitzStack;

/// Largest parameter count `n_y T n_u` for which covariance matrices are formed explicitly.
pub const VARIANCE_DIM_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n_u: usize,
    pub n_y: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub delta: f64,
    /// Spectral norm of the true noise Markov row `H`.
    pub h_norm: f64,
    pub sigma_u: f64,
    pub sigma_e: f64,
    #[serde(rename = "N")]
    pub n_rollouts: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.n_u < 1 || self.n_y < 1 || self.horizon < 1 {
            return Err(Error::InvalidConfig("n_u, n_y and T must be >= 1".into()));
        }
        if !(self.h_norm >= 1.0 && self.h_norm.is_finite()) {
            return Err(Error::InvalidConfig(format!("||H|| must be >= 1, got {}", self.h_norm)));
        }
        if self.n_rollouts < 1 {
            return Err(Error::InvalidConfig("N must be >= 1".into()));
        }
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_u must be > 0, got {}", self.sigma_u)));
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_e must be >= 0, got {}", self.sigma_e)));
        }
        Ok(())
    }

    fn dims(&self) -> (f64, f64, f64) {
        (self.n_u as f64, self.n_y as f64, self.horizon as f64)
    }
}

/// `(N_min, C)` for ordinary least squares.
pub fn ols_constants(inp: &BoundInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    let (n_u, n_y, t) = inp.dims();
    let n_min = 8.0 * n_u * t + 4.0 * (n_u + n_y + 4.0) * (2.0 * t / inp.delta).ln();
    let poly = (2.0 * t.powi(3) + 3.0 * t * t + t) / 3.0;
    let c = 16.0 * inp.h_norm * (poly * (n_u + n_y) * (18.0 * t / inp.delta).ln()).sqrt();
    Ok((n_min, c))
}

/// `(N_min, C)` for least squares with the optimal weighting.
pub fn wls_constants(inp: &BoundInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    let (n_u, n_y, t) = inp.dims();
    let n_min = 8.0 * n_u * t + 2.0 * (n_u + n_y + 8.0) * (2.0 * t / inp.delta).ln();
    let poly = (t.powi(3) + t * t) / 2.0;
    let c = 16.0 * inp.h_norm * (poly * (n_u + n_y) * (18.0 * t / inp.delta).ln()).sqrt();
    Ok((n_min, c))
}

/// `(sigma_e / sigma_u) C / sqrt(N)`.
pub fn error_bound(c: f64, sigma_e: f64, sigma_u: f64, n_rollouts: usize) -> f64 {
    sigma_e / sigma_u * c / (n_rollouts as f64).sqrt()
}

/// Lower bound `sigma_u^2 N / 4` on `lambda_min(U U^T)`.
pub fn gram_threshold(sigma_u: f64, n_rollouts: usize) -> f64 {
    0.25 * sigma_u * sigma_u * n_rollouts as f64
}

/// Upper bound on `||E U^T||`, the cross term between innovations and inputs.
pub fn cross_term_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let (n_u, n_y, t) = inp.dims();
    let n = inp.n_rollouts as f64;
    Ok(2.0 * inp.sigma_e * inp.sigma_u * (2.0 * t * (t + 1.0) * n * (n_u + n_y) * (9.0 * t / inp.delta).ln()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub n_min_ols: f64,
    pub n_min_wls: f64,
    pub c_ols: f64,
    pub c_wls: f64,
    pub feasible_ols: bool,
    pub feasible_wls: bool,
    pub bound_ols: Option<f64>,
    pub bound_wls: Option<f64>,
}

pub fn bound_report(inp: &BoundInputs) -> Result<BoundReport> {
    let (n_min_ols, c_ols) = ols_constants(inp)?;
    let (n_min_wls, c_wls) = wls_constants(inp)?;
    let n = inp.n_rollouts as f64;
    let (feasible_ols, feasible_wls) = (n >= n_min_ols, n >= n_min_wls);
    let bound = |c| error_bound(c, inp.sigma_e, inp.sigma_u, inp.n_rollouts);
    Ok(BoundReport {
        inputs: *inp,
        n_min_ols,
        n_min_wls,
        c_ols,
        c_wls,
        feasible_ols,
        feasible_wls,
        bound_ols: feasible_ols.then(|| bound(c_ols)),
        bound_wls: feasible_wls.then(|| bound(c_wls)),
    })
}

/// `(||T_H||, sqrt(T) ||H||)`; the first never exceeds the second.
pub fn toeplitz_norm_pair(stack: &ToeplitzStack) -> (f64, f64) {
    let h = stack.base().to_row();
    (spectral_norm(stack.dense()), (stack.horizon() as f64).sqrt() * spectral_norm(&h))
}

#[derive(Debug, Clone)]
pub struct VarianceGap {
    pub var_ols: DMatrix<f64>,
    pub var_wls: DMatrix<f64>,
    /// Smallest eigenvalue of `var_ols - var_wls`.
    pub lambda_min_gap: f64,
}

/// Covariances of `vec(G_hat)` for OLS and for WLS with weighting `w`, assuming the noise
/// covariance of each rollout is `sigma_e^2 W_blk^{-1}`. `inputs` are the per-rollout input
/// Toeplitz matrices `U_i`.
pub fn variance_gap(inputs: &[DMatrix<f64>], w: &WeightingOperator, sigma_e: f64) -> Result<VarianceGap> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Dimension("variance_gap needs at least one rollout".into()))?;
    let n_y = w.n_y();
    if first.ncols() != w.horizon() || inputs.iter().any(|u| u.shape() != first.shape()) {
        return Err(Error::Dimension(format!(
            "input Toeplitz matrices must be (T n_u) x T with T={}",
            w.horizon()
        )));
    }
    let dim = n_y * first.nrows();
    if dim > VARIANCE_DIM_LIMIT {
        return Err(Error::InvalidConfig(format!(
            "explicit covariance of {dim} parameters exceeds the limit of {VARIANCE_DIM_LIMIT}"
        )));
    }
    let omega = w.covariance_block();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, dim);
    let mut c = DMatrix::zeros(dim, dim);
    for u in inputs {
        let x = rollout_design(u, n_y);
        a += x.transpose() * &x;
        b += x.transpose() * &omega * &x;
        c += x.transpose() * w.block() * &x;
    }
    let s2 = sigma_e * sigma_e;
    let a_inv_b = solve_gram(&a, &b, "input Gram matrix U U^T")?;
    let var_ols = linalg::symmetrize(&(solve_gram(&a, &a_inv_b.transpose(), "input Gram matrix U U^T")? * s2));
    let var_wls = linalg::symmetrize(&(solve_gram(&c, &DMatrix::identity(dim, dim), "weighted input Gram matrix U W U^T")? * s2));
    let lambda_min_gap = (&var_ols - &var_wls).symmetric_eigen().eigenvalues.min();
    Ok(VarianceGap {
        var_ols,
        var_wls,
        lambda_min_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::optimal_weighting;
    use crate::model::{mimo_preset, random_model, siso_preset};
    use crate::rollout::{simulate, SimConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(n_u: usize, n_y: usize, t: usize, delta: f64) -> BoundInputs {
        BoundInputs {
            n_u,
            n_y,
            horizon: t,
            delta,
            h_norm: 1.0,
            sigma_u: 1.0,
            sigma_e: 1.0,
            n_rollouts: 500,
        }
    }

    #[test]
    fn siso_thresholds() {
        let (n_ols, _) = ols_constants(&inputs(1, 1, 10, 0.1)).unwrap();
        let (n_wls, _) = wls_constants(&inputs(1, 1, 10, 0.1)).unwrap();
        assert!((n_ols - (80.0 + 24.0 * 200f64.ln())).abs() < 1e-12);
        assert!((n_ols - 207.16).abs() < 0.01);
        assert!((n_wls - (80.0 + 20.0 * 200f64.ln())).abs() < 1e-12);
        assert!((n_wls - 185.97).abs() < 0.01);
    }

    #[test]
    fn unit_horizon_constants() {
        let inp = inputs(1, 1, 1, 0.5);
        let (_, c_ols) = ols_constants(&inp).unwrap();
        let (_, c_wls) = wls_constants(&inp).unwrap();
        assert!((c_ols - 16.0 * (2.0 * 2.0 * 36f64.ln()).sqrt()).abs() < 1e-12);
        assert!((c_wls - 16.0 * (2.0 * 36f64.ln()).sqrt()).abs() < 1e-12);
        assert!(c_wls < c_ols);
    }

    #[test]
    fn constants_scale_with_h_norm() {
        let inp = inputs(2, 1, 7, 0.05);
        let doubled = BoundInputs { h_norm: 2.0, ..inp };
        assert_eq!(ols_constants(&doubled).unwrap().1, 2.0 * ols_constants(&inp).unwrap().1);
        assert_eq!(wls_constants(&doubled).unwrap().1, 2.0 * wls_constants(&inp).unwrap().1);
    }

    #[test]
    fn rejects_bad_inputs() {
        for delta in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(ols_constants(&inputs(1, 1, 10, delta)).is_err());
        }
        assert!(wls_constants(&BoundInputs { h_norm: 0.5, ..inputs(1, 1, 10, 0.1) }).is_err());
    }

    #[test]
    fn error_bound_examples() {
        assert_eq!(error_bound(1.0, 1.0, 1.0, 4), 0.5);
        assert!((error_bound(3.0, 2.0, 2.0, 400) - 2.0 * error_bound(3.0, 2.0, 2.0, 1600)).abs() < 1e-15);
        assert!((error_bound(7.0, 1.0, 1.0, 49) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_feasibility() {
        let r = bound_report(&BoundInputs { n_rollouts: 200, ..inputs(1, 1, 10, 0.1) }).unwrap();
        assert!(r.feasible_wls && !r.feasible_ols);
        assert!(r.bound_ols.is_none());
        assert!((r.bound_wls.unwrap() - r.c_wls / 200f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ordering_grid() {
        for t in 1..=100 {
            for n_u in 1..=3 {
                for n_y in 1..=3 {
                    for delta in [0.01, 0.05, 0.1] {
                        let inp = inputs(n_u, n_y, t, delta);
                        let (n_ols, c_ols) = ols_constants(&inp).unwrap();
                        let (n_wls, c_wls) = wls_constants(&inp).unwrap();
                        assert!(c_wls < c_ols && n_wls < n_ols, "T={t} n_u={n_u} n_y={n_y} delta={delta}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_delta_and_horizon(t in 1usize..60, n_u in 1usize..4, n_y in 1usize..4, d in 0.001f64..0.9, step in 0.01f64..0.09) {
            let lo = inputs(n_u, n_y, t, d);
            let hi = inputs(n_u, n_y, t, d + step);
            let longer = inputs(n_u, n_y, t + 1, d);
            for f in [ols_constants, wls_constants] {
                let (n0, c0) = f(&lo).unwrap();
                let (n1, c1) = f(&hi).unwrap();
                let (n2, c2) = f(&longer).unwrap();
                prop_assert!(n1 < n0 && c1 < c0);
                prop_assert!(n2 > n0 && c2 > c0);
            }
        }
    }

    #[test]
    fn cross_term_bound_positive_and_scales() {
        let inp = inputs(1, 1, 10, 0.1);
        let b = cross_term_bound(&inp).unwrap();
        let b4 = cross_term_bound(&BoundInputs { n_rollouts: 2000, ..inp }).unwrap();
        assert!(b > 0.0 && (b4 - 2.0 * b).abs() < 1e-9 * b);
        assert_eq!(gram_threshold(2.0, 100), 100.0);
    }

    fn input_blocks(data: &crate::rollout::RolloutDataset) -> Vec<DMatrix<f64>> {
        (0..data.n_rollouts()).map(|i| data.input_toeplitz(i)).collect()
    }

    #[test]
    fn unit_weighting_gap_vanishes() {
        let data = simulate(&siso_preset(), &SimConfig { n_rollouts: 30, horizon: 5, sigma_u: 1.0, sigma_e: 1.0, seed: 4 }).unwrap();
        let gap = variance_gap(&input_blocks(&data), &WeightingOperator::identity(5, 1), 1.0).unwrap();
        assert!((&gap.var_ols - &gap.var_wls).amax() <= 1e-12);
        assert!(gap.lambda_min_gap.abs() <= 1e-12);
    }

    #[test]
    fn gap_nonnegative_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..10 {
            let sys = if k == 0 { mimo_preset() } else { random_model(&mut rng, 2, 1 + k % 2, 1 + k % 3, 1.0) };
            let cfg = SimConfig { n_rollouts: 30, horizon: 5, sigma_u: 1.0, sigma_e: 1.0, seed: k as u64 };
            let data = simulate(&sys, &cfg).unwrap();
            let w = optimal_weighting(&sys, 5).unwrap();
            let u = input_blocks(&data);
            let g1 = variance_gap(&u, &w, 1.0).unwrap();
            assert!(g1.lambda_min_gap >= -1e-9 * spectral_norm(&g1.var_ols));
            let g2 = variance_gap(&u, &w, 2.0).unwrap();
            let d1 = &g1.var_ols - &g1.var_wls;
            let d2 = &g2.var_ols - &g2.var_wls;
            assert!((d2 - d1 * 4.0).amax() <= 1e-12 * g2.var_ols.amax());
        }
    }

    #[test]
    fn gap_matches_explicit_siso_oracle() {
        let sys = siso_preset();
        let data = simulate(&sys, &SimConfig { n_rollouts: 30, horizon: 5, sigma_u: 1.0, sigma_e: 1.0, seed: 7 }).unwrap();
        let w = optimal_weighting(&sys, 5).unwrap();
        // explicit N T x N T weighting and stacked U
        let u = data.stacked_inputs();
        let nt = u.ncols();
        let mut big_w = DMatrix::zeros(nt, nt);
        for i in 0..30 {
            big_w.view_mut((5 * i, 5 * i), (5, 5)).copy_from(w.block());
        }
        let big_omega = big_w.clone().try_inverse().unwrap();
        let uu_inv = (&u * u.transpose()).try_inverse().unwrap();
        let var_ols = &uu_inv * &u * &big_omega * u.transpose() * &uu_inv;
        let var_wls = (&u * &big_w * u.transpose()).try_inverse().unwrap();
        let gap = variance_gap(&input_blocks(&data), &w, 1.0).unwrap();
        assert!(crate::linalg::relative_deviation(&gap.var_ols, &var_ols) <= 1e-9);
        assert!(crate::linalg::relative_deviation(&gap.var_wls, &var_wls) <= 1e-9);
    }

    #[test]
    fn gap_size_limit() {
        let u = vec![DMatrix::identity(201, 201)];
        assert!(variance_gap(&u, &WeightingOperator::identity(201, 1), 1.0).is_err());
    }
}
