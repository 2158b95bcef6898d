//! Competitor estimators: simple averages of residual-adjusted fits, the
//! one-shot DC combinations for lasso/ridge, the two-round principal-
//! component pipeline, the aggregated-estimating-equation combination for
//! nonlinear fits, and full-data benchmarks.
//!
//! Combination functions consume compressed summaries only; raw rows stay
//! inside the worker-side summarizers and the explicitly out-of-protocol
//! [`full_oracle`].

use crate::datagen::DataBatch;
use crate::error::{RaceError, Result};
use crate::linalg::{CompensatedMat, CompensatedVec, Mat};
use crate::local::{
    cv_select_lambda, cv_select_ridge, hk_ridge_value, lambda_grid, lasso_fit, nls_fit, ols_fit,
    pce_fit, ridge_fit, ridge_grid, LocalFit,
};
use crate::model::RegressionModel;
use crate::remodel::{residual_adjust, residual_adjust_nonlinear, build_h, ridge_inverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Simple average of residual-adjusted local fits.
    Av,
    DcLasso,
    DcRidge,
    DcPce,
    /// Aggregated estimating equations (information-weighted combination).
    Aee,
    /// Estimator computed on the pooled, undivided data.
    Full,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Av => "av",
            BaselineMethod::DcLasso => "dc_lasso",
            BaselineMethod::DcRidge => "dc_ridge",
            BaselineMethod::DcPce => "dc_pce",
            BaselineMethod::Aee => "aee",
            BaselineMethod::Full => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub beta: Vec<f64>,
    pub method: BaselineMethod,
    /// Coordinator/worker communication rounds the scheme needs (1 or 2).
    pub rounds: usize,
}

/// Componentwise mean with factor `1/N`.
pub fn simple_average(estimates: &[Vec<f64>]) -> Result<BaselineResult> {
    let first = estimates
        .first()
        .ok_or_else(|| RaceError::InvalidParam("cannot average zero estimates".into()))?;
    let p = first.len();
    let mut acc = CompensatedVec::zeros(p);
    for e in estimates {
        if e.len() != p {
            return Err(RaceError::InvalidParam("estimates disagree on dimension".into()));
        }
        acc.add_scaled(1.0, e);
    }
    let mut beta = acc.value();
    for b in &mut beta {
        *b /= estimates.len() as f64;
    }
    Ok(BaselineResult { beta, method: BaselineMethod::Av, rounds: 1 })
}

/// Residual-adjust every local fit with the ridge-form matrix
/// `M_j = (XᵀX/m + k₁I)⁻¹`, then average. Principal-component fits imply a
/// prior broadcast round, so those report two rounds.
pub fn ra_simple_average(batches: &[DataBatch], fits: &[LocalFit], k1: f64) -> Result<BaselineResult> {
    if batches.len() != fits.len() {
        return Err(RaceError::InvalidParam("one fit per batch required".into()));
    }
    let adjusted: Vec<Vec<f64>> = batches
        .iter()
        .zip(fits)
        .map(|(b, f)| {
            let m = ridge_inverse(&f.gram, k1);
            residual_adjust(b, f, &m)
        })
        .collect();
    let mut result = simple_average(&adjusted)?;
    if fits.iter().any(|f| f.method == crate::local::FitMethod::Pce) {
        result.rounds = 2;
    }
    Ok(result)
}

/// Nonlinear counterpart: adjust with `H_j` rows before averaging.
pub fn ra_simple_average_nonlinear(
    batches: &[DataBatch],
    fits: &[LocalFit],
    model: &dyn RegressionModel,
    k1: f64,
) -> Result<BaselineResult> {
    if batches.len() != fits.len() {
        return Err(RaceError::InvalidParam("one fit per batch required".into()));
    }
    let adjusted: Vec<Vec<f64>> = batches
        .iter()
        .zip(fits)
        .map(|(b, f)| {
            let h = build_h(b, f, model, k1);
            residual_adjust_nonlinear(b, f, &h, model)
        })
        .collect();
    simple_average(&adjusted)
}

fn gram_weighted_combination(
    weights: &[Mat],
    fits: &[LocalFit],
    method: BaselineMethod,
    rounds: usize,
) -> Result<BaselineResult> {
    let p = fits[0].beta_hat.len();
    let mut total = CompensatedMat::zeros(p);
    let mut rhs = CompensatedVec::zeros(p);
    for (w, f) in weights.iter().zip(fits) {
        total.add_mat(w);
        rhs.add_scaled(1.0, &w.matvec(&f.beta_hat));
    }
    let lhs = total.value();
    let beta = lhs.solve_spd(&rhs.value()).ok_or_else(|| RaceError::Singular {
        context: format!("aggregated weight matrix for {}", method.name()),
        condition: lhs.sym_condition(),
    })?;
    Ok(BaselineResult { beta, method, rounds })
}

/// One-shot DC combination of lasso fits:
/// `(Σ XᵀX/m)⁻¹ Σ (XᵀX/m) β̂_j`.
pub fn dc_lasso(fits: &[LocalFit]) -> Result<BaselineResult> {
    if fits.is_empty() {
        return Err(RaceError::InvalidParam("no fits to combine".into()));
    }
    let weights: Vec<Mat> = fits.iter().map(|f| f.gram.clone()).collect();
    gram_weighted_combination(&weights, fits, BaselineMethod::DcLasso, 1)
}

/// One-shot DC combination of ridge fits with `A_j = XᵀX + s_jI`.
pub fn dc_ridge(fits: &[LocalFit]) -> Result<BaselineResult> {
    if fits.is_empty() {
        return Err(RaceError::InvalidParam("no fits to combine".into()));
    }
    let weights: Vec<Mat> = fits
        .iter()
        .map(|f| {
            let s = f.tuning.get("s").copied().ok_or_else(|| {
                RaceError::InvalidParam("ridge fit is missing its `s` tuning value".into())
            })?;
            Ok(f.gram.scaled(f.n_samples as f64).add_scaled_identity(s))
        })
        .collect::<Result<_>>()?;
    gram_weighted_combination(&weights, fits, BaselineMethod::DcRidge, 1)
}

/// Round one of the principal-component pipeline: aggregate raw `XᵀX`
/// summaries, eigendecompose, and return the leading `r` eigenvectors.
///
/// Eigenvalues are sorted descending and each eigenvector's first
/// nonzero component is made positive, so the basis is deterministic.
/// A spectral gap below 1e-10 at the rank boundary is an error.
pub fn pce_round1(xtx_list: &[Mat], r: usize) -> Result<Mat> {
    let first = xtx_list
        .first()
        .ok_or_else(|| RaceError::InvalidParam("no covariance summaries".into()))?;
    let p = first.n_rows();
    if r == 0 || r > p {
        return Err(RaceError::InvalidParam(format!("rank {r} out of range 1..={p}")));
    }
    let mut total = CompensatedMat::zeros(p);
    for m in xtx_list {
        total.add_mat(m);
    }
    let (values, vectors) = total.value().sym_eigen();
    if r < p {
        let gap = values[r - 1] - values[r];
        if gap < 1e-10 {
            return Err(RaceError::EigenDegeneracy { rank: r, gap });
        }
    }
    let mut basis = Mat::zeros(p, r);
    for col in 0..r {
        let mut sign = 1.0;
        for row in 0..p {
            let v = vectors[(row, col)];
            if v.abs() > 1e-12 {
                sign = v.signum();
                break;
            }
        }
        for row in 0..p {
            basis[(row, col)] = sign * vectors[(row, col)];
        }
    }
    Ok(basis)
}

/// Worker-side reduction for round two: `ZᵀZ` and `Zᵀy` with `Z = X P_r`.
pub fn pce_reduce(batch: &DataBatch, basis: &Mat) -> (Mat, Vec<f64>) {
    let z = batch.x.matmul(basis);
    (z.gram(1.0), z.tr_matvec(&batch.y))
}

/// Round two: aggregate the reduced summaries and map back through the
/// broadcast basis: `β̂ = P_r (Σ ZᵀZ)⁻¹ Σ Zᵀy`.
pub fn pce_combine(basis: &Mat, ztz_list: &[Mat], zty_list: &[Vec<f64>]) -> Result<BaselineResult> {
    if ztz_list.is_empty() || ztz_list.len() != zty_list.len() {
        return Err(RaceError::InvalidParam("mismatched reduced summaries".into()));
    }
    let r = basis.n_cols();
    let mut lhs = CompensatedMat::zeros(r);
    let mut rhs = CompensatedVec::zeros(r);
    for (ztz, zty) in ztz_list.iter().zip(zty_list) {
        lhs.add_mat(ztz);
        rhs.add_scaled(1.0, zty);
    }
    let total = lhs.value();
    let gamma = total.solve_spd(&rhs.value()).ok_or_else(|| RaceError::Singular {
        context: "aggregated reduced Gram ZᵀZ".into(),
        condition: total.sym_condition(),
    })?;
    Ok(BaselineResult {
        beta: basis.matvec(&gamma),
        method: BaselineMethod::DcPce,
        rounds: 2,
    })
}

/// Complete two-round principal-component estimate over the batches.
pub fn dc_pce(batches: &[DataBatch], r: usize) -> Result<BaselineResult> {
    let xtx: Vec<Mat> = batches.iter().map(|b| b.x.gram(1.0)).collect();
    let basis = pce_round1(&xtx, r)?;
    let mut ztz = Vec::with_capacity(batches.len());
    let mut zty = Vec::with_capacity(batches.len());
    for b in batches {
        let (a, v) = pce_reduce(b, &basis);
        ztz.push(a);
        zty.push(v);
    }
    pce_combine(&basis, &ztz, &zty)
}

/// Worker-side information matrix `ḟᵀ(X, β̂) ḟ(X, β̂)` for the
/// estimating-equation combination.
pub fn aee_information(batch: &DataBatch, fit: &LocalFit, model: &dyn RegressionModel) -> Mat {
    let jac = model.jacobian_rows(&batch.x, &fit.beta_hat);
    jac.gram(1.0)
}

/// Information-weighted combination `(Σ A_j)⁻¹ Σ A_j β̂_j`.
pub fn aee_combine(infos: &[Mat], fits: &[LocalFit]) -> Result<BaselineResult> {
    if infos.is_empty() || infos.len() != fits.len() {
        return Err(RaceError::InvalidParam("one information matrix per fit required".into()));
    }
    let mut result = gram_weighted_combination(infos, fits, BaselineMethod::Aee, 1)?;
    result.method = BaselineMethod::Aee;
    Ok(result)
}

/// Aggregated-estimating-equation estimate for nonlinear local fits.
pub fn aee_nonlinear(
    batches: &[DataBatch],
    fits: &[LocalFit],
    model: &dyn RegressionModel,
) -> Result<BaselineResult> {
    if batches.len() != fits.len() {
        return Err(RaceError::InvalidParam("one fit per batch required".into()));
    }
    let infos: Vec<Mat> = batches
        .iter()
        .zip(fits)
        .map(|(b, f)| aee_information(b, f, model))
        .collect();
    aee_combine(&infos, fits)
}

/// Which full-data benchmark to compute.
#[derive(Debug, Clone)]
pub enum FullKind {
    /// CV-tuned lasso plus ridge-form residual adjustment.
    LassoRa { folds: usize, grid_points: usize, k1: f64 },
    /// Tuned ridge plus ridge-form residual adjustment.
    RidgeRa { tuning: RidgeTuning, k1: f64 },
    /// Principal-component fit on the pooled eigenbasis plus adjustment.
    PceRa { rank: usize, k1: f64 },
    /// Pooled nonlinear least squares.
    Nls { tol: f64, max_iter: usize },
    /// Pooled ordinary least squares.
    Ols,
}

/// Ridge tuning rule shared by the harness and the full-data benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeTuning {
    /// `s = p·σ̂²/‖β̂_OLS‖²`.
    Hk,
    /// K-fold cross-validation over a log-spaced grid.
    Cv { folds: usize, grid_points: usize },
}

/// Selects the ridge value for a batch under the given rule.
pub fn select_ridge_value(batch: &DataBatch, tuning: &RidgeTuning) -> Result<f64> {
    match tuning {
        RidgeTuning::Hk => hk_ridge_value(batch),
        RidgeTuning::Cv { folds, grid_points } => {
            let grid = ridge_grid(batch, *grid_points);
            cv_select_ridge(batch, *folds, &grid)
        }
    }
}

/// Benchmark estimate on the pooled, undivided data. The only code path
/// outside the communication protocol that touches raw rows globally.
pub fn full_oracle(
    batches: &[DataBatch],
    kind: &FullKind,
    model: Option<&dyn RegressionModel>,
) -> Result<BaselineResult> {
    let pooled = DataBatch::concat(batches)?;
    let beta = match kind {
        FullKind::LassoRa { folds, grid_points, k1 } => {
            let grid = lambda_grid(&pooled, *grid_points);
            let lambda = cv_select_lambda(&pooled, *folds, &grid)?;
            let fit = lasso_fit(&pooled, lambda)?;
            let m = ridge_inverse(&fit.gram, *k1);
            residual_adjust(&pooled, &fit, &m)
        }
        FullKind::RidgeRa { tuning, k1 } => {
            let s = select_ridge_value(&pooled, tuning)?;
            let fit = ridge_fit(&pooled, s)?;
            let m = ridge_inverse(&fit.gram, *k1);
            residual_adjust(&pooled, &fit, &m)
        }
        FullKind::PceRa { rank, k1 } => {
            let basis = pce_round1(&[pooled.x.gram(1.0)], *rank)?;
            let fit = pce_fit(&pooled, &basis)?;
            let m = ridge_inverse(&fit.gram, *k1);
            residual_adjust(&pooled, &fit, &m)
        }
        FullKind::Nls { tol, max_iter } => {
            let model = model.ok_or_else(|| {
                RaceError::InvalidParam("nonlinear benchmark needs a regression model".into())
            })?;
            let p = pooled.n_features();
            nls_fit(&pooled, model, &vec![0.0; p], *tol, *max_iter)?.beta_hat
        }
        FullKind::Ols => ols_fit(&pooled)?.beta_hat,
    };
    Ok(BaselineResult { beta, method: BaselineMethod::Full, rounds: 1 })
}
