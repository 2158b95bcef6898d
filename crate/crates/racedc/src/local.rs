//! Per-batch estimators: the biased local fits that the global pipeline
//! corrects, plus the tuning rules used by the simulation studies.

use std::collections::BTreeMap;

use crate::datagen::{domain, substream, DataBatch};
use crate::error::{RaceError, Result};
use crate::linalg::{axpy, dot, norm2, Mat};
use crate::model::RegressionModel;

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Lasso,
    Ridge,
    Pce,
    Nls,
    Ols,
}

/// A per-batch estimate together with the compressed summaries the
/// aggregation side is allowed to see.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub beta_hat: Vec<f64>,
    pub method: FitMethod,
    /// Named tuning values (`lambda`, `s`, `r`, ...).
    pub tuning: BTreeMap<String, f64>,
    /// `XᵀX / m` for the batch.
    pub gram: Mat,
    /// Rows in the batch; needed to restore raw-scale quantities like
    /// `XᵀX + sI` from the normalized Gram.
    pub n_samples: usize,
    /// Iterations used by iterative fits (0 for closed forms).
    pub iterations: usize,
    /// Optional `p×r` eigenbasis for principal-component fits.
    pub extras: Option<Mat>,
}

impl LocalFit {
    fn new(batch: &DataBatch, beta_hat: Vec<f64>, method: FitMethod) -> Self {
        LocalFit {
            beta_hat,
            method,
            tuning: BTreeMap::new(),
            gram: batch.gram(),
            n_samples: batch.n_samples(),
            iterations: 0,
            extras: None,
        }
    }

    fn with_tuning(mut self, key: &str, value: f64) -> Self {
        self.tuning.insert(key.to_string(), value);
        self
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Coordinate-descent state for one design; reused across a λ path.
struct LassoProblem {
    /// Transposed design (`p×m`) so column sweeps are contiguous.
    xt: Mat,
    y: Vec<f64>,
    m: f64,
    col_sq: Vec<f64>,
}

const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 100_000;

impl LassoProblem {
    fn new(x: &Mat, y: &[f64]) -> Self {
        let xt = x.transpose();
        let m = x.n_rows() as f64;
        let col_sq = (0..xt.n_rows()).map(|k| dot(xt.row(k), xt.row(k)) / m).collect();
        LassoProblem { xt, y: y.to_vec(), m, col_sq }
    }

    fn lambda_max(&self) -> f64 {
        (0..self.xt.n_rows())
            .map(|k| (dot(self.xt.row(k), &self.y) / self.m).abs())
            .fold(0.0, f64::max)
    }

    fn kkt_residual(&self, beta: &[f64], residual: &[f64], lambda: f64) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..beta.len() {
            let g = dot(self.xt.row(k), residual) / self.m;
            let violation = if beta[k] != 0.0 {
                (g - lambda * beta[k].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(violation);
        }
        worst
    }

    /// Cyclic coordinate descent on the raw (unstandardized) objective
    /// `(1/2m)‖y − Xβ‖² + λ‖β‖₁`, warm-startable.
    fn solve(&self, lambda: f64, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let p = self.xt.n_rows();
        let mut beta = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let mut residual = self.y.clone();
        for k in 0..p {
            if beta[k] != 0.0 {
                axpy(&mut residual, -beta[k], self.xt.row(k));
            }
        }
        let mut sweeps = 0;
        while sweeps < LASSO_MAX_SWEEPS {
            let mut max_delta = 0.0f64;
            for k in 0..p {
                let ck = self.col_sq[k];
                if ck == 0.0 {
                    continue;
                }
                let old = beta[k];
                let rho = dot(self.xt.row(k), &residual) / self.m + ck * old;
                let new = soft_threshold(rho, lambda) / ck;
                if new != old {
                    axpy(&mut residual, old - new, self.xt.row(k));
                    beta[k] = new;
                    max_delta = max_delta.max((new - old).abs());
                }
            }
            sweeps += 1;
            if max_delta < LASSO_TOL && self.kkt_residual(&beta, &residual, lambda) <= LASSO_TOL {
                return Ok(beta);
            }
        }
        Err(RaceError::NonConvergence {
            what: "lasso coordinate descent".into(),
            iterations: sweeps,
            residual: self.kkt_residual(&beta, &residual, lambda),
        })
    }
}

/// Lasso fit by cyclic coordinate descent.
///
/// The solution satisfies the coordinatewise subgradient conditions of the
/// `(1/2m)‖y − Xβ‖² + λ‖β‖₁` objective to 1e-8.
pub fn lasso_fit(batch: &DataBatch, lambda: f64) -> Result<LocalFit> {
    if !(lambda >= 0.0) {
        return Err(RaceError::InvalidParam(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let problem = LassoProblem::new(&batch.x, &batch.y);
    let beta = problem.solve(lambda, None)?;
    Ok(LocalFit::new(batch, beta, FitMethod::Lasso).with_tuning("lambda", lambda))
}

/// Worst coordinatewise violation of the lasso stationarity conditions.
pub fn lasso_kkt_residual(batch: &DataBatch, beta: &[f64], lambda: f64) -> f64 {
    let problem = LassoProblem::new(&batch.x, &batch.y);
    let mut residual = batch.y.clone();
    for k in 0..beta.len() {
        if beta[k] != 0.0 {
            axpy(&mut residual, -beta[k], problem.xt.row(k));
        }
    }
    problem.kkt_residual(beta, &residual, lambda)
}

/// Descending log-spaced λ grid from `λ_max` down to `1e-3 λ_max`.
pub fn lambda_grid(batch: &DataBatch, n_points: usize) -> Vec<f64> {
    let lmax = LassoProblem::new(&batch.x, &batch.y).lambda_max();
    if lmax <= 0.0 || n_points == 0 {
        return vec![0.0];
    }
    log_grid(lmax, 1e-3 * lmax, n_points)
}

/// Descending log-spaced ridge grid, scaled to the raw `XᵀX` magnitude.
pub fn ridge_grid(batch: &DataBatch, n_points: usize) -> Vec<f64> {
    let scale = batch.n_samples() as f64;
    log_grid(10.0 * scale, 1e-3 * scale, n_points)
}

fn log_grid(hi: f64, lo: f64, n_points: usize) -> Vec<f64> {
    if n_points <= 1 {
        return vec![hi];
    }
    let (lh, ll) = (hi.ln(), lo.ln());
    (0..n_points)
        .map(|i| (lh + (ll - lh) * i as f64 / (n_points - 1) as f64).exp())
        .collect()
}

/// Deterministic fold assignment: a seeded shuffle followed by contiguous
/// blocks. `tag` (usually the batch id) keys the shuffle.
pub fn cv_folds(m: usize, folds: usize, tag: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = substream(0x5eed_f01d, domain::FOLDS, tag, 0);
    // Fisher-Yates.
    for i in (1..m).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let mut assignment = vec![0usize; m];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos * folds / m;
    }
    assignment
}

fn subset_rows(x: &Mat, y: &[f64], keep: impl Fn(usize) -> bool) -> (Mat, Vec<f64>) {
    let rows: Vec<usize> = (0..x.n_rows()).filter(|&i| keep(i)).collect();
    let mut xs = Mat::zeros(rows.len(), x.n_cols());
    let mut ys = Vec::with_capacity(rows.len());
    for (out, &i) in rows.iter().enumerate() {
        xs.row_mut(out).copy_from_slice(x.row(i));
        ys.push(y[i]);
    }
    (xs, ys)
}

fn validate_cv_inputs(batch: &DataBatch, folds: usize, grid: &[f64]) -> Result<()> {
    if folds < 2 {
        return Err(RaceError::InvalidParam("cross-validation needs ≥ 2 folds".into()));
    }
    if batch.n_samples() < folds {
        return Err(RaceError::InvalidParam(format!(
            "batch of {} rows cannot form {} folds",
            batch.n_samples(),
            folds
        )));
    }
    if grid.is_empty() {
        return Err(RaceError::InvalidParam("tuning grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(RaceError::InvalidParam("tuning grid must be sorted descending".into()));
    }
    Ok(())
}

/// Pooled held-out squared error per grid value; shared by both CV rules.
fn cv_curve(
    batch: &DataBatch,
    folds: usize,
    grid: &[f64],
    mut fit: impl FnMut(&Mat, &[f64], f64, Option<&[f64]>) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let assignment = cv_folds(batch.n_samples(), folds, batch.batch_id as u64);
    let mut sse = vec![0.0f64; grid.len()];
    for fold in 0..folds {
        let (x_tr, y_tr) = subset_rows(&batch.x, &batch.y, |i| assignment[i] != fold);
        let (x_te, y_te) = subset_rows(&batch.x, &batch.y, |i| assignment[i] == fold);
        let mut warm: Option<Vec<f64>> = None;
        for (gi, &g) in grid.iter().enumerate() {
            let beta = fit(&x_tr, &y_tr, g, warm.as_deref())?;
            for i in 0..x_te.n_rows() {
                let err = y_te[i] - dot(x_te.row(i), &beta);
                sse[gi] += err * err;
            }
            warm = Some(beta);
        }
    }
    let m = batch.n_samples() as f64;
    Ok(sse.into_iter().map(|s| s / m).collect())
}

fn argmin_desc_grid(grid: &[f64], curve: &[f64]) -> f64 {
    // Strict improvement required, so ties resolve to the larger value.
    let mut best = 0usize;
    for i in 1..grid.len() {
        if curve[i] < curve[best] {
            best = i;
        }
    }
    grid[best]
}

/// 5-fold-style cross-validation for the lasso penalty. Returns the grid
/// value minimizing mean held-out squared error, ties toward larger λ.
pub fn cv_select_lambda(batch: &DataBatch, folds: usize, grid: &[f64]) -> Result<f64> {
    validate_cv_inputs(batch, folds, grid)?;
    let curve = cv_curve(batch, folds, grid, |x, y, lambda, warm| {
        LassoProblem::new(x, y).solve(lambda, warm)
    })?;
    Ok(argmin_desc_grid(grid, &curve))
}

/// Cross-validation for the ridge value, mirroring `cv_select_lambda`.
pub fn cv_select_ridge(batch: &DataBatch, folds: usize, grid: &[f64]) -> Result<f64> {
    validate_cv_inputs(batch, folds, grid)?;
    let curve = cv_curve(batch, folds, grid, |x, y, s, _warm| ridge_solve(x, y, s))?;
    Ok(argmin_desc_grid(grid, &curve))
}

fn ridge_solve(x: &Mat, y: &[f64], s: f64) -> Result<Vec<f64>> {
    let xtx = x.gram(1.0);
    let xty = x.tr_matvec(y);
    let system = xtx.add_scaled_identity(s);
    system.solve_spd(&xty).ok_or_else(|| RaceError::Singular {
        context: format!("ridge system with s = {s}"),
        condition: f64::INFINITY,
    })
}

/// Ridge estimate `(XᵀX + sI)⁻¹Xᵀy`.
pub fn ridge_fit(batch: &DataBatch, s: f64) -> Result<LocalFit> {
    if !(s >= 0.0) {
        return Err(RaceError::InvalidParam(format!("ridge value must be ≥ 0, got {s}")));
    }
    let beta = ridge_solve(&batch.x, &batch.y, s)?;
    Ok(LocalFit::new(batch, beta, FitMethod::Ridge).with_tuning("s", s))
}

/// Data-driven ridge value `s = p·σ̂² / ‖β̂_OLS‖²` with `σ̂²` the OLS
/// residual mean square on `m − p` degrees of freedom.
pub fn hk_ridge_value(batch: &DataBatch) -> Result<f64> {
    let m = batch.n_samples();
    let p = batch.n_features();
    if m <= p {
        return Err(RaceError::InvalidParam(format!(
            "residual variance needs m > p (m = {m}, p = {p})"
        )));
    }
    let ols = ols_fit(batch)?;
    let fitted = batch.x.matvec(&ols.beta_hat);
    let rss: f64 = batch.y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
    let beta_sq = dot(&ols.beta_hat, &ols.beta_hat);
    if beta_sq <= 0.0 {
        return Err(RaceError::InvalidParam("OLS estimate is identically zero".into()));
    }
    let sigma_sq = rss / (m - p) as f64;
    Ok(p as f64 * sigma_sq / beta_sq)
}

/// Principal-component estimate on a given orthonormal basis `P_r`.
pub fn pce_fit(batch: &DataBatch, p_r: &Mat) -> Result<LocalFit> {
    let p = batch.n_features();
    let r = p_r.n_cols();
    if p_r.n_rows() != p {
        return Err(RaceError::InvalidParam(format!(
            "basis has {} rows but design has {} columns",
            p_r.n_rows(),
            p
        )));
    }
    let ptp = p_r.transpose().matmul(p_r);
    if ptp.max_abs_diff(&Mat::identity(r)) > 1e-10 {
        return Err(RaceError::InvalidParam("basis columns are not orthonormal".into()));
    }
    let z = batch.x.matmul(p_r);
    let ztz = z.gram(1.0);
    let zty = z.tr_matvec(&batch.y);
    let gamma = ztz.solve_spd(&zty).ok_or_else(|| RaceError::Singular {
        context: "projected design ZᵀZ".into(),
        condition: f64::INFINITY,
    })?;
    let beta = p_r.matvec(&gamma);
    let mut fit = LocalFit::new(batch, beta, FitMethod::Pce).with_tuning("r", r as f64);
    fit.extras = Some(p_r.clone());
    Ok(fit)
}

const NLS_JITTER: f64 = 1e-8;
const NLS_MAX_HALVINGS: usize = 30;

/// Gauss-Newton nonlinear least squares with step halving.
///
/// Stops when the objective gradient norm drops to `tol` or the iteration
/// cap is reached.
pub fn nls_fit(
    batch: &DataBatch,
    model: &dyn RegressionModel,
    init: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LocalFit> {
    if max_iter == 0 {
        return Err(RaceError::InvalidParam("max_iter must be ≥ 1".into()));
    }
    if init.len() != batch.n_features() {
        return Err(RaceError::InvalidParam("init length must equal p".into()));
    }
    let mut beta = init.to_vec();
    let mut iterations = 0;
    let objective = |b: &[f64]| -> f64 {
        let f = model.value_rows(&batch.x, b);
        batch.y.iter().zip(&f).map(|(y, v)| (y - v) * (y - v)).sum()
    };
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let f = model.value_rows(&batch.x, &beta);
        let residual: Vec<f64> = batch.y.iter().zip(&f).map(|(y, v)| y - v).collect();
        let jac = model.jacobian_rows(&batch.x, &beta);
        let jtr = jac.tr_matvec(&residual);
        grad_norm = 2.0 * norm2(&jtr);
        if grad_norm <= tol {
            break;
        }
        let jtj = jac.gram(1.0);
        let direction = match jtj.solve_spd(&jtr) {
            Some(d) => d,
            None => jtj
                .add_scaled_identity(NLS_JITTER)
                .solve_spd(&jtr)
                .ok_or_else(|| RaceError::Singular {
                    context: "Gauss-Newton normal equations".into(),
                    condition: f64::INFINITY,
                })?,
        };
        let q0: f64 = residual.iter().map(|r| r * r).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..NLS_MAX_HALVINGS {
            let trial: Vec<f64> =
                beta.iter().zip(&direction).map(|(b, d)| b + alpha * d).collect();
            if objective(&trial) < q0 {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(next) => beta = next,
            None => {
                return Err(RaceError::NonConvergence {
                    what: "Gauss-Newton step halving".into(),
                    iterations,
                    residual: grad_norm,
                })
            }
        }
        iterations += 1;
    }
    if grad_norm > tol {
        // Re-check at the final iterate; the loop may have run out of budget.
        let f = model.value_rows(&batch.x, &beta);
        let residual: Vec<f64> = batch.y.iter().zip(&f).map(|(y, v)| y - v).collect();
        let jac = model.jacobian_rows(&batch.x, &beta);
        grad_norm = 2.0 * norm2(&jac.tr_matvec(&residual));
        if grad_norm > tol {
            return Err(RaceError::NonConvergence {
                what: "Gauss-Newton".into(),
                iterations,
                residual: grad_norm,
            });
        }
    }
    let mut fit = LocalFit::new(batch, beta, FitMethod::Nls);
    fit.iterations = iterations;
    Ok(fit)
}

/// Ordinary least squares on one batch.
pub fn ols_fit(batch: &DataBatch) -> Result<LocalFit> {
    let gram = batch.gram();
    let xty = batch.xty_over_m();
    let beta = gram.solve_spd(&xty).ok_or_else(|| RaceError::Singular {
        context: "OLS Gram matrix".into(),
        condition: f64::INFINITY,
    })?;
    Ok(LocalFit::new(batch, beta, FitMethod::Ols))
}

/// Ordinary least squares on the concatenation of all batches.
pub fn ols_fit_pooled(batches: &[DataBatch]) -> Result<LocalFit> {
    let pooled = DataBatch::concat(batches)?;
    ols_fit(&pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::datagen::{
        gen_linear_batches, gen_nonlinear_batches, CovKind, CovarianceSpec, LinearModelSpec,
        MeanMode, NonlinearModelSpec,
    };
    use crate::linalg::max_abs_diff;
    use crate::model::{LinearMean, ShiftedSquare};

    fn small_batch() -> DataBatch {
        // Fixed p=2, m=5 instance used by several hand/lattice oracles.
        let x = Mat::from_rows(&[
            &[1.0, 0.5],
            &[-0.3, 1.2],
            &[0.8, -0.7],
            &[1.5, 0.1],
            &[-1.1, -0.4],
        ]);
        let y = vec![2.0, 0.5, 1.0, 3.1, -2.2];
        DataBatch::new(x, y, 0).unwrap()
    }

    fn exp1_batches(n_batches: usize, m: usize, seed: u64) -> Vec<DataBatch> {
        let spec = LinearModelSpec {
            beta: vec![3.0, 2.0, 1.0, 0.5, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            noise_var: 4.0,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.5).unwrap(),
            mean_mode: MeanMode::Identical,
        };
        gen_linear_batches(&spec, n_batches, m, seed).unwrap()
    }

    #[test]
    fn lasso_with_zero_penalty_equals_ols() {
        let batch = &exp1_batches(1, 50, 2)[0];
        let lasso = lasso_fit(batch, 0.0).unwrap();
        let ols = ols_fit(batch).unwrap();
        assert!(max_abs_diff(&lasso.beta_hat, &ols.beta_hat) < 1e-8);
    }

    #[test]
    fn lasso_kills_everything_above_lambda_max() {
        let batch = small_batch();
        let lmax = lambda_grid(&batch, 1)[0];
        let fit = lasso_fit(&batch, lmax).unwrap();
        assert!(fit.beta_hat.iter().all(|&b| b == 0.0));
        let fit2 = lasso_fit(&batch, 2.0 * lmax).unwrap();
        assert!(fit2.beta_hat.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lasso_matches_lattice_search_oracle() {
        // Two-stage lattice minimizer of the exact objective on p=2, m=5.
        let batch = small_batch();
        let lambda = 0.3;
        let fit = lasso_fit(&batch, lambda).unwrap();
        let objective = |b0: f64, b1: f64| -> f64 {
            let m = batch.n_samples() as f64;
            let mut sse = 0.0;
            for i in 0..batch.n_samples() {
                let e = batch.y[i] - batch.x[(i, 0)] * b0 - batch.x[(i, 1)] * b1;
                sse += e * e;
            }
            sse / (2.0 * m) + lambda * (b0.abs() + b1.abs())
        };
        let mut best = (0.0, 0.0, f64::INFINITY);
        let mut scan = |c0: f64, c1: f64, half: f64, step: f64, best: &mut (f64, f64, f64)| {
            let steps = (2.0 * half / step).round() as i64;
            for i in 0..=steps {
                for j in 0..=steps {
                    let b0 = c0 - half + i as f64 * step;
                    let b1 = c1 - half + j as f64 * step;
                    let v = objective(b0, b1);
                    if v < best.2 {
                        *best = (b0, b1, v);
                    }
                }
            }
        };
        scan(0.0, 0.0, 4.0, 0.01, &mut best);
        let coarse = best;
        scan(coarse.0, coarse.1, 0.02, 1e-4, &mut best);
        assert!((fit.beta_hat[0] - best.0).abs() < 1e-3, "{:?} vs {best:?}", fit.beta_hat);
        assert!((fit.beta_hat[1] - best.1).abs() < 1e-3);
        assert!(objective(fit.beta_hat[0], fit.beta_hat[1]) <= best.2 + 1e-10);
    }

    #[test]
    fn lasso_satisfies_kkt_conditions() {
        let batch = &exp1_batches(1, 40, 9)[0];
        for lambda in [0.01, 0.1, 0.5] {
            let fit = lasso_fit(batch, lambda).unwrap();
            assert!(
                lasso_kkt_residual(batch, &fit.beta_hat, lambda) <= 1e-6,
                "KKT violated at lambda {lambda}"
            );
        }
    }

    #[test]
    fn cv_single_element_grid_returns_it() {
        let batch = small_batch();
        assert_eq!(cv_select_lambda(&batch, 2, &[0.37]).unwrap(), 0.37);
    }

    #[test]
    fn cv_zero_noise_selects_exact_fit() {
        let spec = LinearModelSpec {
            beta: vec![1.5, -0.5],
            noise_var: 0.0,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.3).unwrap(),
            mean_mode: MeanMode::Identical,
        };
        let batch = &gen_linear_batches(&spec, 1, 30, 4).unwrap()[0];
        let grid = [0.5, 0.1, 0.01, 0.0];
        let chosen = cv_select_lambda(batch, 5, &grid).unwrap();
        // The unpenalized fit interpolates, so nothing with positive held-out
        // error may win; only exact-zero CV error survives the tie rule.
        let fit = lasso_fit(batch, chosen).unwrap();
        let fitted = batch.x.matvec(&fit.beta_hat);
        assert!(max_abs_diff(&fitted, &batch.y) < 1e-6);
    }

    #[test]
    fn cv_rejects_more_folds_than_rows() {
        let batch = small_batch();
        assert!(cv_select_lambda(&batch, 6, &[0.1]).is_err());
    }

    #[test]
    fn cv_rejects_unsorted_grid() {
        let batch = small_batch();
        assert!(cv_select_lambda(&batch, 2, &[0.1, 0.5]).is_err());
    }

    #[test]
    fn cv_choice_matches_independent_reevaluation() {
        // Independent CV oracle: rebuild every fold fit from scratch via the
        // public pieces and re-score the whole curve.
        let batch = &exp1_batches(1, 200, 31)[0];
        let grid = lambda_grid(batch, 20);
        let folds = 5;
        let chosen = cv_select_lambda(batch, folds, &grid).unwrap();

        let assignment = cv_folds(batch.n_samples(), folds, batch.batch_id as u64);
        let mut curve = vec![0.0f64; grid.len()];
        for fold in 0..folds {
            let train: Vec<usize> =
                (0..batch.n_samples()).filter(|&i| assignment[i] != fold).collect();
            let test: Vec<usize> =
                (0..batch.n_samples()).filter(|&i| assignment[i] == fold).collect();
            let mut xt = Mat::zeros(train.len(), batch.n_features());
            let mut yt = Vec::new();
            for (o, &i) in train.iter().enumerate() {
                xt.row_mut(o).copy_from_slice(batch.x.row(i));
                yt.push(batch.y[i]);
            }
            let tb = DataBatch::new(xt, yt, 0).unwrap();
            for (gi, &lambda) in grid.iter().enumerate() {
                let fit = lasso_fit(&tb, lambda).unwrap();
                for &i in &test {
                    let e = batch.y[i] - dot(batch.x.row(i), &fit.beta_hat);
                    curve[gi] += e * e;
                }
            }
        }
        let oracle_idx =
            (0..grid.len()).min_by(|&a, &b| curve[a].partial_cmp(&curve[b]).unwrap()).unwrap();
        let chosen_idx = grid.iter().position(|&g| g == chosen).unwrap();
        assert!(
            (oracle_idx as i64 - chosen_idx as i64).abs() <= 1,
            "oracle picked index {oracle_idx}, implementation {chosen_idx}"
        );
    }

    #[test]
    fn ridge_zero_equals_ols_and_large_s_shrinks() {
        let batch = small_batch();
        let ols = ols_fit(&batch).unwrap();
        let r0 = ridge_fit(&batch, 0.0).unwrap();
        assert!(max_abs_diff(&ols.beta_hat, &r0.beta_hat) < 1e-10);

        let s = 1e12;
        let big = ridge_fit(&batch, s).unwrap();
        let xty = batch.x.tr_matvec(&batch.y);
        assert!(norm2(&big.beta_hat) <= norm2(&xty) / s + 1e-15);
    }

    #[test]
    fn ridge_matches_two_by_two_closed_form() {
        let batch = small_batch();
        let s = 0.7;
        let fit = ridge_fit(&batch, s).unwrap();
        // Direct 2×2 inversion oracle.
        let xtx = batch.x.gram(1.0);
        let (a, b, c, d) =
            (xtx[(0, 0)] + s, xtx[(0, 1)], xtx[(1, 0)], xtx[(1, 1)] + s);
        let det = a * d - b * c;
        let xty = batch.x.tr_matvec(&batch.y);
        let expect = [
            (d * xty[0] - b * xty[1]) / det,
            (-c * xty[0] + a * xty[1]) / det,
        ];
        assert!(max_abs_diff(&fit.beta_hat, &expect) < 1e-10);
    }

    #[test]
    fn ridge_is_continuous_in_s() {
        let batch = small_batch();
        let base = ridge_fit(&batch, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-4, 1e-6] {
            let nearby = ridge_fit(&batch, 1.0 + delta).unwrap();
            let gap = max_abs_diff(&base.beta_hat, &nearby.beta_hat);
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn hk_value_matches_direct_arithmetic() {
        let batch = &exp1_batches(1, 60, 8)[0];
        let s = hk_ridge_value(batch).unwrap();
        let ols = ols_fit(batch).unwrap();
        let fitted = batch.x.matvec(&ols.beta_hat);
        let rss: f64 =
            batch.y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
        let p = batch.n_features() as f64;
        let dof = (batch.n_samples() - batch.n_features()) as f64;
        let expect = p * (rss / dof) / dot(&ols.beta_hat, &ols.beta_hat);
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn hk_value_scales_with_noise_variance() {
        // Monte-Carlo over fresh noise draws: quadrupled variance roughly
        // quadruples the selected ridge value in expectation.
        let spec_lo = LinearModelSpec {
            beta: vec![2.0, 1.5, 1.0, 0.5, -2.0, 0.0],
            noise_var: 1.0,
            cov: CovarianceSpec::new(CovKind::Equicorrelated, 0.5).unwrap(),
            mean_mode: MeanMode::Identical,
        };
        let mut spec_hi = spec_lo.clone();
        spec_hi.noise_var = 4.0;
        let reps = 200;
        let mut mean_lo = 0.0;
        let mut mean_hi = 0.0;
        for rep in 0..reps {
            let b_lo = &gen_linear_batches(&spec_lo, 1, 80, 1000 + rep).unwrap()[0];
            let b_hi = &gen_linear_batches(&spec_hi, 1, 80, 1000 + rep).unwrap()[0];
            mean_lo += hk_ridge_value(b_lo).unwrap() / reps as f64;
            mean_hi += hk_ridge_value(b_hi).unwrap() / reps as f64;
        }
        let ratio = mean_hi / mean_lo;
        assert!((2.5..6.0).contains(&ratio), "scaling ratio {ratio}");
    }

    #[test]
    fn cv_ridge_single_and_tie_rules() {
        let batch = small_batch();
        assert_eq!(cv_select_ridge(&batch, 2, &[3.0]).unwrap(), 3.0);
        let spec = LinearModelSpec {
            beta: vec![1.0, -1.0],
            noise_var: 0.0,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.2).unwrap(),
            mean_mode: MeanMode::Identical,
        };
        let zb = &gen_linear_batches(&spec, 1, 40, 12).unwrap()[0];
        let chosen = cv_select_ridge(zb, 5, &[10.0, 1.0, 0.0]).unwrap();
        // Zero noise: the unpenalized fit interpolates.
        assert_eq!(chosen, 0.0);
    }

    #[test]
    fn cv_ridge_matches_independent_reevaluation() {
        let batch = &exp1_batches(1, 100, 21)[0];
        let grid = ridge_grid(batch, 12);
        let chosen = cv_select_ridge(batch, 5, &grid).unwrap();
        let assignment = cv_folds(batch.n_samples(), 5, batch.batch_id as u64);
        let mut curve = vec![0.0f64; grid.len()];
        for fold in 0..5 {
            let train: Vec<usize> =
                (0..batch.n_samples()).filter(|&i| assignment[i] != fold).collect();
            let mut xt = Mat::zeros(train.len(), batch.n_features());
            let mut yt = Vec::new();
            for (o, &i) in train.iter().enumerate() {
                xt.row_mut(o).copy_from_slice(batch.x.row(i));
                yt.push(batch.y[i]);
            }
            let tb = DataBatch::new(xt, yt, 0).unwrap();
            for (gi, &s) in grid.iter().enumerate() {
                let fit = ridge_fit(&tb, s).unwrap();
                for i in 0..batch.n_samples() {
                    if assignment[i] == fold {
                        let e = batch.y[i] - dot(batch.x.row(i), &fit.beta_hat);
                        curve[gi] += e * e;
                    }
                }
            }
        }
        let oracle_idx =
            (0..grid.len()).min_by(|&a, &b| curve[a].partial_cmp(&curve[b]).unwrap()).unwrap();
        let chosen_idx = grid.iter().position(|&g| g == chosen).unwrap();
        assert!((oracle_idx as i64 - chosen_idx as i64).abs() <= 1);
    }

    #[test]
    fn pce_with_full_basis_is_ols() {
        let batch = &exp1_batches(1, 50, 14)[0];
        let p = batch.n_features();
        let fit = pce_fit(batch, &Mat::identity(p)).unwrap();
        let ols = ols_fit(batch).unwrap();
        assert!(max_abs_diff(&fit.beta_hat, &ols.beta_hat) < 1e-8);
    }

    #[test]
    fn pce_reproduces_y_in_column_space_with_zero_noise() {
        // y built inside span(X P_r): the projected regression is exact.
        let batch0 = small_batch();
        let p_r = Mat::from_rows(&[&[1.0], &[0.0]]);
        let z = batch0.x.matmul(&p_r);
        let y: Vec<f64> = (0..z.n_rows()).map(|i| 2.5 * z[(i, 0)]).collect();
        let batch = DataBatch::new(batch0.x.clone(), y.clone(), 0).unwrap();
        let fit = pce_fit(&batch, &p_r).unwrap();
        let fitted = batch.x.matvec(&fit.beta_hat);
        assert!(max_abs_diff(&fitted, &y) < 1e-10);
    }

    #[test]
    fn pce_rank_one_matches_scalar_regression() {
        let batch = small_batch();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        let p_r = Mat::from_rows(&[&[inv_sqrt2], &[inv_sqrt2]]);
        let fit = pce_fit(&batch, &p_r).unwrap();
        // Scalar oracle: regress y on the single score z.
        let z: Vec<f64> =
            (0..batch.n_samples()).map(|i| inv_sqrt2 * (batch.x[(i, 0)] + batch.x[(i, 1)])).collect();
        let gamma = dot(&z, &batch.y) / dot(&z, &z);
        let expect = [gamma * inv_sqrt2, gamma * inv_sqrt2];
        assert!(max_abs_diff(&fit.beta_hat, &expect) < 1e-12);
    }

    #[test]
    fn pce_residuals_orthogonal_to_projected_design() {
        let batch = &exp1_batches(1, 50, 15)[0];
        let p = batch.n_features();
        let basis = Mat::from_fn(p, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let fit = pce_fit(batch, &basis).unwrap();
        let fitted = batch.x.matvec(&fit.beta_hat);
        let residual: Vec<f64> = batch.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let z = batch.x.matmul(&basis);
        let ztr = z.tr_matvec(&residual);
        assert!(max_abs(&ztr) < 1e-8);
    }

    #[test]
    fn pce_rejects_non_orthonormal_basis() {
        let batch = small_batch();
        let p_r = Mat::from_rows(&[&[1.0], &[1.0]]);
        assert!(pce_fit(&batch, &p_r).is_err());
    }

    #[test]
    fn nls_on_linear_mean_is_ols_in_one_iteration() {
        let batch = &exp1_batches(1, 60, 5)[0];
        let p = batch.n_features();
        let fit = nls_fit(batch, &LinearMean, &vec![0.0; p], 1e-10, 25).unwrap();
        let ols = ols_fit(batch).unwrap();
        assert!(max_abs_diff(&fit.beta_hat, &ols.beta_hat) < 1e-8);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn nls_recovers_truth_on_zero_noise_data() {
        let spec = NonlinearModelSpec {
            beta: vec![2.0, 1.0, -2.0, 0.0],
            noise_var: 0.0,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.5).unwrap(),
        };
        let batch = &gen_nonlinear_batches(&spec, 1, 50, 77).unwrap()[0];
        let init = [1.9, 1.05, -1.95, 0.05];
        let fit = nls_fit(batch, &ShiftedSquare::default(), &init, 1e-10, 50).unwrap();
        assert!(max_abs_diff(&fit.beta_hat, &spec.beta) < 1e-6);
    }

    #[test]
    fn nls_noisy_fit_beats_truth_and_matches_grid_slice() {
        let spec = NonlinearModelSpec {
            beta: vec![2.0, 1.0, -2.0, 0.0],
            noise_var: 1.0,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.5).unwrap(),
        };
        let batch = &gen_nonlinear_batches(&spec, 1, 80, 13).unwrap()[0];
        let model = ShiftedSquare::default();
        let fit = nls_fit(batch, &model, &[0.0; 4], 1e-9, 60).unwrap();
        let objective = |b: &[f64]| -> f64 {
            (0..batch.n_samples())
                .map(|i| {
                    let e = batch.y[i] - model.value(batch.x.row(i), b);
                    e * e
                })
                .sum()
        };
        assert!(objective(&fit.beta_hat) <= objective(&spec.beta) + 1e-9);

        // Grid-slice oracle over the first two coordinates.
        let mut best = (fit.beta_hat[0], fit.beta_hat[1], f64::INFINITY);
        let mut probe = fit.beta_hat.clone();
        for i in -40..=40 {
            for j in -40..=40 {
                probe[0] = fit.beta_hat[0] + i as f64 * 5e-4;
                probe[1] = fit.beta_hat[1] + j as f64 * 5e-4;
                let v = objective(&probe);
                if v < best.2 {
                    best = (probe[0], probe[1], v);
                }
            }
        }
        assert!((best.0 - fit.beta_hat[0]).abs() < 1e-3);
        assert!((best.1 - fit.beta_hat[1]).abs() < 1e-3);
    }

    #[test]
    fn pooled_ols_matches_single_batch_fit_when_equal() {
        let batch = small_batch();
        let pooled = ols_fit_pooled(std::slice::from_ref(&batch)).unwrap();
        let single = ols_fit(&batch).unwrap();
        assert!(max_abs_diff(&pooled.beta_hat, &single.beta_hat) < 1e-14);
    }

    #[test]
    fn pooled_ols_matches_independent_solver() {
        let batches = exp1_batches(4, 30, 44);
        let pooled = ols_fit_pooled(&batches).unwrap();
        // Independent route: accumulate raw normal equations batch by batch.
        let p = batches[0].n_features();
        let mut xtx = Mat::zeros(p, p);
        let mut xty = vec![0.0; p];
        for b in &batches {
            xtx.add_assign(&b.x.gram(1.0));
            axpy(&mut xty, 1.0, &b.x.tr_matvec(&b.y));
        }
        let expect = xtx.solve_spd(&xty).unwrap();
        assert!(max_abs_diff(&pooled.beta_hat, &expect) < 1e-8);
    }
}
