//! Residual adjustment and projected pro-forma records.
//!
//! A biased per-batch estimate `β̂_j` is corrected by
//! `β̂_j^RA = β̂_j + (1/m) M_j Xᵀ(y − Xβ̂_j)` for an approximate Gram
//! inverse `M_j`. Projecting that identity with a random vector `η_j`
//! yields one scalar observation `z_j = U_jᵀβ + ε_j` of a synthetic linear
//! regression whose coefficient is the true parameter; those `(z, U, w)`
//! triples are all the aggregation side ever sees.

use crate::datagen::{domain, substream, DataBatch};
use crate::error::{RaceError, Result};
use crate::linalg::{axpy, dot, norm2, Mat};
use crate::local::LocalFit;
use crate::model::RegressionModel;
use rand::Rng;
use rand_distr::StandardNormal;

/// Distribution of the projection vector `η`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionDist {
    /// I.i.d. components `N(0, 1/p)`.
    GaussianInvP,
    /// Gaussian draw normalized to `‖η‖₂ = 1`.
    UnitSphere,
}

/// Projection plan: distribution, number of repetitions, and the seed that
/// makes every `(batch, draw)` vector reproducible.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSpec {
    pub dist: ProjectionDist,
    pub repetitions: usize,
    pub seed: u64,
}

impl ProjectionSpec {
    pub fn new(dist: ProjectionDist, repetitions: usize, seed: u64) -> Result<Self> {
        if repetitions == 0 {
            return Err(RaceError::InvalidParam("projection repetitions must be ≥ 1".into()));
        }
        Ok(ProjectionSpec { dist, repetitions, seed })
    }
}

/// Weighting rule for the aggregated least squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `w = [ηᵀ Θ̂ (S + k₂I) Θ̂ η]⁻¹`, the regularized inverse variance.
    RidgeSigma,
    /// `w = 1` for every record.
    Unit,
}

/// Ridge-form residual-adjustment parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdjustmentSpec {
    pub k1: f64,
    pub k2: f64,
    pub weight_mode: WeightMode,
}

impl AdjustmentSpec {
    pub fn new(k1: f64, k2: f64, weight_mode: WeightMode) -> Result<Self> {
        if !(k1 > 0.0) || !(k2 > 0.0) {
            return Err(RaceError::InvalidParam(format!(
                "ridge constants must be positive (k1 = {k1}, k2 = {k2})"
            )));
        }
        Ok(AdjustmentSpec { k1, k2, weight_mode })
    }
}

impl Default for AdjustmentSpec {
    fn default() -> Self {
        AdjustmentSpec { k1: 0.1, k2: 0.1, weight_mode: WeightMode::RidgeSigma }
    }
}

/// One pro-forma observation. Never stores raw rows.
#[derive(Debug, Clone)]
pub struct ProjectedRecord {
    pub z: f64,
    pub u: Vec<f64>,
    pub w: f64,
    pub batch_id: usize,
    pub draw_id: usize,
}

impl ProjectedRecord {
    fn validated(self) -> Result<Self> {
        if !(self.w > 0.0) || !self.w.is_finite() {
            return Err(RaceError::NonPositiveWeight(format!(
                "record (batch {}, draw {}) has weight {}",
                self.batch_id, self.draw_id, self.w
            )));
        }
        if !self.z.is_finite() || self.u.iter().any(|v| !v.is_finite()) {
            return Err(RaceError::InvalidParam(format!(
                "record (batch {}, draw {}) contains non-finite values",
                self.batch_id, self.draw_id
            )));
        }
        Ok(self)
    }
}

/// `(S + k₁I)⁻¹` for a symmetric positive-semidefinite `S = XᵀX/m`.
pub fn ridge_inverse(gram: &Mat, k1: f64) -> Mat {
    assert!(k1 > 0.0, "ridge_inverse requires k1 > 0");
    gram.add_scaled_identity(k1)
        .inv_spd()
        .expect("S + k1·I is positive definite for PSD S and k1 > 0")
}

/// Residual-adjustment correction `β̂ + (1/m)·M·Xᵀ(y − Xβ̂)` from raw rows.
pub fn residual_adjust(batch: &DataBatch, fit: &LocalFit, m_mat: &Mat) -> Vec<f64> {
    let fitted = batch.x.matvec(&fit.beta_hat);
    let residual: Vec<f64> = batch.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let xtr = batch.x.tr_matvec(&residual);
    let mut correction = m_mat.matvec(&xtr);
    let m = batch.n_samples() as f64;
    for c in &mut correction {
        *c /= m;
    }
    let mut out = fit.beta_hat.clone();
    axpy(&mut out, 1.0, &correction);
    out
}

/// Compressed view of one batch: exactly the scalars allowed to leave a
/// worker in the linear pipeline.
#[derive(Debug, Clone)]
pub struct LinearSummary {
    /// `XᵀX / m`.
    pub gram: Mat,
    /// `Xᵀy / m`.
    pub xty_over_m: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub n_samples: usize,
    pub batch_id: usize,
}

impl LinearSummary {
    pub fn new(batch: &DataBatch, fit: &LocalFit) -> Self {
        LinearSummary {
            gram: fit.gram.clone(),
            xty_over_m: batch.xty_over_m(),
            beta_hat: fit.beta_hat.clone(),
            n_samples: batch.n_samples(),
            batch_id: batch.batch_id,
        }
    }
}

/// Residual adjustment computed purely from a compressed summary:
/// `β̂ + M(Xᵀy/m − Sβ̂)`.
pub fn residual_adjust_summary(summary: &LinearSummary, m_mat: &Mat) -> Vec<f64> {
    let s_beta = summary.gram.matvec(&summary.beta_hat);
    let moment: Vec<f64> =
        summary.xty_over_m.iter().zip(&s_beta).map(|(b, s)| b - s).collect();
    let mut out = summary.beta_hat.clone();
    axpy(&mut out, 1.0, &m_mat.matvec(&moment));
    out
}

/// Draws the projection vector for `(batch_id, draw_id)`; a pure function
/// of the spec's seed and the two counters.
pub fn draw_projection(p: usize, spec: &ProjectionSpec, batch_id: usize, draw_id: usize) -> Vec<f64> {
    assert!(p >= 1, "projection dimension must be ≥ 1");
    let mut rng = substream(spec.seed, domain::PROJECTION, batch_id as u64, draw_id as u64);
    loop {
        let mut eta: Vec<f64> =
            (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        match spec.dist {
            ProjectionDist::GaussianInvP => {
                let scale = 1.0 / (p as f64).sqrt();
                for e in &mut eta {
                    *e *= scale;
                }
                return eta;
            }
            ProjectionDist::UnitSphere => {
                let norm = norm2(&eta);
                if norm > 0.0 {
                    for e in &mut eta {
                        *e /= norm;
                    }
                    return eta;
                }
                // Resample on the measure-zero degenerate draw.
            }
        }
    }
}

/// `σ²` in the weight form `ηᵀ Θ̂ (S + k₂I) Θ̂ η`.
pub fn sigma_sq_weight_form(gram: &Mat, theta: &Mat, k2: f64, eta: &[f64]) -> f64 {
    let v = theta.matvec(eta);
    gram.quad_form(&v, &v) + k2 * dot(&v, &v)
}

/// `σ²` in the exact error-variance form `ηᵀ Θ̂ S Θ̂ η`; the conditional
/// variance of the record error is `(σ_ε²/m)·σ²` with this value.
pub fn sigma_sq_exact(gram: &Mat, theta: &Mat, eta: &[f64]) -> f64 {
    let v = theta.matvec(eta);
    gram.quad_form(&v, &v)
}

/// Builds one projected record from a compressed summary and a
/// precomputed adjustment matrix `theta`.
pub fn project_linear_summary(
    summary: &LinearSummary,
    theta: &Mat,
    adj: &AdjustmentSpec,
    eta: &[f64],
    draw_id: usize,
) -> Result<ProjectedRecord> {
    let beta_ra = residual_adjust_summary(summary, theta);
    let t = theta.matvec(eta);
    let u = summary.gram.matvec(&t);
    let shift: Vec<f64> =
        beta_ra.iter().zip(&summary.beta_hat).map(|(a, b)| a - b).collect();
    let z = dot(eta, &shift) + dot(&u, &summary.beta_hat);
    let w = match adj.weight_mode {
        WeightMode::Unit => 1.0,
        WeightMode::RidgeSigma => {
            let sigma_sq = sigma_sq_weight_form(&summary.gram, theta, adj.k2, eta);
            if !(sigma_sq > 0.0) {
                return Err(RaceError::NonPositiveWeight(format!(
                    "σ² = {sigma_sq} for batch {} draw {draw_id}",
                    summary.batch_id
                )));
            }
            1.0 / sigma_sq
        }
    };
    ProjectedRecord { z, u, w, batch_id: summary.batch_id, draw_id }.validated()
}

/// Convenience wrapper: summarize the batch, take `Θ̂ = (S + k₁I)⁻¹`, and
/// project with `eta`.
pub fn project_linear(
    batch: &DataBatch,
    fit: &LocalFit,
    adj: &AdjustmentSpec,
    eta: &[f64],
    draw_id: usize,
) -> Result<ProjectedRecord> {
    let summary = LinearSummary::new(batch, fit);
    let theta = ridge_inverse(&summary.gram, adj.k1);
    project_linear_summary(&summary, &theta, adj, eta, draw_id)
}

/// `H = M̂ ḟᵀ(X, β̂)` with `M̂ = (ḟᵀḟ/m + k₁I)⁻¹`: the nonlinear
/// residual-adjustment rows (`p×m`).
pub fn build_h(batch: &DataBatch, fit: &LocalFit, model: &dyn RegressionModel, k1: f64) -> Mat {
    let jac = model.jacobian_rows(&batch.x, &fit.beta_hat);
    let info = jac.gram(batch.n_samples() as f64);
    let m_hat = ridge_inverse(&info, k1);
    m_hat.matmul(&jac.transpose())
}

/// Nonlinear residual adjustment `β̂ + (1/m)·H·(y − f(X, β̂))`.
pub fn residual_adjust_nonlinear(
    batch: &DataBatch,
    fit: &LocalFit,
    h: &Mat,
    model: &dyn RegressionModel,
) -> Vec<f64> {
    let f = model.value_rows(&batch.x, &fit.beta_hat);
    let residual: Vec<f64> = batch.y.iter().zip(&f).map(|(y, v)| y - v).collect();
    let mut correction = h.matvec(&residual);
    let m = batch.n_samples() as f64;
    for c in &mut correction {
        *c /= m;
    }
    let mut out = fit.beta_hat.clone();
    axpy(&mut out, 1.0, &correction);
    out
}

/// A nonlinear pro-forma observation: only the response and weight are
/// fixed; the regression mean is `ηᵀ(1/m)H f(X, β)` evaluated per solver
/// step.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearRecord {
    pub z: f64,
    pub w: f64,
    pub batch_id: usize,
    pub draw_id: usize,
}

/// Projects the nonlinear residual-adjustment identity with `eta`:
/// `z = ηᵀ(β̂^RA − β̂ + (1/m)H f(X, β̂))` and `w = [(1/m)ηᵀHHᵀη]⁻¹`.
pub fn project_nonlinear(
    batch: &DataBatch,
    fit: &LocalFit,
    h: &Mat,
    model: &dyn RegressionModel,
    eta: &[f64],
    draw_id: usize,
) -> Result<NonlinearRecord> {
    let m = batch.n_samples() as f64;
    let beta_ra = residual_adjust_nonlinear(batch, fit, h, model);
    let f = model.value_rows(&batch.x, &fit.beta_hat);
    let mut hf = h.matvec(&f);
    for v in &mut hf {
        *v /= m;
    }
    let combined: Vec<f64> = beta_ra
        .iter()
        .zip(&fit.beta_hat)
        .zip(&hf)
        .map(|((ra, b), hfv)| ra - b + hfv)
        .collect();
    let z = dot(eta, &combined);
    let ht_eta = h.tr_matvec(eta);
    let sigma_sq = dot(&ht_eta, &ht_eta) / m;
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(RaceError::NonPositiveWeight(format!(
            "nonlinear σ² = {sigma_sq} for batch {} draw {draw_id}",
            batch.batch_id
        )));
    }
    Ok(NonlinearRecord { z, w: 1.0 / sigma_sq, batch_id: batch.batch_id, draw_id })
}
