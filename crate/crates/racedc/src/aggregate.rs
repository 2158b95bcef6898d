//! Global estimation over projected records: the closed-form weighted
//! least-squares solve for linear models, thresholding, projection-
//! repetition averaging, and the compressed Gauss-Newton loop for
//! nonlinear models.

use crate::datagen::DataBatch;
use crate::error::{RaceError, Result};
use crate::linalg::{dot, max_abs, norm2, CompensatedMat, CompensatedSum, CompensatedVec, Mat};
use crate::local::LocalFit;
use crate::model::RegressionModel;
use crate::remodel::{
    build_h, draw_projection, project_linear_summary, ridge_inverse, AdjustmentSpec,
    LinearSummary, ProjectedRecord, ProjectionSpec,
};

/// Condition-number ceiling beyond which an aggregated system counts as
/// singular.
pub const CONDITION_CEILING: f64 = 1e12;

/// Fraction of projection draws allowed to fail the aggregation condition
/// before the whole estimate is abandoned.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

/// An aggregated estimate with its provenance.
#[derive(Debug, Clone)]
pub struct GlobalEstimate {
    pub beta: Vec<f64>,
    pub method: String,
    /// Projection repetitions that contributed.
    pub r_used: usize,
    /// Outer iterations (0 for closed-form solves).
    pub iterations: usize,
    /// Spectral condition number of the aggregated system (averaged over
    /// repetitions when repetitions are solved separately).
    pub condition_number: f64,
    /// Whether a stabilizing jitter was added to the aggregated matrix.
    pub jittered: bool,
}

/// How repeated projections combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Solve once per repetition and average the estimates.
    Average,
    /// Solve a single system over all `N·R` records. Not the reference
    /// combination rule; kept as a labeled variant.
    Stacked,
}

fn solve_weighted_system(
    records: &[&ProjectedRecord],
    jitter: bool,
    method: &str,
) -> Result<GlobalEstimate> {
    let p = records
        .first()
        .ok_or_else(|| RaceError::InvalidParam("no records to aggregate".into()))?
        .u
        .len();
    if records.len() < p {
        return Err(RaceError::InvalidParam(format!(
            "{} records cannot identify {} parameters",
            records.len(),
            p
        )));
    }
    // Order-invariant accumulation: records may arrive from any thread.
    let mut lhs_acc = CompensatedMat::zeros(p);
    let mut rhs_acc = CompensatedVec::zeros(p);
    for rec in records {
        debug_assert_eq!(rec.u.len(), p);
        lhs_acc.add_outer(rec.w, &rec.u);
        rhs_acc.add_scaled(rec.w * rec.z, &rec.u);
    }
    let mut lhs = lhs_acc.value();
    let rhs = rhs_acc.value();
    let mut condition = lhs.sym_condition();
    let mut jittered = false;
    if !(condition < CONDITION_CEILING) {
        if !jitter {
            return Err(RaceError::AggregationCondition {
                context: "weighted record outer-product matrix".into(),
                condition,
            });
        }
        lhs = lhs.add_scaled_identity(1e-10 * lhs.trace() / p as f64);
        condition = lhs.sym_condition();
        jittered = true;
        if !(condition < f64::INFINITY) {
            return Err(RaceError::AggregationCondition {
                context: "weighted record outer-product matrix (after jitter)".into(),
                condition,
            });
        }
    }
    let beta = lhs.solve_spd(&rhs).ok_or(RaceError::AggregationCondition {
        context: "weighted record outer-product matrix".into(),
        condition,
    })?;
    Ok(GlobalEstimate {
        beta,
        method: method.to_string(),
        r_used: 1,
        iterations: 0,
        condition_number: condition,
        jittered,
    })
}

/// Weighted least squares over projected records:
/// `β̃ = (Σ w U Uᵀ)⁻¹ Σ w U z`.
///
/// Fails when the aggregated matrix has condition number above
/// [`CONDITION_CEILING`].
pub fn wls_solve(records: &[ProjectedRecord]) -> Result<GlobalEstimate> {
    let refs: Vec<&ProjectedRecord> = records.iter().collect();
    solve_weighted_system(&refs, false, "wls")
}

/// [`wls_solve`] with a stabilizing jitter `1e-10·tr/p·I` added when the
/// plain system fails the condition ceiling; such estimates are marked.
pub fn wls_solve_jittered(records: &[ProjectedRecord]) -> Result<GlobalEstimate> {
    let refs: Vec<&ProjectedRecord> = records.iter().collect();
    solve_weighted_system(&refs, true, "wls")
}

/// Thresholding rule for sparsifying a dense aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Zero components with `|β̃ᵏ| ≤ t`.
    Hard,
    /// `sign(β̃ᵏ)·max(|β̃ᵏ| − t, 0)`.
    Soft,
}

/// Applies hard or soft thresholding componentwise.
pub fn threshold(estimate: &GlobalEstimate, t: f64, mode: ThresholdMode) -> GlobalEstimate {
    assert!(t >= 0.0, "threshold must be non-negative");
    let beta = estimate
        .beta
        .iter()
        .map(|&b| match mode {
            ThresholdMode::Hard => {
                if b.abs() > t {
                    b
                } else {
                    0.0
                }
            }
            ThresholdMode::Soft => b.signum() * (b.abs() - t).max(0.0),
        })
        .collect();
    GlobalEstimate { beta, ..estimate.clone() }
}

/// Default sparsification level `√(log p / n)`.
pub fn default_threshold(p: usize, n: usize) -> f64 {
    ((p as f64).ln() / n as f64).sqrt()
}

pub(crate) fn race_linear_from_summaries(
    summaries: &[LinearSummary],
    adj: &AdjustmentSpec,
    proj: &ProjectionSpec,
    combine: CombineMode,
    jitter: bool,
) -> Result<GlobalEstimate> {
    if summaries.is_empty() {
        return Err(RaceError::InvalidParam("no batches to aggregate".into()));
    }
    let p = summaries[0].beta_hat.len();
    let thetas: Vec<Mat> =
        summaries.iter().map(|s| ridge_inverse(&s.gram, adj.k1)).collect();
    let build_draw = |draw: usize| -> Result<Vec<ProjectedRecord>> {
        summaries
            .iter()
            .zip(&thetas)
            .map(|(s, theta)| {
                let eta = draw_projection(p, proj, s.batch_id, draw);
                project_linear_summary(s, theta, adj, &eta, draw)
            })
            .collect()
    };
    match combine {
        CombineMode::Stacked => {
            let mut all = Vec::with_capacity(summaries.len() * proj.repetitions);
            for draw in 0..proj.repetitions {
                all.extend(build_draw(draw)?);
            }
            let refs: Vec<&ProjectedRecord> = all.iter().collect();
            let mut est = solve_weighted_system(&refs, jitter, "race_linear_stacked")?;
            est.r_used = proj.repetitions;
            Ok(est)
        }
        CombineMode::Average => {
            let mut acc = CompensatedVec::zeros(p);
            let mut cond_acc = CompensatedSum::default();
            let mut used = 0usize;
            let mut skipped = 0usize;
            let mut jittered_any = false;
            for draw in 0..proj.repetitions {
                let records = build_draw(draw)?;
                let refs: Vec<&ProjectedRecord> = records.iter().collect();
                match solve_weighted_system(&refs, jitter, "race_linear") {
                    Ok(est) => {
                        acc.add_scaled(1.0, &est.beta);
                        cond_acc.add(est.condition_number);
                        jittered_any |= est.jittered;
                        used += 1;
                    }
                    Err(RaceError::AggregationCondition { .. }) => skipped += 1,
                    Err(other) => return Err(other),
                }
            }
            let total = proj.repetitions;
            if used == 0 || (skipped as f64) > MAX_SKIP_FRACTION * total as f64 {
                return Err(RaceError::TooManySkips { skipped, total });
            }
            let mut beta = acc.value();
            for b in &mut beta {
                *b /= used as f64;
            }
            Ok(GlobalEstimate {
                beta,
                method: "race_linear".into(),
                r_used: used,
                iterations: 0,
                condition_number: cond_acc.value() / used as f64,
                jittered: jittered_any,
            })
        }
    }
}

/// Globally bias-corrected linear estimate: residual-adjust every batch,
/// project `R` times, solve each repetition by weighted least squares, and
/// average the repetitions.
pub fn race_linear(
    batches: &[DataBatch],
    fits: &[LocalFit],
    adj: &AdjustmentSpec,
    proj: &ProjectionSpec,
) -> Result<GlobalEstimate> {
    race_linear_with(batches, fits, adj, proj, CombineMode::Average, false)
}

/// [`race_linear`] with an explicit combination rule and jitter policy.
pub fn race_linear_with(
    batches: &[DataBatch],
    fits: &[LocalFit],
    adj: &AdjustmentSpec,
    proj: &ProjectionSpec,
    combine: CombineMode,
    jitter: bool,
) -> Result<GlobalEstimate> {
    if batches.len() != fits.len() {
        return Err(RaceError::InvalidParam("one fit per batch required".into()));
    }
    let summaries: Vec<LinearSummary> =
        batches.iter().zip(fits).map(|(b, f)| LinearSummary::new(b, f)).collect();
    race_linear_from_summaries(&summaries, adj, proj, combine, jitter)
}

// ---------------------------------------------------------------------------
// Nonlinear pipeline
// ---------------------------------------------------------------------------

/// Static per-batch quantities shipped once: `(1/m)H y`, `(1/m)H Hᵀ`, and
/// the local estimate.
#[derive(Debug, Clone)]
pub struct NlSetup {
    pub hy_over_m: Vec<f64>,
    pub k_mat: Mat,
    pub beta_hat: Vec<f64>,
    pub batch_id: usize,
}

/// Per-round per-batch quantities at the current iterate `β`:
/// `g = (1/m)H f(X, β)` and `D = (1/m)H ḟ(X, β)`.
#[derive(Debug, Clone)]
pub struct NlRoundData {
    pub g: Vec<f64>,
    pub d_mat: Mat,
}

/// Worker-side state for the nonlinear rounds; owns the `p×m` adjustment
/// rows, which never leave the worker.
pub struct NlWorker<'a> {
    batch: &'a DataBatch,
    model: &'a dyn RegressionModel,
    h: Mat,
}

impl<'a> NlWorker<'a> {
    pub fn new(
        batch: &'a DataBatch,
        fit: &LocalFit,
        model: &'a dyn RegressionModel,
        k1: f64,
    ) -> Self {
        let h = build_h(batch, fit, model, k1);
        NlWorker { batch, model, h }
    }

    pub fn setup(&self, fit: &LocalFit) -> NlSetup {
        let m = self.batch.n_samples() as f64;
        let mut hy = self.h.matvec(&self.batch.y);
        for v in &mut hy {
            *v /= m;
        }
        let k_mat = self.h.matmul(&self.h.transpose()).scaled(1.0 / m);
        NlSetup {
            hy_over_m: hy,
            k_mat,
            beta_hat: fit.beta_hat.clone(),
            batch_id: self.batch.batch_id,
        }
    }

    pub fn round(&self, beta: &[f64]) -> NlRoundData {
        let m = self.batch.n_samples() as f64;
        let f = self.model.value_rows(&self.batch.x, beta);
        let mut g = self.h.matvec(&f);
        for v in &mut g {
            *v /= m;
        }
        let jac = self.model.jacobian_rows(&self.batch.x, beta);
        let d_mat = self.h.matmul(&jac).scaled(1.0 / m);
        NlRoundData { g, d_mat }
    }
}

/// Transport abstraction over the per-round exchange, so the direct library
/// path and the message-passing simulator run the identical solver.
pub(crate) trait NlTransport {
    fn setup(&mut self) -> Result<Vec<NlSetup>>;
    fn round(&mut self, beta: &[f64], round: usize) -> Result<Vec<NlRoundData>>;
}

struct DirectTransport<'a> {
    workers: Vec<NlWorker<'a>>,
    fits: &'a [LocalFit],
}

impl NlTransport for DirectTransport<'_> {
    fn setup(&mut self) -> Result<Vec<NlSetup>> {
        Ok(self.workers.iter().zip(self.fits).map(|(w, f)| w.setup(f)).collect())
    }

    fn round(&mut self, beta: &[f64], _round: usize) -> Result<Vec<NlRoundData>> {
        Ok(self.workers.iter().map(|w| w.round(beta)).collect())
    }
}

/// Coordinator-side constants derived from the setups: projections, record
/// responses `z = ηᵀ(1/m)Hy`, and weights `w = [ηᵀ(1/m)HHᵀη]⁻¹`.
pub(crate) struct NlCoordinator {
    pub eta: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub init: Vec<f64>,
}

impl NlCoordinator {
    pub(crate) fn new(
        setups: &[NlSetup],
        proj: &ProjectionSpec,
        init_override: Option<&[f64]>,
    ) -> Result<Self> {
        let p = setups
            .first()
            .ok_or_else(|| RaceError::InvalidParam("no batches".into()))?
            .beta_hat
            .len();
        let mut eta = Vec::with_capacity(setups.len());
        let mut z = Vec::with_capacity(setups.len());
        let mut w = Vec::with_capacity(setups.len());
        for s in setups {
            let mut etas_j = Vec::with_capacity(proj.repetitions);
            let mut z_j = Vec::with_capacity(proj.repetitions);
            let mut w_j = Vec::with_capacity(proj.repetitions);
            for draw in 0..proj.repetitions {
                let e = draw_projection(p, proj, s.batch_id, draw);
                let sigma_sq = s.k_mat.quad_form(&e, &e);
                if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
                    return Err(RaceError::NonPositiveWeight(format!(
                        "nonlinear σ² = {sigma_sq} for batch {} draw {draw}",
                        s.batch_id
                    )));
                }
                z_j.push(dot(&e, &s.hy_over_m));
                w_j.push(1.0 / sigma_sq);
                etas_j.push(e);
            }
            eta.push(etas_j);
            z.push(z_j);
            w.push(w_j);
        }
        let init = match init_override {
            Some(b) => b.to_vec(),
            None => setups[0].beta_hat.clone(),
        };
        if init.len() != p || init.iter().any(|v| !v.is_finite()) {
            return Err(RaceError::InvalidParam("initial value must be a finite p-vector".into()));
        }
        Ok(NlCoordinator { eta, z, w, init })
    }

    /// Weighted objective `Σ w (z − ηᵀg)²` at the iterate the round data
    /// was computed for.
    pub(crate) fn objective(&self, rounds: &[NlRoundData]) -> f64 {
        let mut q = CompensatedSum::default();
        for (j, data) in rounds.iter().enumerate() {
            for r in 0..self.eta[j].len() {
                let resid = self.z[j][r] - dot(&self.eta[j][r], &data.g);
                q.add(self.w[j][r] * resid * resid);
            }
        }
        q.value()
    }

    /// One Gauss-Newton step: solve `(Σ w W Wᵀ) Δ = Σ w W (z − ηᵀg)` with
    /// `W = Dᵀη`. Returns the step and the system's condition number.
    pub(crate) fn gauss_newton_step(&self, rounds: &[NlRoundData]) -> Result<(Vec<f64>, f64)> {
        let p = rounds[0].g.len();
        let mut lhs = CompensatedMat::zeros(p);
        let mut rhs = CompensatedVec::zeros(p);
        for (j, data) in rounds.iter().enumerate() {
            for r in 0..self.eta[j].len() {
                let eta = &self.eta[j][r];
                let w_jr = self.w[j][r];
                let big_w = data.d_mat.tr_matvec(eta);
                let resid = self.z[j][r] - dot(eta, &data.g);
                lhs.add_outer(w_jr, &big_w);
                rhs.add_scaled(w_jr * resid, &big_w);
            }
        }
        let a = lhs.value();
        let condition = a.sym_condition();
        if !(condition < CONDITION_CEILING) {
            return Err(RaceError::AggregationCondition {
                context: "nonlinear weighted Jacobian outer-product matrix".into(),
                condition,
            });
        }
        let step = a.solve_spd(&rhs.value()).ok_or(RaceError::AggregationCondition {
            context: "nonlinear weighted Jacobian outer-product matrix".into(),
            condition,
        })?;
        Ok((step, condition))
    }

    /// Norm of the estimating-equation residual
    /// `(1/(N·R)) Σ w W (z − ηᵀg)` at the round data's iterate.
    pub(crate) fn estimating_equation_norm(&self, rounds: &[NlRoundData]) -> f64 {
        let p = rounds[0].g.len();
        let mut acc = CompensatedVec::zeros(p);
        let mut count = 0usize;
        for (j, data) in rounds.iter().enumerate() {
            for r in 0..self.eta[j].len() {
                let eta = &self.eta[j][r];
                let big_w = data.d_mat.tr_matvec(eta);
                let resid = self.z[j][r] - dot(eta, &data.g);
                acc.add_scaled(self.w[j][r] * resid, &big_w);
                count += 1;
            }
        }
        let mut v = acc.value();
        for e in &mut v {
            *e /= count as f64;
        }
        norm2(&v)
    }
}

const MAX_RETREATS: usize = 8;

pub(crate) fn drive_nonlinear(
    transport: &mut dyn NlTransport,
    proj: &ProjectionSpec,
    init: Option<&[f64]>,
    tol: f64,
    max_outer: usize,
) -> Result<GlobalEstimate> {
    if !(tol > 0.0) {
        return Err(RaceError::InvalidParam("tolerance must be positive".into()));
    }
    if max_outer == 0 {
        return Err(RaceError::InvalidParam("max_outer must be ≥ 1".into()));
    }
    let setups = transport.setup()?;
    let coord = NlCoordinator::new(&setups, proj, init)?;
    let mut beta = coord.init.clone();
    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut retreats = 0usize;
    let mut condition = f64::NAN;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    while iterations < max_outer {
        iterations += 1;
        let rounds = transport.round(&beta, iterations)?;
        let q_here = coord.objective(&rounds);
        if let Some((ref prev_beta, prev_q)) = prev {
            if q_here > prev_q {
                // The last full step overshot; retreat halfway and try the
                // objective again next round.
                if retreats >= MAX_RETREATS {
                    return Err(RaceError::NonConvergence {
                        what: "aggregated Gauss-Newton (step halving)".into(),
                        iterations,
                        residual: q_here,
                    });
                }
                retreats += 1;
                beta = prev_beta
                    .iter()
                    .zip(&beta)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                continue;
            }
        }
        retreats = 0;
        let (step, cond) = coord.gauss_newton_step(&rounds)?;
        condition = cond;
        prev = Some((beta.clone(), q_here));
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        last_step = max_abs(&step);
        if last_step < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RaceError::NonConvergence {
            what: "aggregated Gauss-Newton".into(),
            iterations,
            residual: last_step,
        });
    }
    Ok(GlobalEstimate {
        beta,
        method: "race_nonlinear".into(),
        r_used: proj.repetitions,
        iterations,
        condition_number: condition,
        jittered: false,
    })
}

/// Globally bias-corrected nonlinear estimate.
///
/// All `R` projections per batch are stacked into one weighted
/// least-squares objective; each outer iteration refreshes the compressed
/// per-batch quantities at the current iterate and takes one Gauss-Newton
/// step, stopping when the step's largest component drops below `tol`.
/// `init` defaults to the first batch's local estimate.
#[allow(clippy::too_many_arguments)]
pub fn race_nonlinear(
    batches: &[DataBatch],
    fits: &[LocalFit],
    model: &dyn RegressionModel,
    adj: &AdjustmentSpec,
    proj: &ProjectionSpec,
    init: Option<&[f64]>,
    tol: f64,
    max_outer: usize,
) -> Result<GlobalEstimate> {
    if batches.len() != fits.len() {
        return Err(RaceError::InvalidParam("one fit per batch required".into()));
    }
    let workers: Vec<NlWorker> = batches
        .iter()
        .zip(fits)
        .map(|(b, f)| NlWorker::new(b, f, model, adj.k1))
        .collect();
    let mut transport = DirectTransport { workers, fits };
    drive_nonlinear(&mut transport, proj, init, tol, max_outer)
}

/// Norm of the estimating equation at `beta`, reconstructed from the same
/// seeds and adjustment rows the solver used. A converged estimate leaves
/// this below `10·tol`.
pub fn solver_residual_check(
    batches: &[DataBatch],
    fits: &[LocalFit],
    model: &dyn RegressionModel,
    adj: &AdjustmentSpec,
    proj: &ProjectionSpec,
    beta: &[f64],
) -> Result<f64> {
    let workers: Vec<NlWorker> = batches
        .iter()
        .zip(fits)
        .map(|(b, f)| NlWorker::new(b, f, model, adj.k1))
        .collect();
    let setups: Vec<NlSetup> =
        workers.iter().zip(fits).map(|(w, f)| w.setup(f)).collect();
    let coord = NlCoordinator::new(&setups, proj, Some(beta))?;
    let rounds: Vec<NlRoundData> = workers.iter().map(|w| w.round(beta)).collect();
    Ok(coord.estimating_equation_norm(&rounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        gen_linear_batches, gen_nonlinear_batches, CovKind, CovarianceSpec, LinearModelSpec,
        MeanMode, NonlinearModelSpec,
    };
    use crate::linalg::max_abs_diff;
    use crate::local::{lasso_fit, nls_fit, ols_fit, ridge_fit};
    use crate::model::{LinearMean, ShiftedSquare};
    use crate::remodel::{ProjectionDist, WeightMode};

    fn record(z: f64, u: &[f64], w: f64, batch_id: usize) -> ProjectedRecord {
        ProjectedRecord { z, u: u.to_vec(), w, batch_id, draw_id: 0 }
    }

    #[test]
    fn wls_recovers_beta_from_diagonal_records() {
        let beta = [2.0, -1.0, 0.5];
        let mut records = Vec::new();
        for j in 0..3 {
            let mut u = vec![0.0; 3];
            u[j] = 1.0;
            records.push(record(beta[j], &u, 1.0, j));
        }
        let est = wls_solve(&records).unwrap();
        assert!(max_abs_diff(&est.beta, &beta) < 1e-14);
        assert!(est.condition_number >= 1.0);
        assert_eq!(est.iterations, 0);
    }

    #[test]
    fn wls_matches_independent_dense_oracle() {
        // 30 random records, p = 4, solved independently through nalgebra's
        // SVD least squares on the √w-scaled design.
        use nalgebra::{DMatrix, DVector};
        let mut rng = crate::datagen::substream(2024, 90, 0, 0);
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut records = Vec::new();
        for i in 0..30 {
            let u: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let z: f64 = rng.sample::<f64, _>(StandardNormal);
            let w: f64 = 0.5 + rng.gen::<f64>();
            records.push(record(z, &u, w, i));
        }
        let est = wls_solve(&records).unwrap();

        let a = DMatrix::from_fn(30, 4, |i, j| records[i].w.sqrt() * records[i].u[j]);
        let b = DVector::from_fn(30, |i, _| records[i].w.sqrt() * records[i].z);
        let oracle = a.svd(true, true).solve(&b, 1e-14).unwrap();
        for j in 0..4 {
            assert!((est.beta[j] - oracle[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn wls_reports_condition_violation_and_jitter_path() {
        // Rank-deficient: every record points along e₁.
        let records: Vec<ProjectedRecord> =
            (0..5).map(|j| record(1.0, &[1.0, 0.0], 1.0, j)).collect();
        match wls_solve(&records) {
            Err(RaceError::AggregationCondition { .. }) => {}
            other => panic!("expected aggregation-condition error, got {other:?}"),
        }
        let est = wls_solve_jittered(&records).unwrap();
        assert!(est.jittered);
        assert!(est.beta.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn threshold_rules() {
        let est = GlobalEstimate {
            beta: vec![3.0, 0.001],
            method: "wls".into(),
            r_used: 1,
            iterations: 0,
            condition_number: 1.0,
            jittered: false,
        };
        let hard = threshold(&est, 0.01, ThresholdMode::Hard);
        assert_eq!(hard.beta, vec![3.0, 0.0]);
        let est2 = GlobalEstimate { beta: vec![3.0, -2.0], ..est.clone() };
        let soft = threshold(&est2, 0.5, ThresholdMode::Soft);
        assert_eq!(soft.beta, vec![2.5, -1.5]);
        let id = threshold(&est2, 0.0, ThresholdMode::Hard);
        assert_eq!(id.beta, est2.beta);
    }

    fn linear_setup(
        noise_var: f64,
        n_batches: usize,
        m: usize,
        seed: u64,
    ) -> (Vec<DataBatch>, Vec<LocalFit>, Vec<f64>) {
        let spec = LinearModelSpec {
            beta: vec![1.5, -0.5, 2.0, 0.0],
            noise_var,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.5).unwrap(),
            mean_mode: MeanMode::Identical,
        };
        let batches = gen_linear_batches(&spec, n_batches, m, seed).unwrap();
        let fits: Vec<LocalFit> =
            batches.iter().map(|b| ridge_fit(b, 1.0).unwrap()).collect();
        (batches, fits, spec.beta)
    }

    #[test]
    fn race_linear_with_r1_equals_single_solve() {
        let (batches, fits, _) = linear_setup(1.0, 12, 30, 3);
        let adj = AdjustmentSpec::default();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 1, 7).unwrap();
        let est = race_linear(&batches, &fits, &adj, &proj).unwrap();

        let records: Vec<ProjectedRecord> = batches
            .iter()
            .zip(&fits)
            .map(|(b, f)| {
                let eta = draw_projection(4, &proj, b.batch_id, 0);
                crate::remodel::project_linear(b, f, &adj, &eta, 0).unwrap()
            })
            .collect();
        let single = wls_solve(&records).unwrap();
        assert!(max_abs_diff(&est.beta, &single.beta) < 1e-12);
        assert_eq!(est.r_used, 1);
    }

    #[test]
    fn race_linear_is_exact_on_zero_noise_data() {
        let (batches, fits, beta) = linear_setup(0.0, 10, 25, 4);
        let adj = AdjustmentSpec::default();
        for combine in [CombineMode::Average, CombineMode::Stacked] {
            let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 8, 5).unwrap();
            let est =
                race_linear_with(&batches, &fits, &adj, &proj, combine, false).unwrap();
            assert!(max_abs_diff(&est.beta, &beta) < 1e-8, "combine {combine:?}");
        }
    }

    #[test]
    fn race_linear_estimates_are_invariant_to_the_local_fit() {
        // The record algebra cancels β̂ exactly, so lasso- and ridge-seeded
        // runs agree on identical data and seeds.
        let (batches, ridge_fits, _) = linear_setup(2.0, 10, 40, 9);
        let lasso_fits: Vec<LocalFit> =
            batches.iter().map(|b| lasso_fit(b, 0.2).unwrap()).collect();
        let adj = AdjustmentSpec::default();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 6, 11).unwrap();
        let a = race_linear(&batches, &ridge_fits, &adj, &proj).unwrap();
        let b = race_linear(&batches, &lasso_fits, &adj, &proj).unwrap();
        assert!(max_abs_diff(&a.beta, &b.beta) < 1e-9);
    }

    #[test]
    fn race_linear_monte_carlo_mean_is_unbiased() {
        // Small-scale unbiasedness check; the acceptance suite runs the
        // full-scale version.
        let reps = 200;
        let mut acc = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        let mut beta_true = Vec::new();
        for rep in 0..reps {
            let (batches, fits, beta) = linear_setup(1.0, 15, 20, 1000 + rep as u64);
            beta_true = beta;
            let adj = AdjustmentSpec::default();
            let proj =
                ProjectionSpec::new(ProjectionDist::GaussianInvP, 5, 2000 + rep as u64).unwrap();
            let est = race_linear(&batches, &fits, &adj, &proj).unwrap();
            for k in 0..4 {
                let e = est.beta[k] - beta_true[k];
                acc[k] += e;
                sq[k] += e * e;
            }
        }
        for k in 0..4 {
            let mean = acc[k] / reps as f64;
            let var = sq[k] / reps as f64 - mean * mean;
            let stderr = (var / reps as f64).sqrt();
            assert!(
                mean.abs() < 3.0 * stderr,
                "component {k}: mean {mean} stderr {stderr}"
            );
        }
    }

    #[test]
    fn race_nonlinear_collapses_on_linear_mean() {
        // With a linear mean and unit weights the first Gauss-Newton step
        // lands exactly on the stacked linear solution.
        let (batches, fits, _) = linear_setup(1.0, 12, 30, 6);
        let adj = AdjustmentSpec::new(0.1, 0.1, WeightMode::Unit).unwrap();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 3, 8).unwrap();
        let linear = race_linear_with(
            &batches,
            &fits,
            &adj,
            &proj,
            CombineMode::Stacked,
            false,
        )
        .unwrap();
        let nonlinear = race_nonlinear(
            &batches,
            &fits,
            &LinearMean,
            &adj,
            &proj,
            None,
            1e-6,
            25,
        )
        .unwrap();
        assert!(max_abs_diff(&linear.beta, &nonlinear.beta) < 1e-8);
        // Initialized at the answer, the first step is already below tol.
        let at_answer = race_nonlinear(
            &batches,
            &fits,
            &LinearMean,
            &adj,
            &proj,
            Some(&linear.beta),
            1e-6,
            25,
        )
        .unwrap();
        assert_eq!(at_answer.iterations, 1);
    }

    fn nonlinear_setup(
        noise_var: f64,
        n_batches: usize,
        m: usize,
        seed: u64,
    ) -> (Vec<DataBatch>, Vec<LocalFit>, Vec<f64>) {
        let spec = NonlinearModelSpec {
            beta: vec![2.0, 1.0, -2.0, 0.0],
            noise_var,
            cov: CovarianceSpec::new(CovKind::Ar1, 0.5).unwrap(),
        };
        let batches = gen_nonlinear_batches(&spec, n_batches, m, seed).unwrap();
        let model = ShiftedSquare::default();
        let fits: Vec<LocalFit> = batches
            .iter()
            .map(|b| nls_fit(b, &model, &[0.0; 4], 1e-8, 100).unwrap())
            .collect();
        (batches, fits, spec.beta)
    }

    #[test]
    fn race_nonlinear_zero_noise_truth_is_fixed_point() {
        let (batches, fits, beta) = nonlinear_setup(0.0, 10, 30, 14);
        let adj = AdjustmentSpec::default();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 4, 15).unwrap();
        let est = race_nonlinear(
            &batches,
            &fits,
            &ShiftedSquare::default(),
            &adj,
            &proj,
            Some(&beta),
            1e-4,
            25,
        )
        .unwrap();
        assert_eq!(est.iterations, 1);
        assert!(max_abs_diff(&est.beta, &beta) < 1e-8);
    }

    #[test]
    fn race_nonlinear_recovers_truth_and_passes_residual_check() {
        let (batches, fits, beta) = nonlinear_setup(1.0, 40, 50, 16);
        let adj = AdjustmentSpec::default();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 10, 17).unwrap();
        let tol = 1e-6;
        let model = ShiftedSquare::default();
        let est =
            race_nonlinear(&batches, &fits, &model, &adj, &proj, None, tol, 50).unwrap();
        assert!(max_abs_diff(&est.beta, &beta) < 0.2);
        assert!(est.iterations >= 1);

        let resid =
            solver_residual_check(&batches, &fits, &model, &adj, &proj, &est.beta).unwrap();
        assert!(resid <= 10.0 * tol, "estimating-equation residual {resid}");

        // Perturbing one coordinate strictly increases the residual.
        let mut perturbed = est.beta.clone();
        perturbed[1] += 0.1;
        let resid_perturbed =
            solver_residual_check(&batches, &fits, &model, &adj, &proj, &perturbed).unwrap();
        assert!(resid_perturbed > resid);
    }

    #[test]
    fn residual_check_on_linear_mean_matches_normal_equations() {
        let (batches, fits, _) = linear_setup(1.0, 12, 30, 6);
        let adj = AdjustmentSpec::new(0.1, 0.1, WeightMode::Unit).unwrap();
        let proj = ProjectionSpec::new(ProjectionDist::GaussianInvP, 3, 8).unwrap();
        let linear = race_linear_with(
            &batches,
            &fits,
            &adj,
            &proj,
            CombineMode::Stacked,
            false,
        )
        .unwrap();
        let resid = solver_residual_check(
            &batches,
            &fits,
            &LinearMean,
            &adj,
            &proj,
            &linear.beta,
        )
        .unwrap();
        assert!(resid < 1e-8, "normal-equation residual {resid}");
    }

    #[test]
    fn default_threshold_formula() {
        let t = default_threshold(30, 4000);
        assert!((t - (30f64.ln() / 4000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ols_fit_error_path_on_rank_deficient_batch() {
        // m < p: the Gram matrix cannot be inverted.
        let x = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        let batch = DataBatch::new(x, vec![1.0, 2.0], 0).unwrap();
        assert!(ols_fit(&batch).is_err());
    }
}
