//! Synthetic batched datasets with deterministic per-batch random streams.
//!
//! Every draw is keyed by `(seed, domain, batch_id, extra)` through a
//! 256-bit ChaCha seed, so regenerating a batch never depends on how many
//! batches exist, which thread produced it, or in what order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{RaceError, Result};
use crate::linalg::Mat;
use crate::model::{RegressionModel, ShiftedSquare};

/// Stream domains keep unrelated draws decorrelated under a shared root seed.
pub(crate) mod domain {
    pub const LINEAR_BATCH: u64 = 1;
    pub const NONLINEAR_BATCH: u64 = 2;
    pub const BATCH_MEANS: u64 = 3;
    pub const PROJECTION: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const REPLICATION: u64 = 6;
}

/// Counter-keyed substream: a pure function of its four keys.
pub(crate) fn substream(root: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&domain.to_le_bytes());
    seed[16..24].copy_from_slice(&a.to_le_bytes());
    seed[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Derives a per-replication root seed for simulation studies.
pub fn replication_seed(root: u64, rep: usize) -> u64 {
    substream(root, domain::REPLICATION, rep as u64, 0).gen()
}

/// Covariance family for the covariate rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovKind {
    /// `Σ[i][j] = rho^|i-j|`.
    Ar1,
    /// `Σ[i][j] = rho^{1[i≠j]}`: ones on the diagonal, `rho` off it.
    Equicorrelated,
}

#[derive(Debug, Clone, Copy)]
pub struct CovarianceSpec {
    pub kind: CovKind,
    pub rho: f64,
}

impl CovarianceSpec {
    pub fn new(kind: CovKind, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(RaceError::InvalidParam(format!(
                "covariance rho must lie in [0,1), got {rho}"
            )));
        }
        Ok(CovarianceSpec { kind, rho })
    }
}

/// Builds the `p×p` covariance matrix for a spec.
pub fn gen_covariance(spec: &CovarianceSpec, p: usize) -> Result<Mat> {
    if p == 0 {
        return Err(RaceError::InvalidParam("covariance dimension must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&spec.rho) {
        return Err(RaceError::InvalidParam(format!(
            "covariance rho must lie in [0,1), got {}",
            spec.rho
        )));
    }
    Ok(match spec.kind {
        CovKind::Ar1 => Mat::from_fn(p, p, |i, j| {
            spec.rho.powi((i as i32 - j as i32).abs())
        }),
        CovKind::Equicorrelated => {
            Mat::from_fn(p, p, |i, j| if i == j { 1.0 } else { spec.rho })
        }
    })
}

/// How batch-level covariate means are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    /// All batches share mean zero.
    Identical,
    /// Each batch gets its own mean, drawn once from `N(0, I_p)`.
    BatchMeans,
}

#[derive(Debug, Clone)]
pub struct LinearModelSpec {
    pub beta: Vec<f64>,
    pub noise_var: f64,
    pub cov: CovarianceSpec,
    pub mean_mode: MeanMode,
}

impl LinearModelSpec {
    fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(RaceError::InvalidParam("beta must be non-empty".into()));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(RaceError::InvalidParam(format!(
                "noise_var must be a finite non-negative real, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NonlinearModelSpec {
    pub beta: Vec<f64>,
    pub noise_var: f64,
    pub cov: CovarianceSpec,
}

impl NonlinearModelSpec {
    /// The fixed quadratic mean function `(xᵀβ + 2)²`.
    pub fn model(&self) -> ShiftedSquare {
        ShiftedSquare::default()
    }
}

/// One shard of data: the only type in the crate holding raw rows.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub x: Mat,
    pub y: Vec<f64>,
    pub batch_id: usize,
}

impl DataBatch {
    pub fn new(x: Mat, y: Vec<f64>, batch_id: usize) -> Result<Self> {
        if x.n_rows() != y.len() {
            return Err(RaceError::InvalidParam(format!(
                "design has {} rows but response has {} entries",
                x.n_rows(),
                y.len()
            )));
        }
        if x.n_rows() == 0 {
            return Err(RaceError::InvalidParam("a batch needs at least one row".into()));
        }
        Ok(DataBatch { x, y, batch_id })
    }

    pub fn n_samples(&self) -> usize {
        self.x.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.n_cols()
    }

    /// `XᵀX / m`.
    pub fn gram(&self) -> Mat {
        self.x.gram(self.n_samples() as f64)
    }

    /// `Xᵀy / m`.
    pub fn xty_over_m(&self) -> Vec<f64> {
        let mut v = self.x.tr_matvec(&self.y);
        let m = self.n_samples() as f64;
        for e in &mut v {
            *e /= m;
        }
        v
    }

    /// Concatenates shards into one pooled batch (benchmark use only).
    pub fn concat(batches: &[DataBatch]) -> Result<DataBatch> {
        if batches.is_empty() {
            return Err(RaceError::InvalidParam("cannot pool zero batches".into()));
        }
        let p = batches[0].n_features();
        let total: usize = batches.iter().map(|b| b.n_samples()).sum();
        let mut x = Mat::zeros(total, p);
        let mut y = Vec::with_capacity(total);
        let mut row = 0;
        for b in batches {
            if b.n_features() != p {
                return Err(RaceError::InvalidParam("pooled batches disagree on p".into()));
            }
            for i in 0..b.n_samples() {
                x.row_mut(row).copy_from_slice(b.x.row(i));
                row += 1;
            }
            y.extend_from_slice(&b.y);
        }
        DataBatch::new(x, y, 0)
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws one batch of correlated rows: `x = μ + L g` with `L` the Cholesky
/// factor of Σ, then fills the response from `mean_fn` plus noise.
fn gen_batch(
    seed: u64,
    dom: u64,
    batch_id: usize,
    m: usize,
    mu: Option<&[f64]>,
    chol_l: &Mat,
    noise_sd: f64,
    mean_fn: impl Fn(&[f64]) -> f64,
) -> DataBatch {
    let p = chol_l.n_rows();
    let mut rng = substream(seed, dom, batch_id as u64, 0);
    let mut x = Mat::zeros(m, p);
    let mut g = vec![0.0; p];
    for i in 0..m {
        for e in &mut g {
            *e = rng.sample::<f64, _>(StandardNormal);
        }
        let row = x.row_mut(i);
        for r in 0..p {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += chol_l[(r, c)] * g[c];
            }
            row[r] = acc + mu.map_or(0.0, |u| u[r]);
        }
    }
    let mut y: Vec<f64> = (0..m).map(|i| mean_fn(x.row(i))).collect();
    if noise_sd > 0.0 {
        for v in &mut y {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    DataBatch { x, y, batch_id }
}

fn batch_means(seed: u64, n_batches: usize, p: usize, mode: MeanMode) -> Vec<Option<Vec<f64>>> {
    match mode {
        MeanMode::Identical => vec![None; n_batches],
        MeanMode::BatchMeans => {
            // Means come from one root-level stream, ahead of batch substreams,
            // so adding batches never perturbs earlier means.
            let mut rng = substream(seed, domain::BATCH_MEANS, 0, 0);
            (0..n_batches)
                .map(|_| Some(standard_normal_vec(&mut rng, p)))
                .collect()
        }
    }
}

fn validate_counts(n_batches: usize, m: usize) -> Result<()> {
    if n_batches == 0 {
        return Err(RaceError::InvalidParam("need at least one batch".into()));
    }
    if m == 0 {
        return Err(RaceError::InvalidParam("need at least one row per batch".into()));
    }
    Ok(())
}

/// Generates `n_batches` shards of `m` rows each from a linear model.
pub fn gen_linear_batches(
    spec: &LinearModelSpec,
    n_batches: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<DataBatch>> {
    spec.validate()?;
    validate_counts(n_batches, m)?;
    let p = spec.beta.len();
    let sigma = gen_covariance(&spec.cov, p)?;
    let chol = sigma.cholesky().ok_or_else(|| {
        RaceError::InvalidParam("covariance matrix is not positive definite".into())
    })?;
    let l = chol.factor().clone();
    let mus = batch_means(seed, n_batches, p, spec.mean_mode);
    let noise_sd = spec.noise_var.sqrt();
    let beta = spec.beta.clone();
    Ok((0..n_batches)
        .into_par_iter()
        .map(|j| {
            gen_batch(
                seed,
                domain::LINEAR_BATCH,
                j,
                m,
                mus[j].as_deref(),
                &l,
                noise_sd,
                |row| crate::linalg::dot(row, &beta),
            )
        })
        .collect())
}

/// Generates shards from the quadratic nonlinear model `(xᵀβ + 2)² + ε`.
pub fn gen_nonlinear_batches(
    spec: &NonlinearModelSpec,
    n_batches: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<DataBatch>> {
    if spec.beta.is_empty() {
        return Err(RaceError::InvalidParam("beta must be non-empty".into()));
    }
    if !(spec.noise_var >= 0.0) || !spec.noise_var.is_finite() {
        return Err(RaceError::InvalidParam(format!(
            "noise_var must be a finite non-negative real, got {}",
            spec.noise_var
        )));
    }
    validate_counts(n_batches, m)?;
    let p = spec.beta.len();
    let sigma = gen_covariance(&spec.cov, p)?;
    let chol = sigma.cholesky().ok_or_else(|| {
        RaceError::InvalidParam("covariance matrix is not positive definite".into())
    })?;
    let l = chol.factor().clone();
    let model = spec.model();
    let noise_sd = spec.noise_var.sqrt();
    let beta = spec.beta.clone();
    Ok((0..n_batches)
        .into_par_iter()
        .map(|j| {
            gen_batch(
                seed,
                domain::NONLINEAR_BATCH,
                j,
                m,
                None,
                &l,
                noise_sd,
                |row| model.value(row, &beta),
            )
        })
        .collect())
}
