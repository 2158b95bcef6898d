//! Minimal dense linear-algebra kernel shared by every module.
//!
//! Parameter dimensions in this crate are small (p ≤ 64), so direct O(p³)
//! methods are used throughout: Cholesky factorization for symmetric
//! positive-definite solves and cyclic Jacobi rotations for symmetric
//! eigendecompositions. Accumulations that must be order-invariant use
//! Neumaier-compensated summation.

use std::fmt;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat({}x{})", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        Ok(())
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty row set");
        let cols = rows[0].len();
        let mut m = Mat::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            m.data[i * cols..(i + 1) * cols].copy_from_slice(r);
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = dot(self.row(i), x);
        }
        out
    }

    /// `selfᵀ * x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi != 0.0 {
                for (o, v) in out.iter_mut().zip(self.row(i)) {
                    *o += v * xi;
                }
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    let orow = other.row(k);
                    let out_row = out.row_mut(i);
                    for (o, b) in out_row.iter_mut().zip(orow) {
                        *o += a * b;
                    }
                }
            }
        }
        out
    }

    /// `selfᵀ * self / divisor`, the workhorse for Gram matrices.
    pub fn gram(&self, divisor: f64) -> Mat {
        let mut g = Mat::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                let ra = r[a];
                if ra != 0.0 {
                    let grow = g.row_mut(a);
                    for (gv, rb) in grow.iter_mut().zip(r) {
                        *gv += ra * rb;
                    }
                }
            }
        }
        g.scale_mut(1.0 / divisor);
        g
    }

    pub fn scale_mut(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        let mut m = self.clone();
        m.scale_mut(s);
        m
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self + s·I` for square matrices.
    pub fn add_scaled_identity(&self, s: f64) -> Mat {
        assert_eq!(self.rows, self.cols, "add_scaled_identity: square only");
        let mut m = self.clone();
        for i in 0..self.rows {
            m[(i, i)] += s;
        }
        m
    }

    /// Rank-one update `self += w · u uᵀ`.
    pub fn add_outer(&mut self, w: f64, u: &[f64]) {
        assert_eq!(self.rows, u.len());
        assert_eq!(self.cols, u.len());
        for i in 0..self.rows {
            let wu = w * u[i];
            if wu != 0.0 {
                let row = self.row_mut(i);
                for (r, v) in row.iter_mut().zip(u) {
                    *r += wu * v;
                }
            }
        }
    }

    /// `xᵀ · self · y` for a square matrix.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        let mut acc = 0.0;
        for i in 0..self.rows {
            acc += x[i] * dot(self.row(i), y);
        }
        acc
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower-triangular Cholesky factor; `None` when the matrix is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<Chol> {
        assert_eq!(self.rows, self.cols, "cholesky: square only");
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / dj;
            }
        }
        Some(Chol { l })
    }

    /// Solves `self · x = b` for symmetric positive-definite `self`.
    pub fn solve_spd(&self, b: &[f64]) -> Option<Vec<f64>> {
        self.cholesky().map(|c| c.solve(b))
    }

    /// Inverse for symmetric positive-definite matrices.
    pub fn inv_spd(&self) -> Option<Mat> {
        let chol = self.cholesky()?;
        let n = self.rows;
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = chol.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Enforce exact symmetry against round-off drift.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        Some(inv)
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    /// Returns eigenvalues in descending order with eigenvectors as the
    /// corresponding columns of an orthogonal matrix.
    pub fn sym_eigen(&self) -> (Vec<f64>, Mat) {
        assert_eq!(self.rows, self.cols, "sym_eigen: square only");
        let n = self.rows;
        let mut a = self.clone();
        let mut v = Mat::identity(n);
        let max_sweeps = 64;
        for _ in 0..max_sweeps {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() <= 1e-14 * (1.0 + a.trace().abs()) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
        let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
        let mut vectors = Mat::zeros(n, n);
        for (new_col, &old_col) in order.iter().enumerate() {
            for r in 0..n {
                vectors[(r, new_col)] = v[(r, old_col)];
            }
        }
        (values, vectors)
    }

    /// Spectral condition number λ_max/λ_min of a symmetric matrix.
    /// Returns `f64::INFINITY` when λ_min ≤ 0.
    pub fn sym_condition(&self) -> f64 {
        let (vals, _) = self.sym_eigen();
        let max = vals.first().copied().unwrap_or(0.0);
        let min = vals.last().copied().unwrap_or(0.0);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factor wrapper with triangular solves.
pub struct Chol {
    l: Mat,
}

impl Chol {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.n_rows();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[(i, k)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[(k, i)] * y[k];
            }
            y[i] /= self.l[(i, i)];
        }
        y
    }

    pub fn factor(&self) -> &Mat {
        &self.l
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Neumaier-compensated accumulator; the running error term makes the sum
/// insensitive to input order at the 1e-16 level.
#[derive(Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Componentwise compensated vector accumulator.
#[derive(Clone)]
pub struct CompensatedVec {
    terms: Vec<CompensatedSum>,
}

impl CompensatedVec {
    pub fn zeros(n: usize) -> Self {
        CompensatedVec { terms: vec![CompensatedSum::default(); n] }
    }

    pub fn add_scaled(&mut self, alpha: f64, x: &[f64]) {
        for (t, v) in self.terms.iter_mut().zip(x) {
            t.add(alpha * v);
        }
    }

    pub fn value(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.value()).collect()
    }
}

/// Compensated symmetric accumulator for `Σ w · u uᵀ`.
#[derive(Clone)]
pub struct CompensatedMat {
    n: usize,
    terms: Vec<CompensatedSum>,
}

impl CompensatedMat {
    pub fn zeros(n: usize) -> Self {
        CompensatedMat { n, terms: vec![CompensatedSum::default(); n * n] }
    }

    pub fn add_outer(&mut self, w: f64, u: &[f64]) {
        assert_eq!(u.len(), self.n);
        for i in 0..self.n {
            let wu = w * u[i];
            for j in 0..self.n {
                self.terms[i * self.n + j].add(wu * u[j]);
            }
        }
    }

    pub fn add_mat(&mut self, m: &Mat) {
        assert_eq!(m.n_rows(), self.n);
        assert_eq!(m.n_cols(), self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                self.terms[i * self.n + j].add(m[(i, j)]);
            }
        }
    }

    pub fn value(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = self.terms[i * self.n + j].value();
            }
        }
        m
    }
}
