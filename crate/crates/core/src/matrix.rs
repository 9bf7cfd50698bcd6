//! Dense row-major matrices plus the small-matrix linear algebra the
//! watermark pipeline needs: LU solves, Gauss-Jordan inversion, Householder
//! orthonormalization, and one-sided Jacobi singular values.
//!
//! Every matrix in the crate is small (at most a few hundred rows), so the
//! routines here favour clarity and numerical robustness over blocking.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of 64-bit reals with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data; the length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        assert_eq!(values.len(), self.cols);
        self.row_mut(i).copy_from_slice(values);
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidArgument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`; avoids materializing the transpose.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::InvalidArgument(format!(
                "matmul_transpose_b shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateInput(format!(
                "non-finite entries in {context}"
            )))
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `v * m` for a row vector `v` of length `m.rows()`.
pub fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    assert_eq!(v.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = m.row(k);
        for (o, &r) in out.iter_mut().zip(row.iter()) {
            *o += x * r;
        }
    }
    out
}

/// Population mean and standard deviation of a slice.
pub fn mean_std(data: &[f64]) -> (f64, f64) {
    assert!(!data.is_empty());
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    pivots: Vec<usize>,
}

pub fn lu_factor(a: &Matrix) -> Result<LuFactors> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidArgument("lu_factor needs a square matrix".into()));
    }
    let n = a.rows();
    let mut lu = a.data().to_vec();
    let mut pivots: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu[k * n + k].abs();
        for i in (k + 1)..n {
            let v = lu[i * n + k].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val == 0.0 {
            return Err(Error::SingularMatrix(format!(
                "zero pivot at column {k} during LU factorization"
            )));
        }
        if pivot_row != k {
            for j in 0..n {
                lu.swap(k * n + j, pivot_row * n + j);
            }
            pivots.swap(k, pivot_row);
        }
        let inv_pivot = 1.0 / lu[k * n + k];
        for i in (k + 1)..n {
            let factor = lu[i * n + k] * inv_pivot;
            lu[i * n + k] = factor;
            for j in (k + 1)..n {
                lu[i * n + j] -= factor * lu[k * n + j];
            }
        }
    }
    Ok(LuFactors { n, lu, pivots })
}

impl LuFactors {
    /// Solve `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.pivots.iter().map(|&p| rhs[p]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidArgument("invert needs a square matrix".into()));
    }
    let n = a.rows();
    let mut aug = vec![0.0; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            aug[i * 2 * n + j] = a.get(i, j);
        }
        aug[i * 2 * n + n + i] = 1.0;
    }
    let w = 2 * n;
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = aug[k * w + k].abs();
        for i in (k + 1)..n {
            let v = aug[i * w + k].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if pivot_val == 0.0 {
            return Err(Error::SingularMatrix(format!(
                "zero pivot at column {k} during inversion"
            )));
        }
        if pivot_row != k {
            for j in 0..w {
                aug.swap(k * w + j, pivot_row * w + j);
            }
        }
        let inv_pivot = 1.0 / aug[k * w + k];
        for j in 0..w {
            aug[k * w + j] *= inv_pivot;
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let factor = aug[i * w + k];
            if factor == 0.0 {
                continue;
            }
            for j in 0..w {
                aug[i * w + j] -= factor * aug[k * w + j];
            }
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, aug[i * w + n + j]);
        }
    }
    Ok(out)
}

/// Singular values in descending order via one-sided Jacobi.
///
/// Converges to machine precision for the small matrices used here; the
/// condition-number gate and its test oracle both rely on that accuracy.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let work = if m.rows() < m.cols() {
        m.transpose()
    } else {
        m.clone()
    };
    let n = work.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();

    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut converged = true;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = dot(&cols[p], &cols[p]);
                let aqq = dot(&cols[q], &cols[q]);
                let apq = dot(&cols[p], &cols[q]);
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..cols[p].len() {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Orthonormalize a square matrix by Householder QR; returns Q with the
/// R-diagonal sign convention, so Gaussian input yields a Haar-distributed
/// orthogonal matrix. Fails on rank deficiency.
pub fn orthonormal_q(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidArgument("orthonormal_q needs a square matrix".into()));
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag_signs = vec![1.0f64; n];
    let scale = a.max_abs().max(f64::MIN_POSITIVE);

    for k in 0..n {
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm <= scale * 1e-14 {
            return Err(Error::GenerationFailure(format!(
                "rank-deficient draw at column {k}"
            )));
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vtv = dot(&v, &v);
        if vtv > 0.0 {
            // Apply the reflector to the trailing block of R.
            for j in k..n {
                let mut proj = 0.0;
                for (idx, vi) in v.iter().enumerate() {
                    proj += vi * r.get(k + idx, j);
                }
                let f = 2.0 * proj / vtv;
                for (idx, vi) in v.iter().enumerate() {
                    let cur = r.get(k + idx, j);
                    r.set(k + idx, j, cur - f * vi);
                }
            }
        }
        diag_signs[k] = if alpha >= 0.0 { 1.0 } else { -1.0 };
        vs.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1}, accumulated right to left on the identity.
    let mut q = Matrix::identity(n);
    for k in (0..n).rev() {
        let v = &vs[k];
        let vtv = dot(v, v);
        if vtv == 0.0 {
            continue;
        }
        for j in 0..n {
            let mut proj = 0.0;
            for (idx, vi) in v.iter().enumerate() {
                proj += vi * q.get(k + idx, j);
            }
            let f = 2.0 * proj / vtv;
            for (idx, vi) in v.iter().enumerate() {
                let cur = q.get(k + idx, j);
                q.set(k + idx, j, cur - f * vi);
            }
        }
    }
    // Flip columns so the implicit R has a positive diagonal.
    for j in 0..n {
        if diag_signs[j] < 0.0 {
            for i in 0..n {
                let v = q.get(i, j);
                q.set(i, j, -v);
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_known_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = a.matmul_transpose_b(&b.transpose()).unwrap();
        assert_eq!(c, ct);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn lu_solves_known_system() {
        let a = Matrix::from_rows(&[
            vec![2.0, 1.0, -1.0],
            vec![-3.0, -1.0, 2.0],
            vec![-2.0, 1.0, 2.0],
        ])
        .unwrap();
        let lu = lu_factor(&a).unwrap();
        let x = lu.solve(&[8.0, -11.0, -3.0]);
        approx(x[0], 2.0, 1e-12);
        approx(x[1], 3.0, 1e-12);
        approx(x[2], -1.0, 1e-12);
    }

    #[test]
    fn lu_reports_singularity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        match lu_factor(&a) {
            Err(Error::SingularMatrix(_)) => {}
            other => panic!("expected singular matrix, got {other:?}"),
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a = Matrix::from_rows(&[
            vec![1.2, 0.3, -0.1],
            vec![0.0, 0.9, 0.4],
            vec![-0.2, 0.1, 1.1],
        ])
        .unwrap();
        let inv = invert(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                approx(prod.get(i, j), expect, 1e-12);
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let a = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sv = singular_values(&a);
        approx(sv[0], 4.0, 1e-12);
        approx(sv[1], 1.0, 1e-12);
    }

    #[test]
    fn singular_values_match_nalgebra_oracle() {
        let mut prng = crate::prng::PrngStream::new(99);
        for _ in 0..20 {
            let data: Vec<f64> = (0..9).map(|_| prng.normal()).collect();
            let a = Matrix::from_vec(3, 3, data.clone()).unwrap();
            let sv = singular_values(&a);
            let na = nalgebra::DMatrix::from_row_slice(3, 3, &data);
            let mut oracle = na.singular_values().as_slice().to_vec();
            oracle.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (got, want) in sv.iter().zip(oracle.iter()) {
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn orthonormal_q_is_orthogonal() {
        let mut prng = crate::prng::PrngStream::new(5);
        let data: Vec<f64> = (0..64 * 64).map(|_| prng.normal()).collect();
        let a = Matrix::from_vec(64, 64, data).unwrap();
        let q = orthonormal_q(&a).unwrap();
        let prod = q.matmul_transpose_b(&q).unwrap();
        let mut max_dev = 0.0f64;
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((prod.get(i, j) - expect).abs());
            }
        }
        assert!(max_dev <= 1e-12, "max deviation {max_dev}");
    }

    #[test]
    fn mean_std_simple() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        approx(m, 2.0, 1e-15);
        approx(s, 1.0, 1e-15);
    }
}
