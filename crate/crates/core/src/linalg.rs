//! Small dense linear algebra: row-major matrices, vector helpers and an
//! incrementally maintained inverse of a regularized design matrix.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Quadratic forms down to this value are treated as round-off and clamped to zero.
pub const QUAD_FORM_SLACK: f64 = -1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Dot product accumulated as two independent half sums added at the end.
///
/// When `b` has equal halves and the second half of `a` is the exact negation
/// (or copy) of the first, the two partial sums cancel (or match) bit for bit.
/// The symmetric network initialization relies on this to produce exact zeros.
pub fn split_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let half = a.len() / 2;
    let lo: f64 = dot(&a[..half], &b[..half]);
    let hi: f64 = dot(&a[half..], &b[half..]);
    lo + hi
}

/// Dense row-major matrix.
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`, each row accumulated with [`split_dot`].
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| split_dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += yi * a;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Lower-triangular Cholesky factor, or `None` if the matrix is not
    /// (numerically) positive definite.
    pub fn cholesky(&self) -> Option<Matrix> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(l)
    }

    /// Solve `self · x = b` for symmetric positive-definite `self`.
    pub fn cholesky_solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let l = self.cholesky()?;
        let n = self.rows;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
            y[i] = (b[i] - s) / l[(i, i)];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|k| l[(k, i)] * x[k]).sum();
            x[i] = (y[i] - s) / l[(i, i)];
        }
        Some(x)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Inverse of the design matrix `A = λI + Σ z zᵀ`, kept current one rank-one
/// term at a time with the Sherman–Morrison identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdInverse {
    lambda: f64,
    update_count: u64,
    inv: Matrix,
}

impl PdInverse {
    /// `A₀ = λI`, so the stored inverse starts at `(1/λ)·I`.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("design dimension must be positive"));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        let mut inv = Matrix::zeros(dim, dim);
        for i in 0..dim {
            inv[(i, i)] = 1.0 / lambda;
        }
        Ok(Self {
            lambda,
            update_count: 0,
            inv,
        })
    }

    /// Reassemble from persisted parts. The matrix is checked for shape only.
    pub fn from_parts(lambda: f64, update_count: u64, inv: Matrix) -> Result<Self> {
        if inv.rows() != inv.cols() || inv.rows() == 0 {
            return Err(invalid("design inverse must be a non-empty square matrix"));
        }
        if !(lambda > 0.0) {
            return Err(invalid("lambda must be positive"));
        }
        Ok(Self {
            lambda,
            update_count,
            inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv.rows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inv
    }

    /// Raw access for fault injection in self-checks. Writing through this
    /// breaks the `inv = A⁻¹` relationship on purpose.
    #[doc(hidden)]
    pub fn inverse_mut(&mut self) -> &mut Matrix {
        &mut self.inv
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(invalid(format!(
                "vector has dimension {}, design has {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `A ← A + z zᵀ`, maintained on the inverse.
    pub fn rank_one_update(&mut self, z: &[f64]) -> Result<()> {
        self.check_dim(z)?;
        if !all_finite(z) {
            return Err(invalid("update vector has non-finite entries"));
        }
        self.update_count += 1;
        if z.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let n = self.dim();
        let u = self.inv.matvec(z);
        let denom = 1.0 + dot(z, &u);
        if !(denom > 0.0) {
            return Err(Error::NumericalDegeneracy(format!(
                "Sherman-Morrison denominator {denom} is not positive"
            )));
        }
        for i in 0..n {
            let ui = u[i] / denom;
            for (a, &uj) in self.inv.row_mut(i).iter_mut().zip(&u) {
                *a -= ui * uj;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.inv[(i, j)] + self.inv[(j, i)]);
                self.inv[(i, j)] = avg;
                self.inv[(j, i)] = avg;
            }
        }
        Ok(())
    }

    /// `zᵀ A⁻¹ z`, unclamped.
    pub fn quad_form(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        Ok(dot(z, &self.inv.matvec(z)))
    }

    /// `‖z‖_{A⁻¹} = sqrt(zᵀ A⁻¹ z)`.
    pub fn mahalanobis(&self, z: &[f64]) -> Result<f64> {
        let q = self.quad_form(z)?;
        if q < QUAD_FORM_SLACK || q.is_nan() {
            return Err(Error::NumericalDegeneracy(format!(
                "quadratic form {q:e} is negative; design inverse lost positive definiteness"
            )));
        }
        Ok(q.max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gauss-Jordan with partial pivoting, used as the reference inverse.
    fn dense_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
                .unwrap();
            for k in 0..n {
                m.as_mut_slice().swap(col * n + k, piv * n + k);
                inv.as_mut_slice().swap(col * n + k, piv * n + k);
            }
            let p = m[(col, col)];
            for k in 0..n {
                m[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for k in 0..n {
                        m[(r, k)] -= f * m[(col, k)];
                        inv[(r, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn init_is_scaled_identity() {
        let p = PdInverse::new(2, 1.0).unwrap();
        assert_eq!(p.inverse(), &Matrix::identity(2));
        let p = PdInverse::new(2, 0.1).unwrap();
        assert_eq!(
            p.inverse(),
            &Matrix::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap()
        );
        let p = PdInverse::new(1, 4.0).unwrap();
        assert_eq!(p.inverse().as_slice(), &[0.25]);
        assert_eq!(p.update_count(), 0);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(matches!(
            PdInverse::new(0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            PdInverse::new(2, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            PdInverse::new(2, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unit_update_halves_first_diagonal() {
        let mut p = PdInverse::new(2, 1.0).unwrap();
        p.rank_one_update(&[1.0, 0.0]).unwrap();
        // diag(2, 1)⁻¹
        assert_eq!(p.inverse().as_slice(), &[0.5, 0.0, 0.0, 1.0]);
        assert_eq!(p.update_count(), 1);
    }

    #[test]
    fn zero_update_leaves_inverse() {
        let mut p = PdInverse::new(3, 0.5).unwrap();
        p.rank_one_update(&[0.3, -1.0, 2.0]).unwrap();
        let before = p.inverse().clone();
        p.rank_one_update(&[0.0; 3]).unwrap();
        assert_eq!(p.inverse(), &before);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut p = PdInverse::new(2, 1.0).unwrap();
        assert!(matches!(
            p.rank_one_update(&[1.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            p.mahalanobis(&[1.0, 2.0, 3.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mahalanobis_examples() {
        let p = PdInverse::new(2, 1.0).unwrap();
        assert_eq!(p.mahalanobis(&[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(p.mahalanobis(&[0.0, 0.0]).unwrap(), 0.0);
        let diag = Matrix::from_rows(&[vec![0.25, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = PdInverse::from_parts(1.0, 0, diag).unwrap();
        assert_eq!(p.mahalanobis(&[2.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn negative_quadratic_form_is_degenerate() {
        let bad = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = PdInverse::from_parts(1.0, 0, bad).unwrap();
        assert!(matches!(
            p.mahalanobis(&[1.0, 0.0]),
            Err(Error::NumericalDegeneracy(_))
        ));
        // Tiny negative values are round-off.
        let tiny = Matrix::from_rows(&[vec![-1e-14, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = PdInverse::from_parts(1.0, 0, tiny).unwrap();
        assert_eq!(p.mahalanobis(&[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn thousand_updates_match_dense_inverse() {
        let d = 16;
        let lambda = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = PdInverse::new(d, lambda).unwrap();
        let mut a = Matrix::identity(d);
        for v in a.as_mut_slice() {
            *v *= lambda;
        }
        for _ in 0..1000 {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.rank_one_update(&z).unwrap();
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] += z[i] * z[j];
                }
            }
        }
        let oracle = dense_inverse(&a);
        assert!(p.inverse().max_abs_diff(&oracle) < 1e-6);
        let prod = p.inverse().matmul(&a);
        assert!(prod.max_abs_diff(&Matrix::identity(d)) < 1e-6);
        assert!(p.inverse().cholesky().is_some());
        let inv = p.inverse();
        for i in 0..d {
            for j in 0..d {
                assert!((inv[(i, j)] - inv[(j, i)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_detects_indefinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(m.cholesky().is_none());
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = m.cholesky().unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn split_dot_cancels_mirrored_halves() {
        let w = [0.3, -1.7, 2.2, -0.3, 1.7, -2.2];
        let h = [0.11, 0.52, 0.93, 0.11, 0.52, 0.93];
        assert_eq!(split_dot(&w, &h), 0.0);
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    proptest! {
        #[test]
        fn mahalanobis_is_absolutely_homogeneous(
            zs in proptest::collection::vec(vec_strategy(5), 0..20),
            probe in vec_strategy(5),
            c in -10.0f64..10.0,
        ) {
            let mut p = PdInverse::new(5, 0.3).unwrap();
            for z in &zs {
                p.rank_one_update(z).unwrap();
            }
            let base = p.mahalanobis(&probe).unwrap();
            let scaled: Vec<f64> = probe.iter().map(|v| c * v).collect();
            let got = p.mahalanobis(&scaled).unwrap();
            let want = c.abs() * base;
            prop_assert!((got - want).abs() <= 1e-10 * want.max(1e-300) + 1e-300);
        }

        #[test]
        fn update_shrinks_norm_in_updated_direction(
            zs in proptest::collection::vec(vec_strategy(4), 0..20),
            z in vec_strategy(4),
        ) {
            let mut p = PdInverse::new(4, 1.0).unwrap();
            for v in &zs {
                p.rank_one_update(v).unwrap();
            }
            let before = p.mahalanobis(&z).unwrap();
            p.rank_one_update(&z).unwrap();
            let after = p.mahalanobis(&z).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }
}
