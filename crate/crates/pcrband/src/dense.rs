//! Dense matrices with Gaussian elimination.
//!
//! This is the reference solve used as a test oracle for the banded and
//! reduced solvers, and the backend for the small r-by-r block operations
//! of the interface system. Partial pivoting with a relative singularity
//! guard.

use crate::error::{Result, SolverError};

/// Relative pivot guard: a pivot smaller than this times the largest
/// entry of the input matrix is treated as singular.
pub const PIVOT_GUARD: f64 = 1e-13;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
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

    /// Build from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMat) -> DenseMat {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = DenseMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &DenseMat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += c * s;
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &DenseMat) -> DenseMat {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn scaled(&self, c: f64) -> DenseMat {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    /// Infinity norm of `self - other`.
    pub fn max_abs_diff(&self, other: &DenseMat) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `a * x = b` by Gaussian elimination with partial pivoting.
///
/// `b` may hold any number of right-hand-side columns. Fails with
/// [`SolverError::SingularPivot`] when the best available pivot falls
/// below [`PIVOT_GUARD`] relative to the largest entry of `a`.
pub fn dense_solve(a: &DenseMat, b: &DenseMat) -> Result<DenseMat> {
    let n = a.rows();
    if a.cols() != n {
        return Err(SolverError::DimensionMismatch {
            context: "dense_solve: matrix not square",
            expected: n,
            got: a.cols(),
        });
    }
    if b.rows() != n {
        return Err(SolverError::DimensionMismatch {
            context: "dense_solve: rhs rows",
            expected: n,
            got: b.rows(),
        });
    }
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let tol = PIVOT_GUARD * a.max_abs();

    for k in 0..n {
        // Partial pivot on column k.
        let mut piv = k;
        let mut best = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best <= tol {
            return Err(SolverError::SingularPivot {
                context: "dense elimination".to_string(),
                index: k,
            });
        }
        if piv != k {
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
            for j in 0..m {
                let t = x[(k, j)];
                x[(k, j)] = x[(piv, j)];
                x[(piv, j)] = t;
            }
        }
        let d = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / d;
            if f == 0.0 {
                continue;
            }
            lu[(i, k)] = 0.0;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            for j in 0..m {
                x[(i, j)] -= f * x[(k, j)];
            }
        }
    }

    // Back substitution.
    for k in (0..n).rev() {
        let d = lu[(k, k)];
        for j in 0..m {
            let mut s = x[(k, j)];
            for i in k + 1..n {
                s -= lu[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = s / d;
        }
    }
    Ok(x)
}

/// Inverse via [`dense_solve`] against the identity.
pub fn dense_inverse(a: &DenseMat) -> Result<DenseMat> {
    dense_solve(a, &DenseMat::identity(a.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_sum_case() {
        let a = DenseMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let b = DenseMat::column(&[3.0, 3.0]);
        let x = dense_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_returns_rhs() {
        let a = DenseMat::identity(5);
        let b = DenseMat::from_vec(5, 2, (0..10).map(|i| i as f64 * 0.7 - 3.0).collect());
        let x = dense_solve(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn hilbert_4x4_against_exact_inverse() {
        // H[i][j] = 1/(i+j+1). Its inverse is integer valued; the first
        // column is (16, -120, 240, -140), obtained from the exact rational
        // inverse of the 4x4 Hilbert matrix.
        let mut h = DenseMat::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                h[(i, j)] = 1.0 / ((i + j + 1) as f64);
            }
        }
        let e1 = DenseMat::column(&[1.0, 0.0, 0.0, 0.0]);
        let x = dense_solve(&h, &e1).unwrap();
        let exact = [16.0, -120.0, 240.0, -140.0];
        for i in 0..4 {
            assert!(
                (x[(i, 0)] - exact[i]).abs() < 1e-9 * exact[i].abs().max(1.0),
                "row {i}: {} vs {}",
                x[(i, 0)],
                exact[i]
            );
        }
        // Independent residual check of the same solution.
        let r = h.matmul(&x).sub(&e1);
        assert!(r.max_abs() < 1e-11);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = DenseMat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let b = DenseMat::column(&[1.0, 1.0]);
        match dense_solve(&a, &b) {
            Err(SolverError::SingularPivot { .. }) => {}
            other => panic!("expected singular pivot, got {other:?}"),
        }
    }

    #[test]
    fn random_residual_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 3, 5, 8, 13] {
            let mut a = DenseMat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                a[(i, i)] += n as f64; // keep it well conditioned
            }
            let b =
                DenseMat::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let x = dense_solve(&a, &b).unwrap();
            let res = a.matmul(&x).sub(&b).max_abs();
            assert!(res < 1e-12 * b.max_abs().max(1.0), "n={n} residual {res}");
        }
    }
}
