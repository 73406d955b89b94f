//! Small dense matrices and a symmetric eigensolver.
//!
//! Everything here targets patch-sized problems (p up to ~100); the
//! eigensolver is a cyclic Jacobi iteration, which keeps eigenvectors
//! orthonormal to machine precision.

use crate::error::NumericError;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn data(&self) -> &[f64] {
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

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self^p` for a square matrix by repeated multiplication.
    pub fn power(&self, p: usize) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut out = Mat::identity(self.rows);
        for _ in 0..p {
            out = out.matmul(self);
        }
        out
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

/// Eigendecomposition of a real symmetric matrix.
///
/// Eigenvalues ascending; `vectors` holds the corresponding orthonormal
/// eigenvectors as columns, each sign-normalized so its largest-magnitude
/// entry is positive.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl SymEigen {
    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.vectors.col(i)
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eigen(a: &Mat, context: &str) -> Result<SymEigen, NumericError> {
    assert_eq!(a.rows(), a.cols(), "sym_eigen needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return Ok(SymEigen {
            values: Vec::new(),
            vectors: Mat::zeros(0, 0),
        });
    }
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = m.data.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);

    let off = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    const MAX_SWEEPS: usize = 100;
    let tol = 1e-15 * scale * (n as f64);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                // stable computation of tan(rotation angle)
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
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
    if !converged && off(&m) > tol * 10.0 {
        return Err(NumericError::EigenNoConvergence {
            context: context.to_string(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| v[(i, old_j)]).collect();
        // fix the sign so repeated runs agree bit-for-bit
        let mut best = 0usize;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for x in &mut col {
                *x = -*x;
            }
        }
        for i in 0..n {
            vectors[(i, new_j)] = col[i];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Minimum-norm least-squares solution of the symmetric PSD system `G c = v`.
///
/// Rank-deficient directions (eigenvalues below `rel_tol * lambda_max`) are
/// dropped, which is the pseudo-inverse solution.
pub fn solve_psd_least_norm(g: &Mat, v: &[f64], rel_tol: f64) -> Result<Vec<f64>, NumericError> {
    let eig = sym_eigen(g, "psd least-norm solve")?;
    let lmax = eig.values.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let n = g.rows();
    let mut c = vec![0.0; n];
    for (j, &lambda) in eig.values.iter().enumerate() {
        if lambda <= rel_tol * lmax {
            continue;
        }
        let w = eig.eigenvector(j);
        let proj: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
        let coeff = proj / lambda;
        for (ci, wi) in c.iter_mut().zip(&w) {
            *ci += coeff * wi;
        }
    }
    Ok(c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3_dirichlet() -> Mat {
        Mat::from_rows(&[
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ])
    }

    #[test]
    fn path3_closed_form() {
        let eig = sym_eigen(&path3_dirichlet(), "test").unwrap();
        let sqrt2 = 2f64.sqrt();
        let expect = [2.0 - sqrt2, 2.0, 2.0 + sqrt2];
        for (got, want) in eig.values.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let v1 = eig.eigenvector(0);
        let expect_v = [0.5, sqrt2 / 2.0, 0.5];
        for (got, want) in v1.iter().zip(expect_v) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn eigen_reconstructs_and_is_orthonormal() {
        // fixed pseudo-random symmetric matrix
        let n = 12;
        let mut a = Mat::zeros(n, n);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for i in 0..n {
            for j in i..n {
                let x = next();
                a[(i, j)] = x;
                a[(j, i)] = x;
            }
        }
        let eig = sym_eigen(&a, "test").unwrap();
        // A v_i = lambda_i v_i
        for i in 0..n {
            let v = eig.eigenvector(i);
            let av = a.matvec(&v);
            for (x, y) in av.iter().zip(&v) {
                assert!((x - eig.values[i] * y).abs() < 1e-10);
            }
        }
        // orthonormal columns
        for i in 0..n {
            for j in 0..n {
                let d = dot(&eig.eigenvector(i), &eig.eigenvector(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        // eigenvalues ascending
        for w in eig.values.windows(2) {
            assert!(w[0] <= w[1] + 1e-14);
        }
    }

    #[test]
    fn least_norm_solves_rank_deficient() {
        // G = diag(2, 0) embedded via rotation; v in range
        let g = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let v = [2.0, 2.0];
        let c = solve_psd_least_norm(&g, &v, 1e-12).unwrap();
        let gc = g.matvec(&c);
        assert!((gc[0] - 2.0).abs() < 1e-12 && (gc[1] - 2.0).abs() < 1e-12);
        // least-norm picks the symmetric solution (1, 1)
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12);
    }
}
