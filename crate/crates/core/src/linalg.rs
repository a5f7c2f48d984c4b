//! Small dense linear-algebra helpers shared by the SH fit, the DTI fit and
//! the phantom generator. Matrices are row-major `Vec<f64>` slices; sizes stay
//! in the tens, so plain O(n³) routines are sufficient.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    /// `self^T * self` (Gram matrix), exploiting symmetry.
    pub fn gram(&self) -> Mat {
        let n = self.cols;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for r in 0..self.rows {
                    s += self.at(r, i) * self.at(r, j);
                }
                *g.at_mut(i, j) = s;
                *g.at_mut(j, i) = s;
            }
        }
        g
    }

    /// `self^T * v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let vr = v[r];
            for c in 0..self.cols {
                out[c] += self.at(r, c) * vr;
            }
        }
        out
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut s = 0.0;
            for c in 0..self.cols {
                s += self.at(r, c) * v[c];
            }
            out[r] = s;
        }
        out
    }
}

/// Solves `a x = b` for square `a` by Gauss-Jordan elimination with partial
/// pivoting. Errors when a pivot collapses to (near) zero.
pub fn solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve expects square system, got {}x{} with rhs {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        // pivot search
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in (col + 1)..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::IllConditioned {
                cond: f64::INFINITY,
                cap: f64::INFINITY,
                context: "singular pivot in solve".into(),
            });
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= d;
        }
        x[col] /= d;
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape("symmetric_eigenvalues expects square".into()));
    }
    let mut m = a.data.clone();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[idx(i, j)] * m[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob_norm(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[idx(i, i)]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eig)
}

fn frob_norm(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Condition number of a symmetric positive semi-definite matrix,
/// `lambda_max / lambda_min`. Infinite when the smallest eigenvalue is
/// non-positive.
pub fn spd_condition_number(a: &Mat) -> Result<f64> {
    let eig = symmetric_eigenvalues(a)?;
    let min = eig.first().copied().unwrap_or(0.0);
    let max = eig.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Least squares via Householder QR: minimizes `||a x - b||_2` for a tall
/// matrix `a` (rows >= cols). Used as the orthogonal-decomposition fallback
/// behind the normal-equations solver.
pub fn qr_least_squares(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(Error::Shape("qr_least_squares rhs length".into()));
    }
    if m < n {
        return Err(Error::Underdetermined(format!(
            "{} rows < {} unknowns",
            m, n
        )));
    }
    let mut r = a.data.clone();
    let mut y = b.to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    for k in 0..n {
        // Householder vector for column k
        let mut norm = 0.0;
        for i in k..m {
            norm += r[idx(i, k)] * r[idx(i, k)];
        }
        let norm = norm.sqrt();
        if norm < 1e-300 {
            return Err(Error::IllConditioned {
                cond: f64::INFINITY,
                cap: f64::INFINITY,
                context: "rank-deficient column in QR".into(),
            });
        }
        let alpha = if r[idx(k, k)] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; m - k];
        v[0] = r[idx(k, k)] - alpha;
        for i in (k + 1)..m {
            v[i - k] = r[idx(i, k)];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv < 1e-300 {
            continue;
        }
        // apply H = I - 2 v v^T / (v^T v) to R and y
        for j in k..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * r[idx(i, j)];
            }
            let f = 2.0 * dot / vtv;
            for i in k..m {
                r[idx(i, j)] -= f * v[i - k];
            }
        }
        let mut dot = 0.0;
        for i in k..m {
            dot += v[i - k] * y[i];
        }
        let f = 2.0 * dot / vtv;
        for i in k..m {
            y[i] -= f * v[i - k];
        }
    }
    // back substitution on the upper-triangular block
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in (i + 1)..n {
            s -= r[idx(i, j)] * x[j];
        }
        let d = r[idx(i, i)];
        if d.abs() < 1e-300 {
            return Err(Error::IllConditioned {
                cond: f64::INFINITY,
                cap: f64::INFINITY,
                context: "zero diagonal in QR back substitution".into(),
            });
        }
        x[i] = s / d;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_rows(&[
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ]);
        let x_true = [1.0, -2.0, 0.5];
        let b = a.mul_vec(&x_true);
        let x = solve(&a, &b).unwrap();
        for (xi, ti) in x.iter().zip(x_true.iter()) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal() {
        let a = Mat::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ]);
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 2.0).abs() < 1e-12);
        assert!((e[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenvalues_of_symmetric_2x2() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn qr_matches_normal_equations_on_tall_system() {
        let a = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            vec![1.0, 3.0],
        ]);
        let b = [1.0, 2.0, 2.5, 4.0];
        let x_qr = qr_least_squares(&a, &b).unwrap();
        let g = a.gram();
        let rhs = a.tr_mul_vec(&b);
        let x_ne = solve(&g, &rhs).unwrap();
        for (p, q) in x_qr.iter().zip(x_ne.iter()) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}
