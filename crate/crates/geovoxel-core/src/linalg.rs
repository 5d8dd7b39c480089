//! Dense row-major matrices and a one-sided Jacobi thin SVD.
//!
//! The problem sizes here are small (hundreds of rows, a few thousand
//! columns), so a plain `Vec<f64>` matrix with straightforward loops is
//! fast enough and keeps results bit-deterministic.

use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Two distinct rows, mutably. Panics if `a == b`.
    fn two_rows_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (head, tail) = self.data.split_at_mut(hi * self.cols);
        let lo_row = &mut head[lo * self.cols..(lo + 1) * self.cols];
        let hi_row = &mut tail[..self.cols];
        if a < b {
            (lo_row, hi_row)
        } else {
            (hi_row, lo_row)
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// self (m×k) · other (k×n).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = out.row_mut(i);
            for (k, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rhs = other.row(k);
                for (d, &r) in dst.iter_mut().zip(rhs.iter()) {
                    *d += l * r;
                }
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        for m in means.iter_mut() {
            *m /= n;
        }
        means
    }

    /// Subtracts `shift` from every row.
    pub fn sub_row_vector(&self, shift: &[f64]) -> Matrix {
        assert_eq!(shift.len(), self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &s) in out.row_mut(r).iter_mut().zip(shift) {
                *v -= s;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        fmath::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Thin SVD `a = u · diag(s) · vᵀ` with `r = min(rows, cols)` columns in
/// `u` (rows×r) and `v` (cols×r); `s` is sorted descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

pub fn thin_svd(a: &Matrix) -> ThinSvd {
    if a.rows() >= a.cols() {
        let (u, s, v) = jacobi_svd_tall(a);
        ThinSvd { u, s, v }
    } else {
        // a = u s vᵀ  ⇔  aᵀ = v s uᵀ
        let at = a.transpose();
        let (u, s, v) = jacobi_svd_tall(&at);
        ThinSvd { u: v, s, v: u }
    }
}

/// One-sided Jacobi on a tall (rows ≥ cols) matrix: columns of `a` are
/// rotated until mutually orthogonal, which yields u·s directly and
/// accumulates v from the rotations.
fn jacobi_svd_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let m = a.rows();
    let n = a.cols();
    // Work on the transpose so each column of `a` is a contiguous row.
    let mut w = a.transpose();
    let mut v = Matrix::identity(n);
    let eps = 1e-14;
    let max_sweeps = 100;

    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                {
                    let rp = w.row(p);
                    let rq = w.row(q);
                    for i in 0..m {
                        alpha += rp[i] * rp[i];
                        beta += rq[i] * rq[i];
                        gamma += rp[i] * rq[i];
                    }
                }
                if fmath::abs(gamma) <= eps * fmath::sqrt(alpha * beta) {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + fmath::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + fmath::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = c * t;
                {
                    let (rp, rq) = w.two_rows_mut(p, q);
                    for i in 0..m {
                        let (x, y) = (rp[i], rq[i]);
                        rp[i] = c * x - s * y;
                        rq[i] = s * x + c * y;
                    }
                }
                {
                    let (vp, vq) = v.two_rows_mut(p, q);
                    for i in 0..n {
                        let (x, y) = (vp[i], vq[i]);
                        vp[i] = c * x - s * y;
                        vq[i] = s * x + c * y;
                    }
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| fmath::sqrt(w.row(j).iter().map(|x| x * x).sum()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        let sv = sigma[src];
        s_sorted[dst] = sv;
        if sv > 0.0 {
            let col = w.row(src);
            for i in 0..m {
                u[(i, dst)] = col[i] / sv;
            }
        }
        for i in 0..n {
            v_sorted[(i, dst)] = v[(src, i)];
        }
    }
    sigma.clear();
    (u, s_sorted, v_sorted)
}
