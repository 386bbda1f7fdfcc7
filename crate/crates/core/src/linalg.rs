//! Dense small-matrix kernels: thin SVD by one-sided Jacobi, cosine
//! similarity and Frobenius-norm comparisons.
//!
//! Everything here runs in `f64` and is deterministic: the same input bytes
//! always produce the same output bytes.

use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};

/// Row-major dense matrix of `f64`.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LccError::shape(
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(LccError::shape(
                    format!("row {i} of length {cols}"),
                    r.len(),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LccError::shape(
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LccError::shape(self.cols, x.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean of every column (the sample-mean of the rows).
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        if self.rows > 0 {
            let n = self.rows as f64;
            means.iter_mut().for_each(|m| *m /= n);
        }
        means
    }

    /// Returns the first non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(LccError::NonFinite {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
                value: self.data[i],
            }),
        }
    }

    /// Largest absolute deviation of `selfᵀ·self` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.cols {
            for j in i..self.cols {
                let g: f64 = (0..self.rows).map(|r| self.get(r, i) * self.get(r, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `M = U · diag(sigma) · Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// `rows × r`
    pub u: Matrix,
    /// `r` singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// `cols × r`, columns are right singular vectors.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// Right singular vector `i` as an owned vector.
    pub fn right_vector(&self, i: usize) -> Vec<f64> {
        self.v.column(i)
    }

    /// Recomputes `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (n, r) = self.u.shape();
        let d = self.v.rows();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for k in 0..r {
                let coef = self.u.get(i, k) * self.sigma[k];
                if coef == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += coef * self.v.get(j, k);
                }
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 80;

/// Thin SVD by one-sided Jacobi rotations.
///
/// A column pair is rotated while `|aᵢ·aⱼ| > tol·‖aᵢ‖‖aⱼ‖`, which is strictly
/// tighter than requiring every off-diagonal Gram entry to fall below
/// `1e-12·‖M‖_F²`. Each right singular vector is signed so that its entry of
/// largest magnitude is non-negative (first such index on ties).
pub fn svd_thin(m: &Matrix) -> Result<SvdFactors> {
    m.check_finite()?;
    if m.rows >= m.cols {
        jacobi_tall(m)
    } else {
        // Mᵀ = U' Σ V'ᵀ  =>  M = V' Σ U'ᵀ
        let t = jacobi_tall(&m.transpose())?;
        let mut f = SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        apply_sign_convention(&mut f);
        Ok(f)
    }
}

fn jacobi_tall(m: &Matrix) -> Result<SvdFactors> {
    let (n, d) = m.shape();
    // Columns of M stored contiguously: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| m.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (n.max(1) as f64);
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..d {
            for j in (i + 1)..d {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
        if sweep + 1 == MAX_SWEEPS {
            log::warn!("jacobi svd: no convergence after {MAX_SWEEPS} sweeps ({n}x{d})");
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    // Stable: equal singular values keep their column order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let cutoff = smax * 1e-13;

    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(d);
    for (&k, &s) in order.iter().zip(&sigma) {
        if s > cutoff && s > 0.0 {
            ucols.push(Some(cols[k].iter().map(|x| x / s).collect()));
        } else {
            ucols.push(None);
        }
    }
    let ucols = complete_basis(n, ucols);

    let mut u = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(d, d);
    for (c, (uc, &k)) in ucols.iter().zip(&order).enumerate() {
        for r in 0..n {
            u.set(r, c, uc[r]);
        }
        for r in 0..d {
            v.set(r, c, vcols[k][r]);
        }
    }
    let mut f = SvdFactors { u, sigma, v };
    apply_sign_convention(&mut f);
    Ok(f)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (a, b) = (&mut left[i], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xi = *x;
        let yi = *y;
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by Gram-Schmidt.
pub(crate) fn complete_basis(dim: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut fixed: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut next_basis = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let mut found = None;
                while next_basis < dim {
                    let mut cand = vec![0.0; dim];
                    cand[next_basis] = 1.0;
                    next_basis += 1;
                    for _ in 0..2 {
                        for f in &fixed {
                            let p = dot(&cand, f);
                            cand.iter_mut().zip(f).for_each(|(x, y)| *x -= p * y);
                        }
                    }
                    let nrm = norm(&cand);
                    if nrm > 1e-6 {
                        cand.iter_mut().for_each(|x| *x /= nrm);
                        found = Some(cand);
                        break;
                    }
                }
                let c = found.unwrap_or_else(|| vec![0.0; dim]);
                fixed.push(c.clone());
                out.push(c);
            }
        }
    }
    out
}

fn apply_sign_convention(f: &mut SvdFactors) {
    let r = f.sigma.len();
    for k in 0..r {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..f.v.rows() {
            let a = f.v.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.v.get(best, k) < 0.0 {
            for i in 0..f.v.rows() {
                let x = f.v.get(i, k);
                f.v.set(i, k, -x);
            }
            for i in 0..f.u.rows() {
                let x = f.u.get(i, k);
                f.u.set(i, k, -x);
            }
        }
    }
}

/// Cosine similarity, with a flag raised when either input is a zero
/// vector (the value is then defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(LccError::shape(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `‖a − b‖_F / max(‖a‖_F, 1e-30)`.
pub fn frobenius_rel_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(LccError::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / a.frobenius_norm().max(1e-30))
}
