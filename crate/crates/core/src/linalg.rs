//! Dense linear algebra kernels: a row-major matrix, one-sided Jacobi SVD,
//! cosine distance and orthogonal projection onto a column basis.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{ensure_dim, Error, Result};
use crate::math::sqrt;

/// Relative tolerance for decompositions.
pub const DECOMP_TOL: f64 = 1e-8;
/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;
// Columns this small relative to the largest are rounding noise.
const NULL_COLUMN_TOL: f64 = 1e-14;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim("matrix entries", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_dim("matrix row length", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so guard zero-width matrices
        let width = self.cols.max(1);
        self.data
            .chunks_exact(width)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        ensure_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        ensure_dim("matrix rows", self.rows, other.rows)?;
        ensure_dim("matrix cols", self.cols, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        ensure_dim("vstack columns", self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for RealMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for RealMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `A = U diag(s) Vᵀ` with `k = min(m, n)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub left_vectors: RealMatrix,
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub right_vectors: RealMatrix,
}

impl SvdResult {
    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> RealMatrix {
        let m = self.left_vectors.rows();
        let n = self.right_vectors.rows();
        let mut out = RealMatrix::zeros(m, n);
        for (c, &s) in self.singular_values.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let u = self.left_vectors[(i, c)] * s;
                for j in 0..n {
                    out[(i, j)] += u * self.right_vectors[(j, c)];
                }
            }
        }
        out
    }

    /// Count of singular values above `DECOMP_TOL · σ_max`.
    pub fn numerical_rank(&self) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > DECOMP_TOL * top)
            .count()
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Equal singular values keep the order of the columns they came from.
pub fn svd(a: &RealMatrix) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(Error::Empty("svd"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdResult {
            left_vectors: t.right_vectors,
            singular_values: t.singular_values,
            right_vectors: t.left_vectors,
        })
    }
}

// Rotates column pairs of a column-major copy until they are mutually
// orthogonal; requires m >= n.
fn jacobi_tall(a: &RealMatrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += wp[i] * wp[i];
                        beta += wq[i] * wq[i];
                        gamma += wp[i] * wq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || libm::fabs(gamma) <= f64::EPSILON * sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (libm::fabs(zeta) + sqrt(1.0 + zeta * zeta));
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep input column order
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(core::cmp::Ordering::Equal));

    let top = norms[order[0]];
    let mut left = RealMatrix::zeros(m, n);
    let mut right = RealMatrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        right.set_column(k, &v[j]);
        if s > NULL_COLUMN_TOL * top {
            let u: Vec<f64> = w[j].iter().map(|x| x / s).collect();
            left.set_column(k, &u);
            singular_values.push(s);
        } else {
            singular_values.push(if s > 0.0 { s } else { 0.0 });
            deficient.push(k);
        }
    }
    // Numerically null columns still need orthonormal left vectors.
    if !deficient.is_empty() {
        complete_orthonormal(&mut left, &deficient);
    }
    Ok(SvdResult {
        left_vectors: left,
        singular_values,
        right_vectors: right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

// Fills the listed columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(basis: &mut RealMatrix, missing: &[usize]) {
    let m = basis.rows();
    let mut filled: Vec<usize> = (0..basis.cols()).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &target in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &c in &filled {
                    let col = basis.column(c);
                    let d = dot(&e, &col);
                    for (x, y) in e.iter_mut().zip(&col) {
                        *x -= d * y;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-6 {
                let unit: Vec<f64> = e.iter().map(|x| x / nrm).collect();
                basis.set_column(target, &unit);
                filled.push(target);
                break;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// `1 − ⟨a,b⟩ / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim("cosine_distance", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateVector);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Smallest set of leading left singular vectors of `a` whose squared
/// singular values carry at least `energy` of the total.
///
/// Singular values below `DECOMP_TOL · σ_max` count as zero, so
/// `energy = 1` yields the numerical rank. An all-zero matrix yields a
/// basis with zero columns.
pub fn energy_basis(a: &RealMatrix, energy: f64) -> Result<RealMatrix> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(crate::error::invalid("energy", "must lie in (0, 1]"));
    }
    if a.is_empty() {
        return Ok(RealMatrix::zeros(a.rows(), 0));
    }
    let dec = svd(a)?;
    let rank = dec.numerical_rank();
    if rank == 0 {
        return Ok(RealMatrix::zeros(a.rows(), 0));
    }
    let k = energy_cutoff(&dec.singular_values[..rank], energy);
    let mut basis = RealMatrix::zeros(a.rows(), k);
    for c in 0..k {
        basis.set_column(c, &dec.left_vectors.column(c));
    }
    Ok(basis)
}

/// Smallest `k ≥ 1` with `Σ_{i<k} σ_i² ≥ energy · Σ σ_i²`.
pub fn energy_cutoff(singular_values: &[f64], energy: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return 0;
    }
    let target = energy * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

/// `B Bᵀ v` for a basis `B` with orthonormal columns.
pub fn project(v: &[f64], basis: &RealMatrix) -> Result<Vec<f64>> {
    ensure_dim("project", basis.rows(), v.len())?;
    let mut out = vec![0.0; v.len()];
    for c in 0..basis.cols() {
        let mut coef = 0.0;
        for (i, x) in v.iter().enumerate() {
            coef += basis[(i, c)] * x;
        }
        if coef == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += coef * basis[(i, c)];
        }
    }
    Ok(out)
}
