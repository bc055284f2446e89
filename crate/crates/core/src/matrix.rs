//! Dense row-major matrices and the handful of kernels the adapter pipeline
//! needs: products, norms, cosine similarity and a thin SVD.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slow compared with
//! bidiagonalisation-based methods but accurate to machine precision on the
//! small matrices used here, and its stopping rule is easy to reason about:
//! iteration ends once every column pair is orthogonal to within `tol`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by [`cosine`].
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// Default rotation threshold for [`svd_thin`].
pub const JACOBI_TOL: f64 = 1e-14;

const MAX_SWEEPS: usize = 100;

/// Singular values at or below this are treated as exact zeros when building
/// the left basis; their columns are completed by Gram-Schmidt instead.
const NULL_SINGULAR: f64 = 1e-150;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Build a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from a slice of equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Data(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

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

    /// Internal constructor for results of arithmetic on already-valid
    /// matrices.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub(crate) fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, t: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * t).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Sub-matrix `self[rows, cols]`.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.rows) {
            return Err(Error::Map(format!("row index {r} out of bounds for {} rows", self.rows)));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Map(format!("column index {c} out of bounds for {} columns", self.cols)));
        }
        Ok(Self::from_fn(rows.len(), cols.len(), |i, j| self.get(rows[i], cols[j])))
    }

    /// Horizontal concatenation `[m_1, m_2, ...]`.
    pub fn hcat(parts: &[&DenseMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape {
                op: "hcat",
                left: first.shape(),
                right: bad.shape(),
            });
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix::from_raw(a.rows, b.cols, out))
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0; a.cols * b.cols];
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out[i * b.cols..(i + 1) * b.cols].iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(DenseMatrix::from_raw(a.cols, b.cols, out))
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(DenseMatrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, with the convention that a (near-)zero vector has
/// cosine 0 with everything.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine",
            left: (1, u.len()),
            right: (1, v.len()),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < ZERO_NORM_TOL || nv < ZERO_NORM_TOL {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Thin singular value decomposition `m = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Left singular vectors, `rows × k`.
    pub u: DenseMatrix,
    /// Nonincreasing, nonnegative; length `k = min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `cols × k`.
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_at(&self, rel_tol: f64) -> usize {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s >= rel_tol * smax)
            .count()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn recompose(&self) -> DenseMatrix {
        let us = DenseMatrix::from_fn(self.u.rows, self.u.cols, |i, j| {
            self.u.get(i, j) * self.singular_values[j]
        });
        matmul_nt(&us, &self.v).expect("svd factors are conformant")
    }
}

/// Thin SVD by one-sided Jacobi rotations.
///
/// Columns of `U` are sign-normalised so that the entry of largest magnitude
/// is nonnegative (first such entry on ties); `V` is flipped to match.
pub fn svd_thin(m: &DenseMatrix, tol: f64) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::Param("svd of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Param(format!("svd tolerance must be positive, got {tol}")));
    }
    if !m.is_finite() {
        return Err(Error::Data("svd input contains non-finite entries".into()));
    }

    let (mut u, sigma, mut v) = if m.rows >= m.cols {
        let (u, s, v) = one_sided_jacobi(m, tol)?;
        (u, s, v)
    } else {
        let (u, s, v) = one_sided_jacobi(&m.transpose(), tol)?;
        (v, s, u)
    };

    for j in 0..u.cols {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..u.rows {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..u.rows {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows {
                v.set(i, j, -v.get(i, j));
            }
        }
    }

    Ok(SvdResult {
        u,
        singular_values: sigma,
        v,
    })
}

/// One-sided Jacobi on a tall (`rows >= cols`) matrix. Returns
/// `(U: rows×cols, σ, V: cols×cols)` sorted by nonincreasing σ.
fn one_sided_jacobi(a: &DenseMatrix, tol: f64) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let (rows, cols) = a.shape();
    debug_assert!(rows >= cols);
    // Column-major working copies.
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns this small relative to the whole matrix are rounding noise;
    // rotating them against each other never settles.
    let negligible = (f64::EPSILON * a.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Data(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = work.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > NULL_SINGULAR {
            ucols.push(work[j].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; rows]);
            pending.push(slot);
        }
    }
    complete_basis(&mut ucols, &pending);

    let u = DenseMatrix::from_fn(rows, cols, |i, j| ucols[j][i]);
    let v = DenseMatrix::from_fn(cols, cols, |i, j| vcols[order[j]][i]);
    Ok((u, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the `pending` columns with unit vectors orthogonal to every other
/// column, choosing among the standard basis vectors the one with the largest
/// residual after projection.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    let dim = cols.first().map_or(0, |c| c.len());
    for &slot in pending {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || (pending.contains(&k) && norm(other) == 0.0) {
                        continue;
                    }
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let n = norm(&cand);
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, cand));
            }
        }
        if let Some((n, cand)) = best {
            cols[slot] = cand.into_iter().map(|c| c / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        let g = matmul_tn(q, q).unwrap();
        g.max_abs_diff(&DenseMatrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn constructors_reject_bad_data() {
        assert!(matches!(DenseMatrix::new(2, 2, vec![1.0; 3]), Err(Error::Data(_))));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            DenseMatrix::new(1, 1, vec![f64::INFINITY]),
            Err(Error::Data(_))
        ));
        assert!(DenseMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_outer_product() {
        let col = m(&[&[1.0], &[2.0]]);
        let row = m(&[&[3.0, 4.0]]);
        assert_eq!(
            matmul(&col, &row).unwrap(),
            m(&[&[3.0, 4.0], &[6.0, 8.0]])
        );
    }

    #[test]
    fn matmul_annihilator() {
        let a = m(&[&[1.0, -2.0, 5.0], &[3.0, 4.0, 0.5]]);
        assert_eq!(
            matmul(&a, &DenseMatrix::zeros(3, 4)).unwrap(),
            DenseMatrix::zeros(2, 4)
        );
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = matmul(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 3)).unwrap_err();
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = m(&[&[1.0, 2.0, 0.0], &[-1.0, 0.5, 3.0]]);
        let b = m(&[&[2.0, 1.0], &[0.0, -4.0]]);
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose(), &b).unwrap());
        let c = m(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(matmul_nt(&a, &c).unwrap(), matmul(&a, &c.transpose()).unwrap());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn svd_identity() {
        let s = svd_thin(&DenseMatrix::identity(2), JACOBI_TOL).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn svd_rank_deficient_diagonal() {
        let s = svd_thin(&m(&[&[3.0, 0.0], &[0.0, 0.0]]), JACOBI_TOL).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 0.0]);
        assert_eq!(s.u.column(0), vec![1.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn svd_antidiagonal_reconstructs() {
        let a = m(&[&[0.0, 2.0], &[1.0, 0.0]]);
        let s = svd_thin(&a, JACOBI_TOL).unwrap();
        assert!((s.singular_values[0] - 2.0).abs() < 1e-14);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-14);
        assert!(s.recompose().max_abs_diff(&a).unwrap() <= 1e-10);
    }

    #[test]
    fn svd_wide_and_zero_inputs() {
        let wide = m(&[&[1.0, 2.0, 3.0]]);
        let s = svd_thin(&wide, JACOBI_TOL).unwrap();
        assert_eq!(s.u.shape(), (1, 1));
        assert_eq!(s.v.shape(), (3, 1));
        assert!(s.recompose().max_abs_diff(&wide).unwrap() < 1e-14);

        let zero = DenseMatrix::zeros(3, 2);
        let s = svd_thin(&zero, JACOBI_TOL).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn svd_rejects_bad_input() {
        assert!(matches!(svd_thin(&DenseMatrix::zeros(0, 0), JACOBI_TOL), Err(Error::Param(_))));
        assert!(matches!(svd_thin(&DenseMatrix::identity(2), 0.0), Err(Error::Param(_))));
        let bad = DenseMatrix::from_raw(1, 1, vec![f64::NAN]);
        assert!(matches!(svd_thin(&bad, JACOBI_TOL), Err(Error::Data(_))));
    }

    fn arb_matrix() -> impl Strategy<Value = DenseMatrix> {
        (1usize..=16, 1usize..=16).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| DenseMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn svd_is_orthonormal_and_reconstructs(a in arb_matrix()) {
            let s = svd_thin(&a, JACOBI_TOL).unwrap();
            let k = a.rows().min(a.cols());
            prop_assert_eq!(s.singular_values.len(), k);
            prop_assert!(orthonormality_error(&s.u) <= 1e-8);
            prop_assert!(orthonormality_error(&s.v) <= 1e-8);
            prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s.singular_values.iter().all(|&x| x >= 0.0));
            let resid = s.recompose().sub(&a).unwrap().frobenius_norm();
            prop_assert!(resid <= 1e-8 * a.frobenius_norm().max(1e-300));
        }
    }

    proptest! {
        #[test]
        fn svd_singular_values_scale(a in arb_matrix(), t in 0.01f64..100.0) {
            let s1 = svd_thin(&a, JACOBI_TOL).unwrap();
            let s2 = svd_thin(&a.scale(t), JACOBI_TOL).unwrap();
            let smax = s1.singular_values[0].max(1.0);
            for (x, y) in s1.singular_values.iter().zip(&s2.singular_values) {
                prop_assert!((t * x - y).abs() <= 1e-8 * t * smax);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            t in 0.1f64..10.0,
        ) {
            let c = cosine(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-15);
            let su: Vec<f64> = u.iter().map(|x| x * t).collect();
            if norm(&u) * t.min(1.0) > 1e-9 {
                prop_assert!((c - cosine(&su, &v).unwrap()).abs() < 1e-12);
            }
        }
    }
}
