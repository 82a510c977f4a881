//! Dense complex tensor algebra.
//!
//! [`ComplexTensor`] is a row-major n-dimensional array used for site tensors
//! and multi-index objects. Matrix-valued quantities use [`CMatrix`]
//! (`nalgebra::DMatrix<Complex64>`) directly, and the decompositions below
//! operate on that type.

use nalgebra::{DMatrix, Schur, SymmetricEigen, QR, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Absolute tolerance used for equality checks when nothing more specific applies.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Above this superoperator dimension the dominant eigenpair is found iteratively.
pub const DENSE_EIG_LIMIT: usize = 4096;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![C64::default(); len],
        }
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_matrix(m: &CMatrix) -> Self {
        let (r, cols) = m.shape();
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        Self {
            shape: vec![r, cols],
            data,
        }
    }

    pub fn from_vector(v: &[C64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_matrix(&CMatrix::identity(n, n))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: C64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| acc * e + i)
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<CMatrix> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(CMatrix::from_row_slice(
            self.shape[0],
            self.shape[1],
            &self.data,
        ))
    }

    /// Flattens to a matrix with the first `split` axes as rows.
    pub fn as_matrix(&self, split: usize) -> CMatrix {
        let rows: usize = self.shape[..split].iter().product();
        let cols: usize = self.shape[split..].iter().product();
        CMatrix::from_row_slice(rows, cols, &self.data)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Returns the tensor with axes reordered so that new axis `k` is old axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Dimension(format!(
                "invalid permutation {axes:?} for rank {r}"
            )));
        }
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let old_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[off]);
            // odometer increment over the new shape
            for k in (0..r).rev() {
                idx[k] += 1;
                off += perm_strides[k];
                if idx[k] < new_shape[k] {
                    break;
                }
                off -= perm_strides[k] * new_shape[k];
                idx[k] = 0;
            }
        }
        Ok(Self {
            shape: new_shape,
            data,
        })
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, a: C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z * a).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Contracts `a` with `b`, summing over each `(axis_of_a, axis_of_b)` pair.
///
/// The result carries the unpaired axes of `a` followed by those of `b`, each
/// in their original order.
pub fn contract(
    a: &ComplexTensor,
    b: &ComplexTensor,
    axes: &[(usize, usize)],
) -> Result<ComplexTensor> {
    let (ra, rb) = (a.rank(), b.rank());
    let mut used_a = vec![false; ra];
    let mut used_b = vec![false; rb];
    for &(i, j) in axes {
        if i >= ra || j >= rb {
            return Err(Error::Dimension(format!(
                "axis pair ({i},{j}) out of range for ranks ({ra},{rb})"
            )));
        }
        if used_a[i] || used_b[j] {
            return Err(Error::Dimension(format!(
                "axis pair ({i},{j}) repeats an axis"
            )));
        }
        if a.shape[i] != b.shape[j] {
            return Err(Error::Dimension(format!(
                "extent mismatch on pair ({i},{j}): {} vs {}",
                a.shape[i], b.shape[j]
            )));
        }
        used_a[i] = true;
        used_b[j] = true;
    }
    let free_a: Vec<usize> = (0..ra).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..rb).filter(|&k| !used_b[k]).collect();

    let perm_a: Vec<usize> = free_a
        .iter()
        .copied()
        .chain(axes.iter().map(|p| p.0))
        .collect();
    let perm_b: Vec<usize> = axes
        .iter()
        .map(|p| p.1)
        .chain(free_b.iter().copied())
        .collect();
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let k: usize = axes.iter().map(|p| a.shape[p.0]).product();

    let mut out = vec![C64::default(); m * n];
    for i in 0..m {
        let row = &pa.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in row.iter().enumerate() {
            if av == C64::default() {
                continue;
            }
            let src = &pb.data[kk * n..(kk + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
        }
    }
    let shape: Vec<usize> = free_a
        .iter()
        .map(|&q| a.shape[q])
        .chain(free_b.iter().map(|&q| b.shape[q]))
        .collect();
    Ok(ComplexTensor { shape, data: out })
}

/// Thin singular value decomposition `m = u * diag(s) * vh`, `s` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub vh: CMatrix,
}

impl Svd {
    pub fn rank(&self, tol: f64) -> usize {
        self.s.iter().filter(|&&x| x > tol).count()
    }

    pub fn reconstruct(&self) -> CMatrix {
        let mut us = self.u.clone();
        for (j, &sv) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sv);
        }
        us * &self.vh
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> Svd {
        Svd {
            u: self.u.columns(0, r).into_owned(),
            s: self.s[..r].to_vec(),
            vh: self.vh.rows(0, r).into_owned(),
        }
    }
}

pub fn svd(m: &CMatrix) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Svd {
            u: CMatrix::zeros(rows, 0),
            s: vec![],
            vh: CMatrix::zeros(0, cols),
        };
    }
    let dec = SVD::new(m.clone(), true, true);
    let u = dec.u.expect("requested U");
    let vh = dec.v_t.expect("requested V^H");
    let s: Vec<f64> = dec.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let u2 = CMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]);
    let vh2 = CMatrix::from_fn(k, cols, |i, j| vh[(order[i], j)]);
    let s2 = order.iter().map(|&o| s[o]).collect();
    let out = Svd {
        u: u2,
        s: s2,
        vh: vh2,
    };
    if svd_is_accurate(m, &out) {
        out
    } else {
        jacobi_svd(m)
    }
}

/// The LAPACK-style bidiagonal routine occasionally returns inaccurate
/// factors for rank-deficient complex input; this check catches those.
fn svd_is_accurate(m: &CMatrix, dec: &Svd) -> bool {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let recon = (dec.reconstruct() - m).norm();
    let k = dec.s.len();
    let id = CMatrix::identity(k, k);
    let uo = (dec.u.adjoint() * &dec.u - &id).norm();
    let vo = (&dec.vh * dec.vh.adjoint() - &id).norm();
    dec.s.iter().all(|x| x.is_finite()) && recon <= 1e-12 * scale && uo <= 1e-10 && vo <= 1e-10
}

/// One-sided Jacobi SVD. Slower than the bidiagonal route but accurate to
/// working precision on every input.
fn jacobi_svd(m: &CMatrix) -> Svd {
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.adjoint());
        return Svd {
            u: t.vh.adjoint(),
            s: t.s,
            vh: t.u.adjoint(),
        };
    }
    let (rows, n) = m.shape();
    let mut a = m.clone();
    let mut v = CMatrix::identity(n, n);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dotc(&a.column(q));
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let ph = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let x = mat[(i, p)];
                        let y = mat[(i, q)] * ph.conj();
                        mat[(i, p)] = x * cs - y * sn;
                        mat[(i, q)] = x * sn + y * cs;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let floor = s[0] * 1e-14;
    let live: Vec<nalgebra::DVector<C64>> = order
        .iter()
        .filter(|&&j| norms[j] > floor && norms[j] > 0.0)
        .map(|&j| a.column(j) / cr(norms[j]))
        .collect();
    let u = if live.is_empty() {
        CMatrix::identity(rows, n)
    } else {
        complete_unitary(&CMatrix::from_columns(&live))
            .columns(0, n)
            .into_owned()
    };
    let vh = CMatrix::from_fn(n, n, |i, j| v[(j, order[i])].conj());
    Svd { u, s, vh }
}

/// Thin QR with the diagonal of `R` made real and non-negative.
pub fn qr_positive(m: &CMatrix) -> (CMatrix, CMatrix) {
    let dec = QR::new(m.clone());
    let mut q = dec.q();
    let mut r = dec.r();
    for j in 0..r.nrows() {
        let d = r[(j, j)];
        let n = d.norm();
        if n > 0.0 {
            let ph = d / n;
            q.column_mut(j).scale_mut_c(ph);
            r.row_mut(j).scale_mut_c(ph.conj());
        }
    }
    (q, r)
}

trait ScaleC {
    fn scale_mut_c(&mut self, a: C64);
}

impl<R: nalgebra::Dim, Cc: nalgebra::Dim, S: nalgebra::StorageMut<C64, R, Cc>> ScaleC
    for nalgebra::Matrix<C64, R, Cc, S>
{
    fn scale_mut_c(&mut self, a: C64) {
        for z in self.iter_mut() {
            *z *= a;
        }
    }
}

/// Nearest unitary to a square full-rank matrix, `m (m^† m)^{-1/2}`.
pub fn polar_unitary(m: &CMatrix) -> Result<CMatrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "polar_unitary needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    polar_isometry(m)
}

/// Nearest isometry (orthonormal columns) to a tall full-column-rank matrix.
pub fn polar_isometry(m: &CMatrix) -> Result<CMatrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Dimension(format!(
            "polar_isometry needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let dec = svd(m);
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let smin = dec.s.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin <= 1e-12 * smax.max(1.0) {
        return Err(Error::Singular(format!(
            "smallest singular value {smin:.3e} (largest {smax:.3e})"
        )));
    }
    Ok(&dec.u * &dec.vh)
}

/// Unitary factor `U V^†` of the polar decomposition; defined for singular inputs.
pub fn polar_factor(m: &CMatrix) -> CMatrix {
    let dec = svd(m);
    &dec.u * &dec.vh
}

/// Extends a set of orthonormal columns to a full unitary by Gram-Schmidt
/// against the canonical basis vectors in index order.
pub fn complete_unitary(cols: &CMatrix) -> CMatrix {
    let n = cols.nrows();
    let mut basis: Vec<nalgebra::DVector<C64>> =
        cols.column_iter().map(|c| c.into_owned()).collect();
    let mut k = 0;
    while basis.len() < n && k < n {
        let mut v = nalgebra::DVector::<C64>::zeros(n);
        v[k] = cr(1.0);
        for _ in 0..2 {
            for b in &basis {
                let p = b.dotc(&v);
                v -= b * p;
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            basis.push(v / cr(nv));
        }
        k += 1;
    }
    CMatrix::from_columns(&basis)
}

/// Hermitian eigendecomposition, eigenvalues descending with matching columns.
pub fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    if n == 0 {
        return (vec![], CMatrix::zeros(0, 0));
    }
    let h = hermitize(m);
    let dec = SymmetricEigen::new(h);
    let vals: Vec<f64> = dec.eigenvalues.iter().copied().collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vals[b]
            .partial_cmp(&vals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vecs = CMatrix::from_fn(n, n, |i, j| dec.eigenvectors[(i, order[j])]);
    (order.iter().map(|&o| vals[o]).collect(), vecs)
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * cr(0.5)
}

/// Eigenvalues of a general complex square matrix from its Schur form.
pub fn eigenvalues(m: &CMatrix) -> Result<Vec<C64>> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::Dimension(
            "eigenvalues of a non-square matrix".into(),
        ));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    if n == 1 {
        return Ok(vec![m[(0, 0)]]);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(Error::Convergence {
        iterations: 100_000,
        residual: f64::NAN,
    })?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

/// Square root and inverse-free functions of a positive semidefinite Hermitian matrix.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (vals, vecs) = eigh(m);
    let mut scaled = vecs.clone();
    for (j, &v) in vals.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut_c(cr(s));
    }
    &scaled * vecs.adjoint()
}

/// Matrix exponential of `i * t * h` for Hermitian `h`.
pub fn expi_hermitian(h: &CMatrix, t: f64) -> CMatrix {
    let (vals, vecs) = eigh(h);
    let mut scaled = vecs.clone();
    for (j, &v) in vals.iter().enumerate() {
        scaled
            .column_mut(j)
            .scale_mut_c(C64::from_polar(1.0, t * v));
    }
    &scaled * vecs.adjoint()
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `max |u^† u - I|` over entries.
pub fn unitarity_residual(u: &CMatrix) -> f64 {
    let n = u.ncols();
    max_abs(&(u.adjoint() * u - CMatrix::identity(n, n)))
}

/// Row-major flattening of a matrix.
pub fn vec_rows(m: &CMatrix) -> Vec<C64> {
    let (r, cols) = m.shape();
    let mut out = Vec::with_capacity(r * cols);
    for i in 0..r {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unvec_rows(v: &[C64], rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_row_slice(rows, cols, v)
}

pub fn trace(m: &CMatrix) -> C64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

/// A linear map on `dim x dim` matrices.
pub trait MatrixMap {
    fn dim(&self) -> usize;

    fn apply(&self, x: &CMatrix) -> CMatrix;

    /// Superoperator acting on the row-major flattening, if cheaply available.
    fn superoperator(&self) -> Option<CMatrix> {
        None
    }
}

/// Wraps a closure as a [`MatrixMap`].
pub struct FnMap<F: Fn(&CMatrix) -> CMatrix> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&CMatrix) -> CMatrix> MatrixMap for FnMap<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &CMatrix) -> CMatrix {
        (self.f)(x)
    }
}

/// Builds the superoperator of `op` by applying it to the matrix units.
pub fn superoperator_of(op: &dyn MatrixMap) -> CMatrix {
    if let Some(s) = op.superoperator() {
        return s;
    }
    let d = op.dim();
    let n = d * d;
    let mut s = CMatrix::zeros(n, n);
    for k in 0..n {
        let mut unit = CMatrix::zeros(d, d);
        unit[(k / d, k % d)] = cr(1.0);
        let img = vec_rows(&op.apply(&unit));
        for (r, v) in img.into_iter().enumerate() {
            s[(r, k)] = v;
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct DominantEig {
    pub eigenvalue: C64,
    /// Eigenmatrix normalized to unit Frobenius norm.
    pub eigenmatrix: CMatrix,
    /// True when the two largest eigenvalue magnitudes differ by less than `1e-8`.
    pub degenerate: bool,
    /// Magnitude of the second-largest eigenvalue, when known.
    pub subleading: Option<f64>,
    pub iterations: usize,
}

pub const DEGENERACY_GAP: f64 = 1e-8;

/// Dominant-magnitude eigenpair of a linear map on matrices.
///
/// Dense eigendecomposition below [`DENSE_EIG_LIMIT`] superoperator dimension,
/// two-vector subspace iteration above it.
pub fn dominant_left_eigs(op: &dyn MatrixMap, tol: f64, max_iter: usize) -> Result<DominantEig> {
    let d = op.dim();
    if d * d <= DENSE_EIG_LIMIT {
        dominant_dense(op)
    } else {
        dominant_iterative(op, tol, max_iter)
    }
}

fn dominant_dense(op: &dyn MatrixMap) -> Result<DominantEig> {
    let d = op.dim();
    let s = superoperator_of(op);
    let mut vals = eigenvalues(&s)?;
    vals.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lead = vals[0];
    let subleading = vals.get(1).map(|v| v.norm());
    let degenerate = subleading.is_some_and(|s2| lead.norm() - s2 < DEGENERACY_GAP);
    let n = s.nrows();
    let shifted = &s - CMatrix::identity(n, n) * lead;
    let dec = svd(&shifted);
    let last = dec.vh.nrows() - 1;
    let v: Vec<C64> = dec.vh.row(last).iter().map(|z| z.conj()).collect();
    let mut m = unvec_rows(&v, d, d);
    let nrm = m.norm();
    m /= cr(nrm);
    Ok(DominantEig {
        eigenvalue: lead,
        eigenmatrix: m,
        degenerate,
        subleading,
        iterations: 0,
    })
}

fn dominant_iterative(op: &dyn MatrixMap, tol: f64, max_iter: usize) -> Result<DominantEig> {
    let d = op.dim();
    // deterministic, generic starting block
    let x0 = CMatrix::from_fn(d, d, |i, j| {
        c(
            1.0 + ((i * 7 + j * 3) % 11) as f64 / 11.0,
            ((i + 2 * j) % 5) as f64 / 7.0,
        )
    });
    let x1 = CMatrix::from_fn(d, d, |i, j| {
        c(
            ((i * 5 + j) % 13) as f64 / 13.0 - 0.5,
            1.0 - ((i + j) % 3) as f64 / 3.0,
        )
    });
    let mut block = [x0, x1];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        // orthonormalize block in the Frobenius inner product
        let n0 = block[0].norm();
        block[0] /= cr(n0);
        let p = block[0].dotc(&block[1]);
        block[1] = &block[1] - &block[0] * p;
        let n1 = block[1].norm();
        if n1 > 0.0 {
            block[1] /= cr(n1);
        }
        let images = [op.apply(&block[0]), op.apply(&block[1])];
        let mut h = CMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                h[(i, j)] = block[i].dotc(&images[j]);
            }
        }
        let mut ritz = eigenvalues(&h)?;
        ritz.sort_by(|a, b| {
            b.norm()
                .partial_cmp(&a.norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let lead = ritz[0];
        // Ritz vector for the leading value
        let (a, b) = if (h[(0, 1)]).norm() > 1e-300 {
            (h[(0, 1)], lead - h[(0, 0)])
        } else if (h[(1, 0)]).norm() > 1e-300 {
            (lead - h[(1, 1)], h[(1, 0)])
        } else if (h[(0, 0)] - lead).norm() < (h[(1, 1)] - lead).norm() {
            (cr(1.0), cr(0.0))
        } else {
            (cr(0.0), cr(1.0))
        };
        let mut v = &block[0] * a + &block[1] * b;
        let nv = v.norm();
        v /= cr(nv);
        let av = op.apply(&v);
        residual = (&av - &v * lead).norm();
        if residual < tol {
            let sub = ritz[1].norm();
            return Ok(DominantEig {
                eigenvalue: lead,
                eigenmatrix: v,
                degenerate: lead.norm() - sub < DEGENERACY_GAP,
                subleading: Some(sub),
                iterations: it,
            });
        }
        block = images;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}
