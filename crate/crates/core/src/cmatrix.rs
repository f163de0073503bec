//! Small dense complex matrices.
//!
//! Everything in this crate works with matrices of dimension at most 16, so
//! storage is a flat row-major `Vec` and the Hermitian eigensolver is a cyclic
//! complex Jacobi iteration. Spectral functions (`expm`, inverse square root,
//! logarithm) and their reverse-mode derivatives are built on top of
//! [`HermEig`].

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex;
use thiserror::Error;

use crate::scalar::Real;

/// Positive-definiteness floor for [`inv_sqrt_psd`].
pub const EPS_PD: f64 = 1e-12;

/// Below this eigenvalue gap divided differences switch to the derivative.
pub const DEGENERACY_GAP: f64 = 1e-10;

const MAX_JACOBI_SWEEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("matrix is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("matrix exponential saturates (max eigenvalue {max_eigenvalue})")]
    Saturation { max_eigenvalue: f64 },

    #[error("matrix is ill-conditioned (min eigenvalue {min_eigenvalue:e})")]
    IllConditioned { min_eigenvalue: f64 },

    #[error("trace inner product has imaginary part {imag:e}")]
    ComplexTrace { imag: f64 },

    #[error("Jacobi eigensolver did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// Square complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct CMat<T> {
    dim: usize,
    data: Vec<Complex<T>>,
}

impl<T: fmt::Debug> fmt::Debug for CMat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMat({}x{})", self.dim, self.dim)?;
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim)
                .map(|j| {
                    let z = &self[(i, j)];
                    format!("{:+.6?}{:+.6?}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl<T: Real> CMat<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![Complex::new(T::zero(), T::zero()); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    /// Builds a matrix from rows; rejects ragged or non-square input.
    pub fn from_rows(rows: Vec<Vec<Complex<T>>>) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(MatrixError::NotSquare {
                    rows: dim,
                    cols: row.len(),
                });
            }
            data.extend(row);
        }
        Self::from_vec(dim, data)
    }

    /// Real-valued rows, convenient for literals in tests and examples.
    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::from_rows(
            rows.iter()
                .map(|r| {
                    r.iter()
                        .map(|&x| Complex::new(T::lit(x), T::zero()))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn from_vec(dim: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(MatrixError::NotSquare {
                rows: dim,
                cols: data.len().checked_div(dim).unwrap_or(0),
            });
        }
        let m = Self { dim, data };
        if !m.is_finite() {
            return Err(MatrixError::NonFinite);
        }
        Ok(m)
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &x) in diag.iter().enumerate() {
            m[(i, i)] = Complex::new(x, T::zero());
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)])
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.dim).fold(Complex::new(T::zero(), T::zero()), |acc, i| {
            acc + self[(i, i)]
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    /// Largest entry of `|A - Aᴴ|`.
    pub fn hermitian_deviation(&self) -> T {
        let mut dev = T::zero();
        for i in 0..self.dim {
            for j in i..self.dim {
                dev = dev.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        dev
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_complex(&self, s: Complex<T>) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * s;
        }
    }

    /// Elementwise product with a real matrix stored row-major.
    pub fn hadamard_real(&self, weights: &[T]) -> Self {
        debug_assert_eq!(weights.len(), self.data.len());
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(weights)
                .map(|(&z, &w)| z * w)
                .collect(),
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.dim, rhs.dim, "matmul dimension mismatch");
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a.re == T::zero() && a.im == T::zero() {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] = out.data[i * d + j] + a * rhs.data[k * d + j];
                }
            }
        }
        out
    }

    /// Entries as `[re, im, re, im, ...]` in row-major order.
    pub fn to_interleaved(&self) -> Vec<T> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn from_interleaved(dim: usize, values: &[T]) -> Result<Self> {
        if values.len() != 2 * dim * dim {
            return Err(MatrixError::DimensionMismatch {
                left: 2 * dim * dim,
                right: values.len(),
            });
        }
        let data = values
            .chunks_exact(2)
            .map(|p| Complex::new(p[0], p[1]))
            .collect();
        Self::from_vec(dim, data)
    }

    pub fn cast<U: Real>(&self) -> CMat<U> {
        CMat {
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for CMat<T> {
    type Output = Complex<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.dim + j]
    }
}

impl<T> IndexMut<(usize, usize)> for CMat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.dim + j]
    }
}

impl<T: Real> Add for &CMat<T> {
    type Output = CMat<T>;
    fn add(self, rhs: &CMat<T>) -> CMat<T> {
        assert_eq!(self.dim, rhs.dim, "add dimension mismatch");
        CMat {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

impl<T: Real> Sub for &CMat<T> {
    type Output = CMat<T>;
    fn sub(self, rhs: &CMat<T>) -> CMat<T> {
        assert_eq!(self.dim, rhs.dim, "sub dimension mismatch");
        CMat {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }
}

impl<T: Real> Mul for &CMat<T> {
    type Output = CMat<T>;
    fn mul(self, rhs: &CMat<T>) -> CMat<T> {
        self.matmul(rhs)
    }
}

/// `(Z + Zᴴ) / 2`.
pub fn hermitian_part<T: Real>(z: &CMat<T>) -> CMat<T> {
    let half = T::lit(0.5);
    CMat::from_fn(z.dim(), |i, j| (z[(i, j)] + z[(j, i)].conj()) * half)
}

/// Eigendecomposition `A = U diag(λ) Uᴴ` of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermEig<T> {
    /// Ascending.
    pub values: Vec<T>,
    /// Unitary, eigenvectors in columns.
    pub vectors: CMat<T>,
}

impl<T: Real> HermEig<T> {
    /// `U diag(f(λ)) Uᴴ`.
    pub fn apply(&self, f: impl Fn(T) -> T) -> CMat<T> {
        let fv: Vec<T> = self.values.iter().map(|&l| f(l)).collect();
        self.rebuild_with(&fv)
    }

    pub fn reconstruct(&self) -> CMat<T> {
        self.rebuild_with(&self.values)
    }

    fn rebuild_with(&self, diag: &[T]) -> CMat<T> {
        let u = &self.vectors;
        let d = u.dim();
        CMat::from_fn(d, |i, j| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (k, &w) in diag.iter().enumerate() {
                acc = acc + u[(i, k)] * u[(j, k)].conj() * w;
            }
            acc
        })
    }

    /// `Uᴴ M U`.
    pub fn to_eigenbasis(&self, m: &CMat<T>) -> CMat<T> {
        self.vectors.adjoint().matmul(m).matmul(&self.vectors)
    }

    /// `U M Uᴴ`.
    pub fn from_eigenbasis(&self, m: &CMat<T>) -> CMat<T> {
        self.vectors.matmul(m).matmul(&self.vectors.adjoint())
    }

    /// First divided differences of `f` on the spectrum, with the derivative
    /// on (near-)coincident eigenvalues. Row-major `d×d`, symmetric.
    pub fn divided_differences(&self, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Vec<T> {
        let d = self.values.len();
        let gap = T::tol(DEGENERACY_GAP);
        let fv: Vec<T> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let (li, lj) = (self.values[i], self.values[j]);
                out[i * d + j] = if (li - lj).abs() < gap {
                    df(T::lit(0.5) * (li + lj))
                } else {
                    (fv[i] - fv[j]) / (li - lj)
                };
            }
        }
        out
    }

    /// Reverse-mode derivative of `A ↦ f(A)` at this decomposition: given the
    /// cotangent `G` of `f(A)`, returns `U (F ∘ UᴴGU) Uᴴ` where `F` holds the
    /// divided differences (Daleckii–Krein). The map is self-adjoint under
    /// `⟨X, Y⟩ = Re tr(XᴴY)`.
    pub fn spectral_vjp(
        &self,
        cotangent: &CMat<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T,
    ) -> CMat<T> {
        let dd = self.divided_differences(f, df);
        let g = self.to_eigenbasis(cotangent);
        self.from_eigenbasis(&g.hadamard_real(&dd))
    }
}

/// Hermitian eigendecomposition by cyclic complex Jacobi rotations.
///
/// The input must be Hermitian within `1e-12` relative to its scale; it is
/// symmetrized before iterating.
pub fn eig_hermitian<T: Real>(a: &CMat<T>) -> Result<HermEig<T>> {
    if !a.is_finite() {
        return Err(MatrixError::NonFinite);
    }
    let scale = a.max_abs().max(T::one());
    let dev = a.hermitian_deviation();
    if dev > T::tol(1e-12) * scale {
        return Err(MatrixError::NotHermitian {
            deviation: dev.as_f64(),
        });
    }
    let d = a.dim();
    let mut m = hermitian_part(a);
    for i in 0..d {
        m[(i, i)].im = T::zero();
    }
    let mut v = CMat::identity(d);
    let norm = m.frobenius_norm();
    let target = T::epsilon() * norm;

    let off = |m: &CMat<T>| {
        let mut s = T::zero();
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += m[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&m) > target {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(MatrixError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..d {
            for q in p + 1..d {
                let b = m[(p, q)];
                let r = b.norm();
                if r <= T::min_positive_value() {
                    continue;
                }
                let phase = b / r;
                let (app, aqq) = (m[(p, p)].re, m[(q, q)].re);
                let theta = (aqq - app) / (T::lit(2.0) * r);
                let t = if theta == T::zero() {
                    T::one()
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // J = diag(1, conj(phase)) · [[c, s], [-s, c]] on the (p, q) plane.
                let jpp = Complex::new(c, T::zero());
                let jpq = Complex::new(s, T::zero());
                let jqp = phase.conj() * (-s);
                let jqq = phase.conj() * c;
                // M ← M J
                for k in 0..d {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = mkp * jpp + mkq * jqp;
                    m[(k, q)] = mkp * jpq + mkq * jqq;
                }
                // M ← Jᴴ M
                for k in 0..d {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = jpp.conj() * mpk + jqp.conj() * mqk;
                    m[(q, k)] = jpq.conj() * mpk + jqq.conj() * mqk;
                }
                m[(p, q)] = Complex::new(T::zero(), T::zero());
                m[(q, p)] = Complex::new(T::zero(), T::zero());
                m[(p, p)].im = T::zero();
                m[(q, q)].im = T::zero();
                // V ← V J
                for k in 0..d {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = vkp * jpp + vkq * jqp;
                    v[(k, q)] = vkp * jpq + vkq * jqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        m[(i, i)]
            .re
            .partial_cmp(&m[(j, j)].re)
            .expect("finite eigenvalues")
    });
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = CMat::from_fn(d, |i, k| v[(i, order[k])]);
    Ok(HermEig { values, vectors })
}

fn exp_limit<T: Real>() -> T {
    T::lit(700.0).min(T::max_value().ln() - T::one())
}

/// Matrix exponential of a Hermitian matrix, `U diag(exp λ) Uᴴ`.
pub fn expm_hermitian<T: Real>(a: &CMat<T>) -> Result<CMat<T>> {
    let eig = eig_hermitian(a)?;
    expm_from_eig(&eig)
}

pub(crate) fn expm_from_eig<T: Real>(eig: &HermEig<T>) -> Result<CMat<T>> {
    let max = *eig.values.last().unwrap_or(&T::zero());
    if max > exp_limit() {
        return Err(MatrixError::Saturation {
            max_eigenvalue: max.as_f64(),
        });
    }
    Ok(eig.apply(T::exp))
}

/// Inverse square root of a Hermitian positive-definite matrix.
pub fn inv_sqrt_psd<T: Real>(a: &CMat<T>) -> Result<CMat<T>> {
    let eig = eig_hermitian(a)?;
    inv_sqrt_from_eig(&eig)
}

pub(crate) fn inv_sqrt_from_eig<T: Real>(eig: &HermEig<T>) -> Result<CMat<T>> {
    let min = eig.values.first().copied().unwrap_or(T::one());
    if min <= T::tol(EPS_PD) {
        return Err(MatrixError::IllConditioned {
            min_eigenvalue: min.as_f64(),
        });
    }
    Ok(eig.apply(|l| T::one() / l.sqrt()))
}

/// Principal logarithm of a Hermitian positive-definite matrix.
pub fn logm_psd<T: Real>(a: &CMat<T>) -> Result<CMat<T>> {
    let eig = eig_hermitian(a)?;
    let min = eig.values.first().copied().unwrap_or(T::one());
    if min <= T::tol(EPS_PD) {
        return Err(MatrixError::IllConditioned {
            min_eigenvalue: min.as_f64(),
        });
    }
    Ok(eig.apply(T::ln))
}

/// Kronecker product `A ⊗ B`.
pub fn kron<T: Real>(a: &CMat<T>, b: &CMat<T>) -> CMat<T> {
    let (da, db) = (a.dim(), b.dim());
    CMat::from_fn(da * db, |i, j| a[(i / db, j / db)] * b[(i % db, j % db)])
}

/// Kronecker product of a non-empty sequence.
pub fn kron_all<'a, T: Real>(mats: impl IntoIterator<Item = &'a CMat<T>>) -> CMat<T> {
    let mut it = mats.into_iter();
    let first = it.next().expect("kron_all of an empty sequence").clone();
    it.fold(first, |acc, m| kron(&acc, m))
}

/// `Re tr(A·B)`; the imaginary part must vanish, as it does for two
/// Hermitian arguments.
pub fn trace_inner<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(MatrixError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let d = a.dim();
    let mut acc = Complex::new(T::zero(), T::zero());
    for i in 0..d {
        for k in 0..d {
            acc = acc + a[(i, k)] * b[(k, i)];
        }
    }
    let scale = (a.frobenius_norm() * b.frobenius_norm()).max(T::one());
    if acc.im.abs() > T::tol(1e-12) * scale {
        return Err(MatrixError::ComplexTrace {
            imag: acc.im.as_f64(),
        });
    }
    Ok(acc.re)
}
