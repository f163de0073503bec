//! Measurements, states, the QuantumSoftmax map and the Born rule, each with
//! a hand-written reverse-mode rule.
//!
//! Gradients of a real loss `L` with respect to a complex matrix `X` are
//! reported as `∂L/∂Re X + i ∂L/∂Im X`, so that `dL = Re tr(Gᴴ dX)`.

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cmatrix::{
    eig_hermitian, expm_from_eig, hermitian_part, inv_sqrt_from_eig, inv_sqrt_psd, kron, logm_psd,
    CMat, HermEig,
};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default weight of the conditioning penalty.
pub const DEFAULT_CONDITIONING_COEF: f64 = 1e-3;

/// Born probabilities above `-PROB_CLAMP` are clamped to zero.
pub const PROB_CLAMP: f64 = 1e-10;

const POVM_HERMITIAN_TOL: f64 = 1e-10;
const POVM_PSD_TOL: f64 = 1e-9;
const POVM_COMPLETENESS_TOL: f64 = 1e-8;
const DENSITY_TOL: f64 = 1e-10;
const FACTOR_MIN_NORM: f64 = 1e-30;
const REFINE_TOL: f64 = 1e-12;

/// How far a set of matrices is from being a POVM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PovmDiagnostics {
    pub max_hermitian_deviation: f64,
    pub min_eigenvalue: f64,
    /// `‖Σ P_j − I‖_F`.
    pub completeness_residual: f64,
}

impl PovmDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.max_hermitian_deviation <= POVM_HERMITIAN_TOL
            && self.min_eigenvalue >= -POVM_PSD_TOL
            && self.completeness_residual <= POVM_COMPLETENESS_TOL
    }
}

/// Positive operator-valued measure: PSD elements summing to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Povm<T> {
    elements: Vec<CMat<T>>,
}

impl<T: Real> Povm<T> {
    pub fn new(elements: Vec<CMat<T>>) -> Result<Self> {
        let povm = Self::from_elements_unchecked(elements)?;
        let diag = povm.diagnostics()?;
        let ok = diag.max_hermitian_deviation <= T::tol(POVM_HERMITIAN_TOL).as_f64()
            && diag.min_eigenvalue >= -T::tol(POVM_PSD_TOL).as_f64()
            && diag.completeness_residual <= T::tol(POVM_COMPLETENESS_TOL).as_f64();
        if !ok {
            return Err(Error::InvalidPovm(format!("{diag:?}")));
        }
        Ok(povm)
    }

    /// Checks shapes only.
    pub fn from_elements_unchecked(elements: Vec<CMat<T>>) -> Result<Self> {
        let Some(first) = elements.first() else {
            return Err(Error::InvalidPovm("no outcomes".into()));
        };
        let d = first.dim();
        if elements.iter().any(|e| e.dim() != d) {
            return Err(Error::Shape("POVM elements differ in dimension".into()));
        }
        Ok(Self { elements })
    }

    /// Projective measurement in the computational basis.
    pub fn computational(dim: usize) -> Self {
        let elements = (0..dim)
            .map(|k| {
                let mut e = CMat::zeros(dim);
                e[(k, k)] = Complex::new(T::one(), T::zero());
                e
            })
            .collect();
        Self { elements }
    }

    /// The single-outcome measurement `{I}`.
    pub fn trivial(dim: usize) -> Self {
        Self {
            elements: vec![CMat::identity(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.elements[0].dim()
    }

    pub fn outcomes(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[CMat<T>] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<CMat<T>> {
        self.elements
    }

    pub fn diagnostics(&self) -> Result<PovmDiagnostics> {
        let d = self.dim();
        let mut herm = 0.0f64;
        let mut min_eig = f64::INFINITY;
        let mut sum = CMat::<T>::zeros(d);
        for e in &self.elements {
            herm = herm.max(e.hermitian_deviation().as_f64());
            let eig = eig_hermitian(&hermitian_part(e))?;
            min_eig = min_eig.min(eig.values[0].as_f64());
            sum.add_scaled(e, T::one());
        }
        Ok(PovmDiagnostics {
            max_hermitian_deviation: herm,
            min_eigenvalue: min_eig,
            completeness_residual: (&sum - &CMat::identity(d)).frobenius_norm().as_f64(),
        })
    }

    pub fn cast<U: Real>(&self) -> Povm<U> {
        Povm {
            elements: self.elements.iter().map(CMat::cast).collect(),
        }
    }
}

/// Unconstrained complex logits `Z_1..Z_m`, the trainable input of
/// [`quantum_softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct PovmLogits<T> {
    logits: Vec<CMat<T>>,
}

impl<T: Real> PovmLogits<T> {
    pub fn new(logits: Vec<CMat<T>>) -> Result<Self> {
        let Some(first) = logits.first() else {
            return Err(Error::Shape("at least one logit matrix is required".into()));
        };
        let d = first.dim();
        if logits.iter().any(|z| z.dim() != d) {
            return Err(Error::Shape("logit matrices differ in dimension".into()));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Shape("non-finite logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn zeros(dim: usize, outcomes: usize) -> Self {
        Self {
            logits: vec![CMat::zeros(dim); outcomes],
        }
    }

    /// Real and imaginary parts drawn i.i.d. from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, outcomes: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            logits: (0..outcomes)
                .map(|_| random_cmat(dim, scale, rng))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.logits[0].dim()
    }

    pub fn outcomes(&self) -> usize {
        self.logits.len()
    }

    pub fn matrices(&self) -> &[CMat<T>] {
        &self.logits
    }

    pub fn matrices_mut(&mut self) -> &mut [CMat<T>] {
        &mut self.logits
    }

    /// Number of real parameters.
    pub fn num_params(&self) -> usize {
        2 * self.outcomes() * self.dim() * self.dim()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.logits
            .iter()
            .flat_map(|z| z.to_interleaved())
            .collect()
    }

    pub fn from_flat(dim: usize, outcomes: usize, values: &[T]) -> Result<Self> {
        let block = 2 * dim * dim;
        if values.len() != block * outcomes {
            return Err(Error::Shape(format!(
                "expected {} logit values, got {}",
                block * outcomes,
                values.len()
            )));
        }
        let logits = values
            .chunks_exact(block)
            .map(|c| CMat::from_interleaved(dim, c))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(logits)
    }
}

pub(crate) fn random_cmat<T: Real, R: Rng + ?Sized>(
    dim: usize,
    scale: f64,
    rng: &mut R,
) -> CMat<T> {
    CMat::from_fn(dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex::new(T::lit(scale * re), T::lit(scale * im))
    })
}

/// Hermitian, PSD, unit-trace state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T> {
    matrix: CMat<T>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(matrix: CMat<T>) -> Result<Self> {
        let tol = T::tol(DENSITY_TOL);
        let dev = matrix.hermitian_deviation();
        if dev > tol {
            return Err(Error::InvalidDensity(format!(
                "not Hermitian (deviation {dev})"
            )));
        }
        let tr = matrix.trace();
        if (tr.re - T::one()).abs() > tol || tr.im.abs() > tol {
            return Err(Error::InvalidDensity(format!("trace {tr} is not 1")));
        }
        let eig = eig_hermitian(&matrix)?;
        if eig.values[0] < -tol {
            return Err(Error::InvalidDensity(format!(
                "negative eigenvalue {}",
                eig.values[0]
            )));
        }
        Ok(Self { matrix })
    }

    /// `(|00⟩ + |11⟩)(⟨00| + ⟨11|) / 2`.
    pub fn bell() -> Self {
        let half = Complex::new(T::lit(0.5), T::zero());
        let mut m = CMat::zeros(4);
        for (i, j) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            m[(i, j)] = half;
        }
        Self { matrix: m }
    }

    /// `|ψ⟩⟨ψ|` for a unit vector built from `amplitudes` (normalized here).
    pub fn pure(amplitudes: &[Complex<T>]) -> Result<Self> {
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        if norm <= T::min_positive_value() {
            return Err(Error::InvalidDensity("zero state vector".into()));
        }
        let v: Vec<Complex<T>> = amplitudes.iter().map(|z| z / norm).collect();
        Ok(Self {
            matrix: CMat::from_fn(v.len(), |i, j| v[i] * v[j].conj()),
        })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            matrix: CMat::identity(dim).scale(T::one() / T::lit(dim as f64)),
        }
    }

    /// `ρ_A ⊗ ρ_B`.
    pub fn product(&self, other: &Self) -> Self {
        Self {
            matrix: kron(&self.matrix, &other.matrix),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.matrix
    }

    pub fn cast<U: Real>(&self) -> DensityMatrix<U> {
        DensityMatrix {
            matrix: self.matrix.cast(),
        }
    }
}

/// Unconstrained factor `B` with `ρ = BᴴB / tr(BᴴB)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFactor<T> {
    factor: CMat<T>,
}

impl<T: Real> DensityFactor<T> {
    pub fn new(factor: CMat<T>) -> Result<Self> {
        let norm = factor.frobenius_norm();
        if !factor.is_finite() || norm.as_f64() < FACTOR_MIN_NORM {
            return Err(Error::DegenerateFactor {
                norm: norm.as_f64(),
            });
        }
        Ok(Self { factor })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            factor: random_cmat(dim, scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn factor(&self) -> &CMat<T> {
        &self.factor
    }

    pub fn factor_mut(&mut self) -> &mut CMat<T> {
        &mut self.factor
    }
}

/// `ρ = BᴴB / tr(BᴴB)`.
pub fn density_from_factor<T: Real>(f: &DensityFactor<T>) -> Result<DensityMatrix<T>> {
    let b = f.factor();
    let norm = b.frobenius_norm();
    if !b.is_finite() || norm.as_f64() < FACTOR_MIN_NORM {
        return Err(Error::DegenerateFactor {
            norm: norm.as_f64(),
        });
    }
    let g = b.adjoint().matmul(b);
    let c = g.trace().re;
    Ok(DensityMatrix {
        matrix: hermitian_part(&g.scale(T::one() / c)),
    })
}

/// Gradient with respect to `B` given the cotangent `G` of `ρ`.
pub fn density_from_factor_vjp<T: Real>(f: &DensityFactor<T>, cotangent: &CMat<T>) -> CMat<T> {
    let b = f.factor();
    let bhb = b.adjoint().matmul(b);
    let c = bhb.trace().re;
    let g_sym = cotangent + &cotangent.adjoint();
    let mut grad = b.matmul(&g_sym).scale(T::one() / c);
    // Re tr(Gᴴ BᴴB)
    let inner = cotangent
        .as_slice()
        .iter()
        .zip(bhb.as_slice())
        .map(|(g, m)| (g.conj() * m).re)
        .sum::<T>();
    grad.add_scaled(b, -T::lit(2.0) * inner / (c * c));
    grad
}

/// `‖S − I‖²_F`.
pub fn conditioning_penalty<T: Real>(s: &CMat<T>) -> T {
    let d = (s - &CMat::identity(s.dim())).frobenius_norm();
    d * d
}

/// Gradient of [`conditioning_penalty`]: `2 (S − I)`.
pub fn conditioning_penalty_grad<T: Real>(s: &CMat<T>) -> CMat<T> {
    (s - &CMat::identity(s.dim())).scale(T::lit(2.0))
}

/// Forward pass of QuantumSoftmax, retaining what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct SoftmaxForward<T> {
    pub povm: Povm<T>,
    /// `S = Σ_j exp(herm(Z_j))`.
    pub s: CMat<T>,
    exp_eigs: Vec<HermEig<T>>,
    r: Vec<CMat<T>>,
    s_eig: HermEig<T>,
    x: CMat<T>,
}

/// QuantumSoftmax: `P_j = S^{-1/2} exp(herm Z_j) S^{-1/2}` with
/// `S = Σ_j exp(herm Z_j)`.
pub fn quantum_softmax<T: Real>(logits: &PovmLogits<T>) -> Result<SoftmaxForward<T>> {
    let d = logits.dim();
    let mut exp_eigs = Vec::with_capacity(logits.outcomes());
    let mut r = Vec::with_capacity(logits.outcomes());
    let mut s = CMat::zeros(d);
    for z in logits.matrices() {
        let eig = eig_hermitian(&hermitian_part(z))?;
        let rj = hermitian_part(&expm_from_eig(&eig)?);
        s.add_scaled(&rj, T::one());
        exp_eigs.push(eig);
        r.push(rj);
    }
    let s_eig = eig_hermitian(&s)?;
    let x = hermitian_part(&inv_sqrt_from_eig(&s_eig)?);
    let mut elements: Vec<CMat<T>> = r
        .iter()
        .map(|rj| hermitian_part(&x.matmul(rj).matmul(&x)))
        .collect();
    // An ill-conditioned S leaves Σ P_j slightly off I. One more
    // normalization by the well-conditioned (Σ P_j)^{-1/2} removes the
    // residual and is the identity in exact arithmetic.
    let mut total = CMat::zeros(d);
    for p in &elements {
        total.add_scaled(p, T::one());
    }
    if (&total - &CMat::identity(d)).max_abs() > T::tol(REFINE_TOL) {
        let y = hermitian_part(&inv_sqrt_psd(&total)?);
        for p in &mut elements {
            *p = hermitian_part(&y.matmul(p).matmul(&y));
        }
    }
    Ok(SoftmaxForward {
        povm: Povm { elements },
        s,
        exp_eigs,
        r,
        s_eig,
        x,
    })
}

impl<T: Real> SoftmaxForward<T> {
    pub fn conditioning_penalty(&self) -> T {
        conditioning_penalty(&self.s)
    }

    /// Logit gradients for cotangents `G_j` of the POVM elements, plus
    /// `cond_coef` times the gradient of the conditioning penalty.
    pub fn vjp(&self, cotangents: &[CMat<T>], cond_coef: T) -> Result<Vec<CMat<T>>> {
        let m = self.r.len();
        let d = self.s.dim();
        if cotangents.len() != m || cotangents.iter().any(|g| g.dim() != d) {
            return Err(Error::Shape(format!(
                "expected {m} cotangents of dimension {d}"
            )));
        }
        let x = &self.x;
        let mut g_x = CMat::zeros(d);
        let mut g_r = Vec::with_capacity(m);
        for (g, rj) in cotangents.iter().zip(&self.r) {
            let g = hermitian_part(g);
            g_r.push(x.matmul(&g).matmul(x));
            g_x.add_scaled(&g.matmul(x).matmul(rj), T::one());
            g_x.add_scaled(&rj.matmul(x).matmul(&g), T::one());
        }
        let inv_sqrt = |l: T| T::one() / l.sqrt();
        let d_inv_sqrt = |l: T| -T::lit(0.5) / (l * l.sqrt());
        let mut g_s = self.s_eig.spectral_vjp(&g_x, inv_sqrt, d_inv_sqrt);
        if cond_coef != T::zero() {
            g_s.add_scaled(&conditioning_penalty_grad(&self.s), cond_coef);
        }
        Ok(g_r
            .iter()
            .zip(&self.exp_eigs)
            .map(|(gr, eig)| {
                let gr = gr + &g_s;
                hermitian_part(&eig.spectral_vjp(&gr, T::exp, T::exp))
            })
            .collect())
    }
}

/// Convenience wrapper: forward then reverse pass, no conditioning term.
pub fn quantum_softmax_vjp<T: Real>(
    logits: &PovmLogits<T>,
    cotangents: &[CMat<T>],
) -> Result<Vec<CMat<T>>> {
    quantum_softmax(logits)?.vjp(cotangents, T::zero())
}

/// Logits `Z_j = log P_j` that QuantumSoftmax maps back to `P` (with `S = I`).
/// Requires every element to be strictly positive definite.
pub fn logits_from_povm<T: Real>(povm: &Povm<T>) -> Result<PovmLogits<T>> {
    let logits = povm
        .elements()
        .iter()
        .map(|p| logm_psd(&hermitian_part(p)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    PovmLogits::new(logits)
}

fn check_born_shapes<T: Real>(rho: &DensityMatrix<T>, povms: &[&Povm<T>]) -> Result<()> {
    if povms.is_empty() {
        return Err(Error::Shape("at least one measurement is required".into()));
    }
    let prod: usize = povms.iter().map(|p| p.dim()).product();
    if prod != rho.dim() {
        return Err(Error::Shape(format!(
            "measurement dimensions multiply to {prod}, state has dimension {}",
            rho.dim()
        )));
    }
    Ok(())
}

/// Mixed-radix digits of `index`, most significant first.
fn digits(mut index: usize, radices: &[usize], out: &mut [usize]) {
    for k in (0..radices.len()).rev() {
        out[k] = index % radices[k];
        index /= radices[k];
    }
}

/// Number of joint outcomes and their per-agent radices.
pub fn outcome_shape<T: Real>(povms: &[&Povm<T>]) -> Vec<usize> {
    povms.iter().map(|p| p.outcomes()).collect()
}

/// Flat index of a joint outcome, agent 0 most significant.
pub fn joint_index(outcome: &[usize], radices: &[usize]) -> usize {
    outcome
        .iter()
        .zip(radices)
        .fold(0, |acc, (&j, &m)| acc * m + j)
}

/// Inverse of [`joint_index`].
pub fn joint_outcome(index: usize, radices: &[usize]) -> Vec<usize> {
    let mut v = vec![0; radices.len()];
    digits(index, radices, &mut v);
    v
}

/// `y[r,c] = Σ_{a,b} x[(r,a),(c,b)] m[b,a]` for `x` of dimension `p·d`.
fn contract_last<T: Real>(x: &[Complex<T>], p: usize, m: &CMat<T>) -> Vec<Complex<T>> {
    let d = m.dim();
    let n = p * d;
    let ms = m.as_slice();
    let mut y = vec![Complex::new(T::zero(), T::zero()); p * p];
    for r in 0..p {
        for c in 0..p {
            let mut acc = Complex::new(T::zero(), T::zero());
            for a in 0..d {
                let row = &x[(r * d + a) * n + c * d..(r * d + a) * n + c * d + d];
                for b in 0..d {
                    acc = acc + row[b] * ms[b * d + a];
                }
            }
            y[r * p + c] = acc;
        }
    }
    y
}

/// Agents are traced out last-first. `k` agents remain in `x`; `suffix` is
/// the partial joint index of the agents already measured and `stride` the
/// weight of agent `k - 1` in the joint index.
struct BornTree<'a, T> {
    povms: &'a [&'a Povm<T>],
    total: usize,
}

impl<T: Real> BornTree<'_, T> {
    fn forward(&self, k: usize, x: &[Complex<T>], suffix: usize, stride: usize, out: &mut [T]) {
        if k == 0 {
            out[suffix] = x[0].re;
            return;
        }
        let povm = self.povms[k - 1];
        let p = isqrt(x.len()) / povm.dim();
        for (jk, m) in povm.elements().iter().enumerate() {
            let y = contract_last(x, p, m);
            self.forward(
                k - 1,
                &y,
                suffix + jk * stride,
                stride * povm.outcomes(),
                out,
            );
        }
    }

    /// Returns the gradient with respect to `x` and accumulates element
    /// gradients into `grads`.
    fn backward(
        &self,
        k: usize,
        x: &[Complex<T>],
        suffix: usize,
        stride: usize,
        cot: &[T],
        grads: &mut [Vec<CMat<T>>],
    ) -> Vec<Complex<T>> {
        if k == 0 {
            return vec![Complex::new(cot[suffix], T::zero())];
        }
        let povm = self.povms[k - 1];
        let d = povm.dim();
        let p = isqrt(x.len()) / d;
        let n = p * d;
        let outer = stride * povm.outcomes();
        let mut x_bar = vec![Complex::new(T::zero(), T::zero()); x.len()];
        for (jk, m) in povm.elements().iter().enumerate() {
            let sub = suffix + jk * stride;
            if (0..self.total / outer).all(|q| cot[q * outer + sub] == T::zero()) {
                continue;
            }
            let y = contract_last(x, p, m);
            let y_bar = self.backward(k - 1, &y, sub, outer, cot, grads);
            let ms = m.as_slice();
            let g = grads[k - 1][jk].as_mut_slice();
            for r in 0..p {
                for c in 0..p {
                    let yb = y_bar[r * p + c];
                    if yb.re == T::zero() && yb.im == T::zero() {
                        continue;
                    }
                    for a in 0..d {
                        let base = (r * d + a) * n + c * d;
                        for b in 0..d {
                            x_bar[base + b] = x_bar[base + b] + yb * ms[b * d + a].conj();
                            g[b * d + a] = g[b * d + a] + yb * x[base + b].conj();
                        }
                    }
                }
            }
        }
        x_bar
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Joint outcome distribution `p(j) = Re tr(ρ ⊗ᵢ M⁽ⁱ⁾_{jᵢ})`, flattened with
/// agent 0 most significant. Values in `[-1e-10, 0)` are clamped to zero and
/// the table is renormalized; anything more negative is an error.
pub fn born_joint<T: Real>(rho: &DensityMatrix<T>, povms: &[&Povm<T>]) -> Result<Vec<T>> {
    check_born_shapes(rho, povms)?;
    let total: usize = outcome_shape(povms).iter().product();
    let tree = BornTree { povms, total };
    let mut out = vec![T::zero(); total];
    tree.forward(povms.len(), rho.matrix().as_slice(), 0, 1, &mut out);
    clamp_and_normalize(&mut out)?;
    Ok(out)
}

pub(crate) fn clamp_and_normalize<T: Real>(probs: &mut [T]) -> Result<()> {
    let floor = -T::tol(PROB_CLAMP);
    for p in probs.iter_mut() {
        if *p < T::zero() {
            if *p < floor {
                return Err(Error::NegativeProbability { value: p.as_f64() });
            }
            *p = T::zero();
        }
    }
    let total: T = probs.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(Error::NegativeProbability {
            value: total.as_f64(),
        });
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(())
}

/// Gradients of `Σ_j g_j p(j)` with respect to the state and each measurement
/// element (the clamp and renormalization are treated as identity).
#[derive(Debug, Clone)]
pub struct BornGrad<T> {
    pub rho: CMat<T>,
    /// `povms[i][k]` is the gradient for element `k` of agent `i`.
    pub povms: Vec<Vec<CMat<T>>>,
}

pub fn born_joint_vjp<T: Real>(
    rho: &DensityMatrix<T>,
    povms: &[&Povm<T>],
    cotangent: &[T],
) -> Result<BornGrad<T>> {
    check_born_shapes(rho, povms)?;
    let total: usize = outcome_shape(povms).iter().product();
    if cotangent.len() != total {
        return Err(Error::Shape(format!(
            "cotangent has {} entries, expected {total}",
            cotangent.len()
        )));
    }
    let mut g_povms: Vec<Vec<CMat<T>>> = povms
        .iter()
        .map(|p| vec![CMat::zeros(p.dim()); p.outcomes()])
        .collect();
    let tree = BornTree { povms, total };
    let g_rho = tree.backward(
        povms.len(),
        rho.matrix().as_slice(),
        0,
        1,
        cotangent,
        &mut g_povms,
    );
    Ok(BornGrad {
        rho: CMat::from_vec(rho.dim(), g_rho)?,
        povms: g_povms,
    })
}
