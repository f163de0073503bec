//! Joint policies over finite history and action alphabets: factorized,
//! shared-randomness, entangled and coordinator-advice forms, with exact
//! distributions, sampling, advice collapse and a non-signaling check.
//!
//! Joint histories and joint actions are flattened in mixed radix with
//! agent 0 most significant.

use std::io::Write;
use std::sync::OnceLock;

use num_complex::Complex;
use rand::Rng;

use crate::cmatrix::CMat;
use crate::error::{Error, Result};
use crate::quantum::{
    born_joint, born_joint_vjp, density_from_factor, density_from_factor_vjp, joint_index,
    joint_outcome, quantum_softmax, DensityFactor, DensityMatrix, Povm, PovmLogits, SoftmaxForward,
};
use crate::rng::sample_categorical;
use crate::scalar::Real;

/// Largest joint history count [`check_non_signaling`] will enumerate.
pub const NON_SIGNALING_BUDGET: usize = 10_000;

/// Floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FiniteHistorySpace {
    histories: Vec<usize>,
    actions: Vec<usize>,
}

impl FiniteHistorySpace {
    pub fn new(histories: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if histories.is_empty() || histories.len() != actions.len() {
            return Err(Error::Shape(format!(
                "{} history alphabets for {} action alphabets",
                histories.len(),
                actions.len()
            )));
        }
        if histories.iter().chain(&actions).any(|&k| k == 0) {
            return Err(Error::Shape("alphabets must be non-empty".into()));
        }
        Ok(Self { histories, actions })
    }

    pub fn agents(&self) -> usize {
        self.histories.len()
    }

    pub fn histories(&self) -> &[usize] {
        &self.histories
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn num_joint_histories(&self) -> usize {
        self.histories.iter().product()
    }

    pub fn num_joint_actions(&self) -> usize {
        self.actions.iter().product()
    }

    pub fn history_index(&self, h: &[usize]) -> usize {
        joint_index(h, &self.histories)
    }

    pub fn history(&self, index: usize) -> Vec<usize> {
        joint_outcome(index, &self.histories)
    }

    pub fn action_index(&self, a: &[usize]) -> usize {
        joint_index(a, &self.actions)
    }

    pub fn action(&self, index: usize) -> Vec<usize> {
        joint_outcome(index, &self.actions)
    }

    pub fn check_history(&self, h: &[usize]) -> Result<()> {
        if h.len() != self.agents() || h.iter().zip(&self.histories).any(|(&x, &k)| x >= k) {
            return Err(Error::Shape(format!(
                "history {h:?} outside {:?}",
                self.histories
            )));
        }
        Ok(())
    }
}

/// A sampled joint action, with the advice that produced it (coordinator
/// policies only) and the log-probabilities a trainer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub actions: Vec<usize>,
    pub advice: Option<Vec<usize>>,
    /// `log π(a|h)` of the joint action.
    pub log_prob: f64,
    /// `log πᵢ(aᵢ|xᵢ,hᵢ)` per agent (coordinator policies only).
    pub actor_log_probs: Vec<f64>,
    /// `log q(x|h)` (coordinator policies only).
    pub coordinator_log_prob: Option<f64>,
}

pub trait JointPolicy<T: Real> {
    fn space(&self) -> &FiniteHistorySpace;

    /// Exact `π(·|h)` over flattened joint actions.
    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>>;

    fn sample_action(&self, h: &[usize], rng: &mut dyn rand::RngCore) -> Result<ActionSample> {
        let dist = self.joint_distribution(h)?;
        let w: Vec<f64> = dist.iter().map(|p| p.as_f64()).collect();
        let k = sample_categorical(&w, rng);
        Ok(ActionSample {
            actions: self.space().action(k),
            advice: None,
            log_prob: w[k].max(LOG_FLOOR).ln(),
            actor_log_probs: Vec::new(),
            coordinator_log_prob: None,
        })
    }

    /// `π(·|h)` for every joint history, indexed by flattened history.
    fn distribution_table(&self) -> Result<Vec<Vec<T>>> {
        let space = self.space();
        (0..space.num_joint_histories())
            .map(|k| self.joint_distribution(&space.history(k)))
            .collect()
    }
}

fn softmax_rows<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn check_row<T: Real>(row: &[T], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::Shape(format!(
            "row of length {} expected {len}",
            row.len()
        )));
    }
    let s: T = row.iter().copied().sum();
    if row.iter().any(|&p| p < T::zero() || !p.is_finite()) || (s - T::one()).abs() > T::tol(1e-9) {
        return Err(Error::Shape(format!("row {row:?} is not a distribution")));
    }
    Ok(())
}

/// `π(a|h) = Π πᵢ(aᵢ|hᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPolicy<T> {
    space: FiniteHistorySpace,
    /// `locals[i][hᵢ][aᵢ]`.
    locals: Vec<Vec<Vec<T>>>,
}

impl<T: Real> FactorizedPolicy<T> {
    pub fn new(space: FiniteHistorySpace, locals: Vec<Vec<Vec<T>>>) -> Result<Self> {
        if locals.len() != space.agents() {
            return Err(Error::Shape("one local table per agent required".into()));
        }
        for (i, table) in locals.iter().enumerate() {
            if table.len() != space.histories()[i] {
                return Err(Error::Shape(format!("agent {i}: wrong history count")));
            }
            for row in table {
                check_row(row, space.actions()[i])?;
            }
        }
        Ok(Self { space, locals })
    }

    /// `choices[i][hᵢ]` is agent `i`'s action on history `hᵢ`.
    pub fn deterministic(space: FiniteHistorySpace, choices: &[Vec<usize>]) -> Result<Self> {
        let locals = choices
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.iter()
                    .map(|&a| {
                        let mut row = vec![T::zero(); space.actions()[i]];
                        if a < row.len() {
                            row[a] = T::one();
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        Self::new(space, locals)
    }

    pub fn uniform(space: FiniteHistorySpace) -> Self {
        let locals = (0..space.agents())
            .map(|i| {
                let m = space.actions()[i];
                vec![vec![T::one() / T::lit(m as f64); m]; space.histories()[i]]
            })
            .collect();
        Self { space, locals }
    }

    pub fn random<R: Rng + ?Sized>(space: FiniteHistorySpace, rng: &mut R) -> Self {
        let locals = (0..space.agents())
            .map(|i| {
                (0..space.histories()[i])
                    .map(|_| random_simplex(space.actions()[i], rng))
                    .collect()
            })
            .collect();
        Self { space, locals }
    }

    pub fn locals(&self) -> &[Vec<Vec<T>>] {
        &self.locals
    }
}

pub(crate) fn random_simplex<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    // Exponential spacings give a uniform point on the simplex.
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| T::lit(x / s)).collect()
}

impl<T: Real> JointPolicy<T> for FactorizedPolicy<T> {
    fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        self.space.check_history(h)?;
        Ok((0..self.space.num_joint_actions())
            .map(|k| {
                let a = self.space.action(k);
                (0..self.space.agents())
                    .map(|i| self.locals[i][h[i]][a[i]])
                    .fold(T::one(), |acc, p| acc * p)
            })
            .collect())
    }
}

/// `π(a|h) = Σₓ q(x) Π πᵢ(aᵢ|x,hᵢ)` with a shared random value `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedRandomnessPolicy<T> {
    space: FiniteHistorySpace,
    q: Vec<T>,
    /// `locals[i][x][hᵢ][aᵢ]`.
    locals: Vec<Vec<Vec<Vec<T>>>>,
}

impl<T: Real> SharedRandomnessPolicy<T> {
    pub fn new(
        space: FiniteHistorySpace,
        q: Vec<T>,
        locals: Vec<Vec<Vec<Vec<T>>>>,
    ) -> Result<Self> {
        check_row(&q, q.len())?;
        if locals.len() != space.agents() {
            return Err(Error::Shape("one local table per agent required".into()));
        }
        for (i, per_x) in locals.iter().enumerate() {
            if per_x.len() != q.len() {
                return Err(Error::Shape(format!(
                    "agent {i}: one table per shared value required"
                )));
            }
            for table in per_x {
                if table.len() != space.histories()[i] {
                    return Err(Error::Shape(format!("agent {i}: wrong history count")));
                }
                for row in table {
                    check_row(row, space.actions()[i])?;
                }
            }
        }
        Ok(Self { space, q, locals })
    }

    /// Builds the policy from logit tables `logits[i][x][hᵢ][aᵢ]` and shared
    /// logits over `x`, applying a softmax to every row.
    pub fn from_logits(
        space: FiniteHistorySpace,
        q_logits: &[T],
        logits: &[Vec<Vec<Vec<T>>>],
    ) -> Result<Self> {
        let q = softmax_rows(q_logits);
        let locals = logits
            .iter()
            .map(|per_x| {
                per_x
                    .iter()
                    .map(|table| table.iter().map(|row| softmax_rows(row)).collect())
                    .collect()
            })
            .collect();
        Self::new(space, q, locals)
    }

    pub fn random<R: Rng + ?Sized>(
        space: FiniteHistorySpace,
        shared_values: usize,
        rng: &mut R,
    ) -> Self {
        let q = random_simplex(shared_values, rng);
        let locals = (0..space.agents())
            .map(|i| {
                (0..shared_values)
                    .map(|_| {
                        (0..space.histories()[i])
                            .map(|_| random_simplex(space.actions()[i], rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { space, q, locals }
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    /// The same policy realized with a diagonal state `Σₓ q(x)|x…x⟩⟨x…x|`
    /// and diagonal measurements `Mᵢ(a|h) = diag_x πᵢ(a|x,h)`.
    pub fn to_entangled(&self) -> Result<EntangledPolicy<T>> {
        let k = self.q.len();
        let n = self.space.agents();
        let dim = k.pow(n as u32);
        let mut rho = CMat::zeros(dim);
        for (x, &qx) in self.q.iter().enumerate() {
            let idx = joint_index(&vec![x; n], &vec![k; n]);
            rho[(idx, idx)] = Complex::new(qx, T::zero());
        }
        let povms = (0..n)
            .map(|i| {
                (0..self.space.histories()[i])
                    .map(|h| {
                        let elems = (0..self.space.actions()[i])
                            .map(|a| {
                                let d: Vec<T> = (0..k).map(|x| self.locals[i][x][h][a]).collect();
                                CMat::from_diag(&d)
                            })
                            .collect();
                        Povm::from_elements_unchecked(elems)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        EntangledPolicy::new(self.space.clone(), DensityMatrix::new(rho)?, povms)
    }
}

impl<T: Real> JointPolicy<T> for SharedRandomnessPolicy<T> {
    fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        self.space.check_history(h)?;
        let mut out = vec![T::zero(); self.space.num_joint_actions()];
        for (k, slot) in out.iter_mut().enumerate() {
            let a = self.space.action(k);
            for (x, &qx) in self.q.iter().enumerate() {
                let p = (0..self.space.agents())
                    .map(|i| self.locals[i][x][h[i]][a[i]])
                    .fold(qx, |acc, p| acc * p);
                *slot += p;
            }
        }
        Ok(out)
    }
}

/// `π(a|h) = tr(ρ ⊗ᵢ Mᵢ(aᵢ|hᵢ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntangledPolicy<T> {
    space: FiniteHistorySpace,
    rho: DensityMatrix<T>,
    /// `povms[i][hᵢ]`, with one outcome per action.
    povms: Vec<Vec<Povm<T>>>,
}

impl<T: Real> EntangledPolicy<T> {
    pub fn new(
        space: FiniteHistorySpace,
        rho: DensityMatrix<T>,
        povms: Vec<Vec<Povm<T>>>,
    ) -> Result<Self> {
        if povms.len() != space.agents() {
            return Err(Error::Shape(
                "one measurement table per agent required".into(),
            ));
        }
        let mut prod = 1;
        for (i, table) in povms.iter().enumerate() {
            if table.len() != space.histories()[i] {
                return Err(Error::Shape(format!("agent {i}: wrong history count")));
            }
            let d = table[0].dim();
            if table
                .iter()
                .any(|p| p.dim() != d || p.outcomes() != space.actions()[i])
            {
                return Err(Error::Shape(format!(
                    "agent {i}: inconsistent measurements"
                )));
            }
            prod *= d;
        }
        if prod != rho.dim() {
            return Err(Error::Shape(format!(
                "local dimensions multiply to {prod}, state has dimension {}",
                rho.dim()
            )));
        }
        Ok(Self { space, rho, povms })
    }

    pub fn rho(&self) -> &DensityMatrix<T> {
        &self.rho
    }

    pub fn povms(&self) -> &[Vec<Povm<T>>] {
        &self.povms
    }

    pub fn local_dims(&self) -> Vec<usize> {
        self.povms.iter().map(|t| t[0].dim()).collect()
    }

    /// Random state and measurements via QuantumSoftmax.
    pub fn random<R: Rng + ?Sized>(
        space: FiniteHistorySpace,
        local_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = space.agents();
        let rho = density_from_factor(&DensityFactor::random(local_dim.pow(n as u32), 1.0, rng))?;
        let povms = (0..n)
            .map(|i| {
                (0..space.histories()[i])
                    .map(|_| {
                        let logits = PovmLogits::random(local_dim, space.actions()[i], 1.0, rng);
                        Ok(quantum_softmax(&logits)?.povm)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(space, rho, povms)
    }

    pub fn cast<U: Real>(&self) -> EntangledPolicy<U> {
        EntangledPolicy {
            space: self.space.clone(),
            rho: self.rho.cast(),
            povms: self
                .povms
                .iter()
                .map(|t| t.iter().map(Povm::cast).collect())
                .collect(),
        }
    }
}

impl<T: Real> JointPolicy<T> for EntangledPolicy<T> {
    fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        self.space.check_history(h)?;
        let ms: Vec<&Povm<T>> = (0..self.space.agents())
            .map(|i| &self.povms[i][h[i]])
            .collect();
        born_joint(&self.rho, &ms)
    }
}

/// Any explicit table `π(a|h)`, including signaling ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedPolicy<T> {
    space: FiniteHistorySpace,
    table: Vec<Vec<T>>,
}

impl<T: Real> TabulatedPolicy<T> {
    pub fn new(space: FiniteHistorySpace, table: Vec<Vec<T>>) -> Result<Self> {
        if table.len() != space.num_joint_histories() {
            return Err(Error::Shape("one row per joint history required".into()));
        }
        for row in &table {
            check_row(row, space.num_joint_actions())?;
        }
        Ok(Self { space, table })
    }

    pub fn from_policy(policy: &dyn JointPolicy<T>) -> Result<Self> {
        Self::new(policy.space().clone(), policy.distribution_table()?)
    }
}

impl<T: Real> JointPolicy<T> for TabulatedPolicy<T> {
    fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        self.space.check_history(h)?;
        Ok(self.table[self.space.history_index(h)].clone())
    }
}

/// Source of the advice vector `x` in a coordinator-advice policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Coordinator<T> {
    /// `q(x|h) = tr(ρ ⊗ᵢ M̃ᵢ(xᵢ|hᵢ))`; `povms[i][hᵢ]` has one outcome per advice value.
    Entangled {
        rho: DensityMatrix<T>,
        povms: Vec<Vec<Povm<T>>>,
    },
    /// `q(x|h) = q(x̃)` if every `xᵢ = x̃`, else 0.
    SharedRandomness { q: Vec<T> },
}

/// `π(a|h) = Σₓ q(x|h) Π πᵢ(aᵢ|xᵢ,hᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorAdvicePolicy<T> {
    space: FiniteHistorySpace,
    coordinator: Coordinator<T>,
    advice: Vec<usize>,
    /// `actors[i][xᵢ][hᵢ][aᵢ]`.
    actors: Vec<Vec<Vec<Vec<T>>>>,
}

impl<T: Real> CoordinatorAdvicePolicy<T> {
    pub fn new(
        space: FiniteHistorySpace,
        coordinator: Coordinator<T>,
        actors: Vec<Vec<Vec<Vec<T>>>>,
    ) -> Result<Self> {
        let n = space.agents();
        if actors.len() != n {
            return Err(Error::Shape("one actor per agent required".into()));
        }
        let advice: Vec<usize> = match &coordinator {
            Coordinator::Entangled { rho, povms } => {
                if povms.len() != n {
                    return Err(Error::Shape(
                        "one measurement table per agent required".into(),
                    ));
                }
                let mut prod = 1;
                let mut sizes = Vec::with_capacity(n);
                for (i, table) in povms.iter().enumerate() {
                    if table.len() != space.histories()[i] {
                        return Err(Error::Shape(format!("agent {i}: wrong history count")));
                    }
                    let (d, m) = (table[0].dim(), table[0].outcomes());
                    if table.iter().any(|p| p.dim() != d || p.outcomes() != m) {
                        return Err(Error::Shape(format!(
                            "agent {i}: inconsistent measurements"
                        )));
                    }
                    prod *= d;
                    sizes.push(m);
                }
                if prod != rho.dim() {
                    return Err(Error::Shape(
                        "measurement dimensions do not match the state".into(),
                    ));
                }
                sizes
            }
            Coordinator::SharedRandomness { q } => {
                check_row(q, q.len())?;
                vec![q.len(); n]
            }
        };
        for (i, per_x) in actors.iter().enumerate() {
            if per_x.len() != advice[i] {
                return Err(Error::Shape(format!(
                    "agent {i}: one actor table per advice value required"
                )));
            }
            for table in per_x {
                if table.len() != space.histories()[i] {
                    return Err(Error::Shape(format!("agent {i}: wrong history count")));
                }
                for row in table {
                    check_row(row, space.actions()[i])?;
                }
            }
        }
        Ok(Self {
            space,
            coordinator,
            advice,
            actors,
        })
    }

    /// Actors that copy advice into actions (`|𝒳ᵢ| = |Aᵢ|`).
    pub fn identity_actors(space: &FiniteHistorySpace) -> Vec<Vec<Vec<Vec<T>>>> {
        (0..space.agents())
            .map(|i| {
                let m = space.actions()[i];
                (0..m)
                    .map(|x| {
                        let mut row = vec![T::zero(); m];
                        row[x] = T::one();
                        vec![row; space.histories()[i]]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn coordinator(&self) -> &Coordinator<T> {
        &self.coordinator
    }

    pub fn advice_sizes(&self) -> &[usize] {
        &self.advice
    }

    pub fn actors(&self) -> &[Vec<Vec<Vec<T>>>] {
        &self.actors
    }

    /// `q(·|h)` over flattened advice vectors.
    pub fn coordinator_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        self.space.check_history(h)?;
        match &self.coordinator {
            Coordinator::Entangled { rho, povms } => {
                let ms: Vec<&Povm<T>> = (0..self.space.agents()).map(|i| &povms[i][h[i]]).collect();
                born_joint(rho, &ms)
            }
            Coordinator::SharedRandomness { q } => {
                let n = self.space.agents();
                let mut out = vec![T::zero(); self.advice.iter().product()];
                for (x, &qx) in q.iter().enumerate() {
                    out[joint_index(&vec![x; n], &self.advice)] = qx;
                }
                Ok(out)
            }
        }
    }

    /// Random instance with an entangled coordinator of local dimension `dim`.
    pub fn random_entangled<R: Rng + ?Sized>(
        space: FiniteHistorySpace,
        advice: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = space.agents();
        let rho = density_from_factor(&DensityFactor::random(dim.pow(n as u32), 1.0, rng))?;
        let povms = (0..n)
            .map(|i| {
                (0..space.histories()[i])
                    .map(|_| {
                        Ok(quantum_softmax(&PovmLogits::random(dim, advice[i], 1.0, rng))?.povm)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let actors = random_actors(&space, advice, rng);
        Self::new(space, Coordinator::Entangled { rho, povms }, actors)
    }

    /// Random instance with a shared-randomness coordinator over `k` values.
    pub fn random_shared<R: Rng + ?Sized>(
        space: FiniteHistorySpace,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let q = random_simplex(k, rng);
        let actors = random_actors(&space, &vec![k; space.agents()], rng);
        Self::new(space, Coordinator::SharedRandomness { q }, actors)
    }
}

fn random_actors<T: Real, R: Rng + ?Sized>(
    space: &FiniteHistorySpace,
    advice: &[usize],
    rng: &mut R,
) -> Vec<Vec<Vec<Vec<T>>>> {
    (0..space.agents())
        .map(|i| {
            (0..advice[i])
                .map(|_| {
                    (0..space.histories()[i])
                        .map(|_| random_simplex(space.actions()[i], rng))
                        .collect()
                })
                .collect()
        })
        .collect()
}

impl<T: Real> JointPolicy<T> for CoordinatorAdvicePolicy<T> {
    fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    fn joint_distribution(&self, h: &[usize]) -> Result<Vec<T>> {
        let q = self.coordinator_distribution(h)?;
        let n = self.space.agents();
        let mut out = vec![T::zero(); self.space.num_joint_actions()];
        for (xi, &qx) in q.iter().enumerate() {
            if qx == T::zero() {
                continue;
            }
            let x = joint_outcome(xi, &self.advice);
            for (k, slot) in out.iter_mut().enumerate() {
                let a = self.space.action(k);
                *slot += (0..n)
                    .map(|i| self.actors[i][x[i]][h[i]][a[i]])
                    .fold(qx, |acc, p| acc * p);
            }
        }
        Ok(out)
    }

    fn sample_action(&self, h: &[usize], rng: &mut dyn rand::RngCore) -> Result<ActionSample> {
        let q = self.coordinator_distribution(h)?;
        let w: Vec<f64> = q.iter().map(|p| p.as_f64()).collect();
        let xi = sample_categorical(&w, rng);
        let x = joint_outcome(xi, &self.advice);
        let mut actions = Vec::with_capacity(x.len());
        let mut actor_log_probs = Vec::with_capacity(x.len());
        for (i, &xi) in x.iter().enumerate() {
            let row: Vec<f64> = self.actors[i][xi][h[i]]
                .iter()
                .map(|p| p.as_f64())
                .collect();
            let a = sample_categorical(&row, rng);
            actions.push(a);
            actor_log_probs.push(row[a].max(LOG_FLOOR).ln());
        }
        let joint = self.joint_distribution(h)?;
        let log_prob = joint[self.space.action_index(&actions)]
            .as_f64()
            .max(LOG_FLOOR)
            .ln();
        Ok(ActionSample {
            actions,
            advice: Some(x),
            log_prob,
            actor_log_probs,
            coordinator_log_prob: Some(w[xi].max(LOG_FLOOR).ln()),
        })
    }
}

/// Folds the actors into the measurements:
/// `Mᵢ(aᵢ|hᵢ) = Σ_{xᵢ} πᵢ(aᵢ|xᵢ,hᵢ) M̃ᵢ(xᵢ|hᵢ)`.
pub fn collapse_advice<T: Real>(policy: &CoordinatorAdvicePolicy<T>) -> Result<EntangledPolicy<T>> {
    let Coordinator::Entangled { rho, povms } = &policy.coordinator else {
        return Err(Error::Shape(
            "advice collapse needs an entangled coordinator".into(),
        ));
    };
    let space = &policy.space;
    let collapsed = (0..space.agents())
        .map(|i| {
            (0..space.histories()[i])
                .map(|h| {
                    let advice_povm = &povms[i][h];
                    let d = advice_povm.dim();
                    let elems = (0..space.actions()[i])
                        .map(|a| {
                            let mut m = CMat::zeros(d);
                            for (x, e) in advice_povm.elements().iter().enumerate() {
                                m.add_scaled(e, policy.actors[i][x][h][a]);
                            }
                            m
                        })
                        .collect();
                    Povm::from_elements_unchecked(elems)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    EntangledPolicy::new(space.clone(), rho.clone(), collapsed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonSignalingReport {
    pub non_signaling: bool,
    /// Largest `|Σ_{a_J} π(a_I,a_J|h_I,h_J) − Σ_{a_J} π(a_I,a_J|h_I,h_J′)|`.
    pub worst_violation: f64,
}

/// Checks that every agent subset's action marginal ignores the histories of
/// the remaining agents.
pub fn check_non_signaling<T: Real>(
    policy: &dyn JointPolicy<T>,
    tolerance: f64,
) -> Result<NonSignalingReport> {
    let space = policy.space();
    let nh = space.num_joint_histories();
    if nh > NON_SIGNALING_BUDGET {
        return Err(Error::BudgetExceeded {
            needed: nh as u128,
            budget: NON_SIGNALING_BUDGET as u128,
        });
    }
    let n = space.agents();
    let table: Vec<Vec<f64>> = policy
        .distribution_table()?
        .into_iter()
        .map(|r| r.into_iter().map(Real::as_f64).collect())
        .collect();
    let mut worst = 0.0f64;
    for mask in 1..(1usize << n) - 1 {
        let inside: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        let h_radix: Vec<usize> = inside.iter().map(|&i| space.histories()[i]).collect();
        let a_radix: Vec<usize> = inside.iter().map(|&i| space.actions()[i]).collect();
        let n_hi: usize = h_radix.iter().product();
        let n_ai: usize = a_radix.iter().product();
        let mut lo = vec![f64::INFINITY; n_hi * n_ai];
        let mut hi = vec![f64::NEG_INFINITY; n_hi * n_ai];
        for (hk, row) in table.iter().enumerate() {
            let h = space.history(hk);
            let h_i: Vec<usize> = inside.iter().map(|&i| h[i]).collect();
            let base = joint_index(&h_i, &h_radix) * n_ai;
            let mut marginal = vec![0.0; n_ai];
            for (ak, &p) in row.iter().enumerate() {
                let a = space.action(ak);
                let a_i: Vec<usize> = inside.iter().map(|&i| a[i]).collect();
                marginal[joint_index(&a_i, &a_radix)] += p;
            }
            for (k, m) in marginal.into_iter().enumerate() {
                lo[base + k] = lo[base + k].min(m);
                hi[base + k] = hi[base + k].max(m);
            }
        }
        for (l, h) in lo.iter().zip(&hi) {
            worst = worst.max(h - l);
        }
    }
    Ok(NonSignalingReport {
        non_signaling: worst <= tolerance,
        worst_violation: worst,
    })
}

/// Writes `h0,…,a0,…,probability` rows for every joint history and action.
pub fn write_distribution_csv<T: Real, W: Write>(
    policy: &dyn JointPolicy<T>,
    mut out: W,
) -> std::io::Result<()> {
    let space = policy.space();
    let n = space.agents();
    let header: Vec<String> = (0..n)
        .map(|i| format!("h{i}"))
        .chain((0..n).map(|i| format!("a{i}")))
        .chain(std::iter::once("probability".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let table = policy
        .distribution_table()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    for (hk, row) in table.iter().enumerate() {
        let h = space.history(hk);
        for (ak, p) in row.iter().enumerate() {
            let a = space.action(ak);
            let cells: Vec<String> = h
                .iter()
                .chain(&a)
                .map(usize::to_string)
                .chain(std::iter::once(format!("{:e}", p.as_f64())))
                .collect();
            writeln!(out, "{}", cells.join(","))?;
        }
    }
    Ok(())
}

/// Where the shared state of trainable entangled parameters comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum StateParams<T> {
    Fixed(DensityMatrix<T>),
    Learned(DensityFactor<T>),
}

/// Trainable tabular entangled policy: a state plus QuantumSoftmax logits
/// per (agent, history). Parameters flatten to interleaved real/imaginary
/// parts, state factor first.
#[derive(Debug, Clone, PartialEq)]
pub struct EntangledParams<T> {
    space: FiniteHistorySpace,
    pub state: StateParams<T>,
    /// `logits[i][hᵢ]`.
    pub logits: Vec<Vec<PovmLogits<T>>>,
}

impl<T: Real> EntangledParams<T> {
    pub fn new(
        space: FiniteHistorySpace,
        state: StateParams<T>,
        logits: Vec<Vec<PovmLogits<T>>>,
    ) -> Result<Self> {
        if logits.len() != space.agents() {
            return Err(Error::Shape("one logit table per agent required".into()));
        }
        let mut prod = 1;
        for (i, table) in logits.iter().enumerate() {
            if table.len() != space.histories()[i] {
                return Err(Error::Shape(format!("agent {i}: wrong history count")));
            }
            let d = table[0].dim();
            if table
                .iter()
                .any(|z| z.dim() != d || z.outcomes() != space.actions()[i])
            {
                return Err(Error::Shape(format!("agent {i}: inconsistent logits")));
            }
            prod *= d;
        }
        let state_dim = match &state {
            StateParams::Fixed(r) => r.dim(),
            StateParams::Learned(f) => f.dim(),
        };
        if prod != state_dim {
            return Err(Error::Shape(format!(
                "local dimensions multiply to {prod}, state has dimension {state_dim}"
            )));
        }
        Ok(Self {
            space,
            state,
            logits,
        })
    }

    /// Learned state and logits with entries drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(
        space: FiniteHistorySpace,
        local_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let n = space.agents();
        let factor = DensityFactor::random(local_dim.pow(n as u32), scale, rng);
        let logits = (0..n)
            .map(|i| {
                (0..space.histories()[i])
                    .map(|_| PovmLogits::random(local_dim, space.actions()[i], scale, rng))
                    .collect()
            })
            .collect();
        Self {
            space,
            state: StateParams::Learned(factor),
            logits,
        }
    }

    pub fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    pub fn num_params(&self) -> usize {
        let state = match &self.state {
            StateParams::Fixed(_) => 0,
            StateParams::Learned(f) => 2 * f.dim() * f.dim(),
        };
        state
            + self
                .logits
                .iter()
                .flatten()
                .map(PovmLogits::num_params)
                .sum::<usize>()
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        if let StateParams::Learned(f) = &self.state {
            out.extend(f.factor().to_interleaved());
        }
        for z in self.logits.iter().flatten() {
            out.extend(z.to_flat());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        if let StateParams::Learned(f) = &mut self.state {
            let len = 2 * f.dim() * f.dim();
            *f = DensityFactor::new(CMat::from_interleaved(f.dim(), &values[..len])?)?;
            offset = len;
        }
        for z in self.logits.iter_mut().flatten() {
            let len = z.num_params();
            *z = PovmLogits::from_flat(z.dim(), z.outcomes(), &values[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    /// Evaluates the state and every measurement.
    pub fn realize(&self) -> Result<RealizedPolicy<T>> {
        let rho = match &self.state {
            StateParams::Fixed(r) => r.clone(),
            StateParams::Learned(f) => density_from_factor(f)?,
        };
        let forwards = self
            .logits
            .iter()
            .map(|table| {
                table
                    .iter()
                    .map(quantum_softmax)
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let povms = forwards
            .iter()
            .map(|t| t.iter().map(|f| f.povm.clone()).collect())
            .collect();
        let policy = EntangledPolicy::new(self.space.clone(), rho, povms)?;
        Ok(RealizedPolicy {
            policy,
            forwards,
            table: OnceLock::new(),
        })
    }
}

/// An [`EntangledPolicy`] together with the intermediate values needed to
/// backpropagate into its [`EntangledParams`].
#[derive(Debug, Clone)]
pub struct RealizedPolicy<T> {
    pub policy: EntangledPolicy<T>,
    forwards: Vec<Vec<SoftmaxForward<T>>>,
    table: OnceLock<Vec<Vec<T>>>,
}

impl<T: Real> RealizedPolicy<T> {
    /// `π(a|h)` for every joint history, computed on first use.
    pub fn table(&self) -> Result<&[Vec<T>]> {
        if self.table.get().is_none() {
            let t = self.policy.distribution_table()?;
            let _ = self.table.set(t);
        }
        Ok(self.table.get().expect("table was just set"))
    }

    /// Sum of conditioning penalties over all measurements.
    pub fn conditioning_penalty(&self) -> T {
        self.forwards
            .iter()
            .flatten()
            .map(SoftmaxForward::conditioning_penalty)
            .sum()
    }

    /// Flat parameter gradient of `Σ_h Σ_a G[h][a] π(a|h) + cond_coef · penalty`.
    /// `cotangent` is indexed by flattened joint history; empty rows are skipped.
    pub fn vjp(
        &self,
        params: &EntangledParams<T>,
        cotangent: &[Vec<T>],
        cond_coef: T,
    ) -> Result<Vec<T>> {
        let space = &params.space;
        if cotangent.len() != space.num_joint_histories() {
            return Err(Error::Shape(
                "one cotangent row per joint history required".into(),
            ));
        }
        let n = space.agents();
        let rho = self.policy.rho();
        let mut g_rho = CMat::zeros(rho.dim());
        let mut g_povm: Vec<Vec<Vec<CMat<T>>>> = self
            .policy
            .povms()
            .iter()
            .map(|t| {
                t.iter()
                    .map(|p| vec![CMat::zeros(p.dim()); p.outcomes()])
                    .collect()
            })
            .collect();
        let mut touched: Vec<Vec<bool>> = self
            .policy
            .povms()
            .iter()
            .map(|t| vec![false; t.len()])
            .collect();
        for (hk, row) in cotangent.iter().enumerate() {
            if row.is_empty() || row.iter().all(|&g| g == T::zero()) {
                continue;
            }
            let h = space.history(hk);
            let ms: Vec<&Povm<T>> = (0..n).map(|i| &self.policy.povms()[i][h[i]]).collect();
            let g = born_joint_vjp(rho, &ms, row)?;
            g_rho.add_scaled(&g.rho, T::one());
            for i in 0..n {
                touched[i][h[i]] = true;
                for (acc, gi) in g_povm[i][h[i]].iter_mut().zip(&g.povms[i]) {
                    acc.add_scaled(gi, T::one());
                }
            }
        }
        let mut out = Vec::with_capacity(params.num_params());
        if let StateParams::Learned(f) = &params.state {
            out.extend(density_from_factor_vjp(f, &g_rho).to_interleaved());
        }
        for i in 0..n {
            for (h, fwd) in self.forwards[i].iter().enumerate() {
                if !touched[i][h] && cond_coef == T::zero() {
                    out.extend(std::iter::repeat_n(
                        T::zero(),
                        params.logits[i][h].num_params(),
                    ));
                    continue;
                }
                for g in fwd.vjp(&g_povm[i][h], cond_coef)? {
                    out.extend(g.to_interleaved());
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn chsh_space() -> FiniteHistorySpace {
        FiniteHistorySpace::new(vec![2, 2], vec![2, 2]).unwrap()
    }

    #[test]
    fn deterministic_policy_is_a_point_mass() {
        let space = chsh_space();
        let p = FactorizedPolicy::<f64>::deterministic(space, &[vec![1, 0], vec![0, 1]]).unwrap();
        let d = p.joint_distribution(&[0, 1]).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0, 1.0]);
        let mut rng = seeded(0);
        for _ in 0..10 {
            assert_eq!(
                p.sample_action(&[0, 1], &mut rng).unwrap().actions,
                vec![1, 1]
            );
        }
    }

    #[test]
    fn rejects_histories_outside_the_space() {
        let p = FactorizedPolicy::<f64>::uniform(chsh_space());
        assert!(p.joint_distribution(&[2, 0]).is_err());
        assert!(p.joint_distribution(&[0]).is_err());
    }

    #[test]
    fn shared_randomness_embeds_as_entangled() {
        let mut rng = seeded(3);
        let sr = SharedRandomnessPolicy::<f64>::random(chsh_space(), 3, &mut rng);
        let ent = sr.to_entangled().unwrap();
        for hk in 0..4 {
            let h = chsh_space().history(hk);
            let a = sr.joint_distribution(&h).unwrap();
            let b = ent.joint_distribution(&h).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_actors_collapse_to_the_same_measurements() {
        let mut rng = seeded(5);
        let space = chsh_space();
        let random =
            CoordinatorAdvicePolicy::<f64>::random_entangled(space.clone(), &[2, 2], 2, &mut rng)
                .unwrap();
        let Coordinator::Entangled { rho, povms } = random.coordinator().clone() else {
            unreachable!()
        };
        let actors = CoordinatorAdvicePolicy::identity_actors(&space);
        let p = CoordinatorAdvicePolicy::new(
            space,
            Coordinator::Entangled {
                rho,
                povms: povms.clone(),
            },
            actors,
        )
        .unwrap();
        let c = collapse_advice(&p).unwrap();
        assert_eq!(c.povms(), povms.as_slice());
    }

    #[test]
    fn advice_ignoring_actors_collapse_to_scaled_identity() {
        let mut rng = seeded(6);
        let space = chsh_space();
        let mut p =
            CoordinatorAdvicePolicy::<f64>::random_entangled(space, &[3, 2], 2, &mut rng).unwrap();
        for per_x in p.actors.iter_mut() {
            let first = per_x[0].clone();
            for t in per_x.iter_mut() {
                *t = first.clone();
            }
        }
        let c = collapse_advice(&p).unwrap();
        for i in 0..2 {
            for h in 0..2 {
                for a in 0..2 {
                    let want = CMat::identity(2).scale(p.actors[i][0][h][a]);
                    assert!((&c.povms()[i][h].elements()[a] - &want).frobenius_norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn signaling_table_is_detected() {
        let space = FiniteHistorySpace::new(vec![2, 2], vec![2, 2]).unwrap();
        // Agent 0 copies agent 1's history.
        let table = (0..4)
            .map(|hk| {
                let h = space.history(hk);
                let mut row = vec![0.0; 4];
                row[space.action_index(&[h[1], 0])] = 1.0;
                row
            })
            .collect();
        let p = TabulatedPolicy::new(space, table).unwrap();
        let r = check_non_signaling(&p, 1e-9).unwrap();
        assert!(!r.non_signaling && r.worst_violation > 0.1);
    }

    #[test]
    fn factorized_and_entangled_are_non_signaling() {
        let mut rng = seeded(8);
        let space = FiniteHistorySpace::new(vec![2, 3, 2], vec![2, 2, 3]).unwrap();
        let f = FactorizedPolicy::<f64>::random(space.clone(), &mut rng);
        assert!(check_non_signaling(&f, 1e-12).unwrap().worst_violation <= 1e-12);
        let e = EntangledPolicy::<f64>::random(space, 2, &mut rng).unwrap();
        assert!(check_non_signaling(&e, 1e-9).unwrap().non_signaling);
    }

    #[test]
    fn non_signaling_budget() {
        let space = FiniteHistorySpace::new(vec![101, 100], vec![1, 1]).unwrap();
        let p = FactorizedPolicy::<f64>::uniform(space);
        assert!(matches!(
            check_non_signaling(&p, 1e-9),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn shared_randomness_coordinator_gives_equal_advice() {
        let mut rng = seeded(9);
        let p = CoordinatorAdvicePolicy::<f64>::random_shared(chsh_space(), 4, &mut rng).unwrap();
        for _ in 0..100 {
            let s = p.sample_action(&[1, 0], &mut rng).unwrap();
            let x = s.advice.unwrap();
            assert_eq!(x[0], x[1]);
        }
    }

    #[test]
    fn csv_export() {
        let p = FactorizedPolicy::<f64>::uniform(chsh_space());
        let mut buf = Vec::new();
        write_distribution_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "h0,h1,a0,a1,probability");
        assert_eq!(lines.len(), 17);
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = seeded(10);
        let mut params = EntangledParams::<f64>::random(chsh_space(), 2, 0.1, &mut rng);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.num_params());
        let copy = params.clone();
        params.set_flat(&flat).unwrap();
        assert_eq!(params, copy);
    }
}
