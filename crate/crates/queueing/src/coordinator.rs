//! Routing policies built from a coordinator, which hands each router a
//! piece of advice, and per-router actors, which turn advice and the local
//! request size into a server choice.
//!
//! The quantum coordinator measures a shared two-qubit state with POVMs
//! chosen by a per-router network from `xᵢ`, so router `i`'s advice depends
//! on `xᵢ` only. The shared-randomness coordinator draws one value `x̃` that
//! both routers receive.

use qcoord::policies::{FiniteHistorySpace, TabulatedPolicy, LOG_FLOOR};
use qcoord::quantum::{
    born_joint, born_joint_vjp, quantum_softmax, DensityMatrix, PovmLogits, SoftmaxForward,
};
use qcoord::rng::sample_categorical;
use qcoord::CMat;
use rand::{Rng, RngCore};

use crate::env::{Decision, RoutingPolicy};
use crate::error::{QueueError, Result};
use crate::nn::{Mlp, MlpTape};

/// Network input for a request of size `x`.
pub fn features(x: f64) -> [f64; 2] {
    [x, x.ln_1p()]
}

/// Qubit measurements with two outcomes: sixteen reals per router.
const QUBIT: usize = 2;
const OUTCOMES: usize = 2;
const LOGIT_VALUES: usize = 2 * OUTCOMES * QUBIT * QUBIT;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `∂L/∂z` for `p = softmax(z)` given `∂L/∂p`.
fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(grad_p)
        .map(|(pi, gi)| pi * (gi - dot))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumCoordinator {
    pub rho: DensityMatrix<f64>,
    /// Router `i`'s network maps `features(xᵢ)` to two 2×2 complex logits.
    pub nets: [Mlp; 2],
    /// Multiplies each network's output before QuantumSoftmax.
    pub logit_scale: [f64; 2],
}

/// Forward values of [`QuantumCoordinator::forward`].
#[derive(Debug, Clone)]
pub struct QuantumTape {
    nets: [MlpTape; 2],
    softmax: [SoftmaxForward<f64>; 2],
    /// `q(j₁, j₂ | x)` at index `2·j₁ + j₂`.
    pub probs: Vec<f64>,
}

impl QuantumTape {
    /// Sum of both routers' conditioning penalties.
    pub fn conditioning_penalty(&self) -> f64 {
        self.softmax
            .iter()
            .map(SoftmaxForward::conditioning_penalty)
            .sum()
    }
}

impl QuantumCoordinator {
    /// Fresh networks on the Bell state with hidden layers `hidden`. The output
    /// layer starts small so every measurement begins close to `{I/2, I/2}`.
    pub fn new<R: Rng + ?Sized>(
        rho: DensityMatrix<f64>,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if rho.dim() != QUBIT * QUBIT {
            return Err(QueueError::Shape(format!(
                "expected a two-qubit state, got dimension {}",
                rho.dim()
            )));
        }
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(LOGIT_VALUES);
        Ok(Self {
            rho,
            nets: [
                Mlp::random(&sizes, 0.1, rng)?,
                Mlp::random(&sizes, 0.1, rng)?,
            ],
            logit_scale: [1.0; 2],
        })
    }

    pub fn forward(&self, x: [f64; 2]) -> Result<QuantumTape> {
        let mut tapes = Vec::with_capacity(2);
        let mut forwards = Vec::with_capacity(2);
        for i in 0..2 {
            let tape = self.nets[i].forward_tape(&features(x[i]))?;
            let z: Vec<f64> = tape
                .output()
                .iter()
                .map(|v| v * self.logit_scale[i])
                .collect();
            forwards.push(quantum_softmax(&PovmLogits::from_flat(
                QUBIT, OUTCOMES, &z,
            )?)?);
            tapes.push(tape);
        }
        let probs = born_joint(&self.rho, &[&forwards[0].povm, &forwards[1].povm])?;
        let [t0, t1]: [MlpTape; 2] = tapes.try_into().expect("two routers");
        let [f0, f1]: [SoftmaxForward<f64>; 2] = forwards.try_into().expect("two routers");
        Ok(QuantumTape {
            nets: [t0, t1],
            softmax: [f0, f1],
            probs,
        })
    }

    /// Accumulates gradients of `Σ_j cot[j]·q(j|x) + cond_coef·penalty` into
    /// `net_grads` (both networks, concatenated) and `scale_grads`.
    pub fn backward(
        &self,
        tape: &QuantumTape,
        cot: &[f64],
        cond_coef: f64,
        net_grads: &mut [f64],
        scale_grads: &mut [f64],
    ) -> Result<()> {
        let povms = [&tape.softmax[0].povm, &tape.softmax[1].povm];
        let g = born_joint_vjp(&self.rho, &povms, cot)?;
        let n0 = self.nets[0].num_params();
        let (g0, g1) = net_grads.split_at_mut(n0);
        for (i, buf) in [g0, g1].into_iter().enumerate() {
            let g_z: Vec<f64> = tape.softmax[i]
                .vjp(&g.povms[i], cond_coef)?
                .iter()
                .flat_map(CMat::to_interleaved)
                .collect();
            let raw = tape.nets[i].output();
            scale_grads[i] += g_z.iter().zip(raw).map(|(a, b)| a * b).sum::<f64>();
            let g_raw: Vec<f64> = g_z.iter().map(|v| v * self.logit_scale[i]).collect();
            self.nets[i].backward(&tape.nets[i], &g_raw, buf);
        }
        Ok(())
    }

    pub fn num_net_params(&self) -> usize {
        self.nets.iter().map(Mlp::num_params).sum()
    }
}

/// `q(advice = j | x)` and its gradient with respect to the network and
/// scale parameters (concatenated in that order).
pub fn coordinator_prob(
    coord: &QuantumCoordinator,
    x: [f64; 2],
    advice: [usize; 2],
) -> Result<(f64, Vec<f64>)> {
    if advice.iter().any(|&a| a >= OUTCOMES) {
        return Err(QueueError::Shape(format!("advice {advice:?} out of range")));
    }
    let tape = coord.forward(x)?;
    let j = advice[0] * OUTCOMES + advice[1];
    let mut cot = vec![0.0; OUTCOMES * OUTCOMES];
    cot[j] = 1.0;
    let mut nets = vec![0.0; coord.num_net_params()];
    let mut scales = vec![0.0; 2];
    coord.backward(&tape, &cot, 0.0, &mut nets, &mut scales)?;
    nets.extend(scales);
    Ok((tape.probs[j], nets))
}

/// One shared value `x̃ ~ q`, sent to both routers.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedCoordinator {
    pub logits: Vec<f64>,
}

impl SharedCoordinator {
    pub fn uniform(values: usize) -> Self {
        Self {
            logits: vec![0.0; values],
        }
    }

    pub fn values(&self) -> usize {
        self.logits.len()
    }

    pub fn q(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coordinator {
    Quantum(QuantumCoordinator),
    Shared(SharedCoordinator),
}

impl Coordinator {
    /// Advice values per router.
    pub fn advice_size(&self) -> usize {
        match self {
            Coordinator::Quantum(_) => OUTCOMES,
            Coordinator::Shared(s) => s.values(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Actors {
    /// The advice is the server choice.
    Trivial,
    /// Router `i`'s network maps `features(xᵢ)` and one-hot advice to two
    /// action logits.
    Learned { nets: [Mlp; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterPolicy {
    pub coordinator: Coordinator,
    pub actors: Actors,
}

/// Forward values for one observation.
#[derive(Debug, Clone)]
pub struct PolicyTape {
    quantum: Option<QuantumTape>,
    /// Joint advice distribution, index `j₁·K + j₂`.
    pub coordinator_probs: Vec<f64>,
    actor_nets: Vec<MlpTape>,
    /// `π_i(·|xᵢ, adviceᵢ)` for the advice the tape was built with.
    pub actor_probs: Vec<Vec<f64>>,
}

impl PolicyTape {
    pub fn conditioning_penalty(&self) -> f64 {
        self.quantum
            .as_ref()
            .map_or(0.0, QuantumTape::conditioning_penalty)
    }
}

/// Parameter gradients split like [`RouterPolicy::net_params`] and
/// [`RouterPolicy::scale_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub nets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl RouterPolicy {
    pub fn quantum<R: Rng + ?Sized>(
        hidden: &[usize],
        learned_actors: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let coordinator =
            Coordinator::Quantum(QuantumCoordinator::new(DensityMatrix::bell(), hidden, rng)?);
        let actors = if learned_actors {
            Self::learned_actors(OUTCOMES, hidden, rng)?
        } else {
            Actors::Trivial
        };
        Ok(Self {
            coordinator,
            actors,
        })
    }

    /// Shared-randomness coordinator over `values` outcomes with learned
    /// actors (trivial actors would need exactly two values).
    pub fn shared<R: Rng + ?Sized>(values: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if values == 0 {
            return Err(QueueError::Config(
                "shared randomness needs at least one value".into(),
            ));
        }
        Ok(Self {
            coordinator: Coordinator::Shared(SharedCoordinator::uniform(values)),
            actors: Self::learned_actors(values, hidden, rng)?,
        })
    }

    fn learned_actors<R: Rng + ?Sized>(
        advice: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Actors> {
        let mut sizes = vec![2 + advice];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Ok(Actors::Learned {
            nets: [
                Mlp::random(&sizes, 0.1, rng)?,
                Mlp::random(&sizes, 0.1, rng)?,
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.actors, Actors::Trivial) && self.coordinator.advice_size() != 2 {
            return Err(QueueError::Config(
                "trivial actors need exactly two advice values".into(),
            ));
        }
        Ok(())
    }

    pub fn advice_size(&self) -> usize {
        self.coordinator.advice_size()
    }

    /// Network weights: coordinator networks, then actor networks.
    pub fn net_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Coordinator::Quantum(q) = &self.coordinator {
            out.extend(q.nets.iter().flat_map(Mlp::to_flat));
        }
        if let Actors::Learned { nets } = &self.actors {
            out.extend(nets.iter().flat_map(Mlp::to_flat));
        }
        out
    }

    /// Logit scales (quantum) or shared-randomness logits.
    pub fn scale_params(&self) -> Vec<f64> {
        match &self.coordinator {
            Coordinator::Quantum(q) => q.logit_scale.to_vec(),
            Coordinator::Shared(s) => s.logits.clone(),
        }
    }

    pub fn set_params(&mut self, nets: &[f64], scales: &[f64]) -> Result<()> {
        if nets.len() != self.net_params().len() || scales.len() != self.scale_params().len() {
            return Err(QueueError::Shape(
                "parameter vector lengths do not match the policy".into(),
            ));
        }
        let mut k = 0;
        let mut take = |net: &mut Mlp| -> Result<()> {
            let n = net.num_params();
            net.set_flat(&nets[k..k + n])?;
            k += n;
            Ok(())
        };
        match &mut self.coordinator {
            Coordinator::Quantum(q) => {
                for net in &mut q.nets {
                    take(net)?;
                }
                q.logit_scale.copy_from_slice(scales);
            }
            Coordinator::Shared(s) => s.logits.copy_from_slice(scales),
        }
        if let Actors::Learned { nets } = &mut self.actors {
            for net in nets {
                take(net)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> PolicyGrads {
        PolicyGrads {
            nets: vec![0.0; self.net_params().len()],
            scales: vec![0.0; self.scale_params().len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.net_params()
            .iter()
            .chain(&self.scale_params())
            .all(|v| v.is_finite())
    }

    /// Joint advice distribution `q(j₁, j₂ | x)`, index `j₁·K + j₂`.
    pub fn coordinator_probs(&self, x: [f64; 2]) -> Result<Vec<f64>> {
        match &self.coordinator {
            Coordinator::Quantum(q) => Ok(q.forward(x)?.probs),
            Coordinator::Shared(s) => Ok(shared_joint(&s.q())),
        }
    }

    fn actor_input(x: f64, advice: usize, k: usize) -> Vec<f64> {
        let mut v = features(x).to_vec();
        v.extend((0..k).map(|j| if j == advice { 1.0 } else { 0.0 }));
        v
    }

    /// `π_i(·|xᵢ, adviceᵢ)` for both routers.
    pub fn actor_probs(&self, x: [f64; 2], advice: [usize; 2]) -> Result<[Vec<f64>; 2]> {
        let k = self.advice_size();
        match &self.actors {
            Actors::Trivial => Ok(advice.map(|a| {
                let mut p = vec![0.0; 2];
                p[a] = 1.0;
                p
            })),
            Actors::Learned { nets } => {
                let p0 = softmax(&nets[0].forward(&Self::actor_input(x[0], advice[0], k))?);
                let p1 = softmax(&nets[1].forward(&Self::actor_input(x[1], advice[1], k))?);
                Ok([p0, p1])
            }
        }
    }

    /// Forward pass at `x` with actors evaluated at `advice`.
    pub fn forward(&self, x: [f64; 2], advice: [usize; 2]) -> Result<PolicyTape> {
        let k = self.advice_size();
        let (quantum, coordinator_probs) = match &self.coordinator {
            Coordinator::Quantum(q) => {
                let tape = q.forward(x)?;
                let probs = tape.probs.clone();
                (Some(tape), probs)
            }
            Coordinator::Shared(s) => (None, shared_joint(&s.q())),
        };
        let (actor_nets, actor_probs) = match &self.actors {
            Actors::Trivial => (Vec::new(), self.actor_probs(x, advice)?.to_vec()),
            Actors::Learned { nets } => {
                let mut tapes = Vec::with_capacity(2);
                let mut probs = Vec::with_capacity(2);
                for i in 0..2 {
                    let tape = nets[i].forward_tape(&Self::actor_input(x[i], advice[i], k))?;
                    probs.push(softmax(tape.output()));
                    tapes.push(tape);
                }
                (tapes, probs)
            }
        };
        Ok(PolicyTape {
            quantum,
            coordinator_probs,
            actor_nets,
            actor_probs,
        })
    }

    /// Accumulates gradients of
    /// `Σ_j coord_cot[j]·q(j|x) + Σᵢ Σ_a actor_cot[i][a]·πᵢ(a) + cond_coef·penalty`.
    pub fn backward(
        &self,
        tape: &PolicyTape,
        coord_cot: &[f64],
        actor_cot: &[Vec<f64>; 2],
        cond_coef: f64,
        grads: &mut PolicyGrads,
    ) -> Result<()> {
        let mut offset = 0;
        match &self.coordinator {
            Coordinator::Quantum(q) => {
                let n = q.num_net_params();
                let qt = tape.quantum.as_ref().expect("quantum tape");
                q.backward(
                    qt,
                    coord_cot,
                    cond_coef,
                    &mut grads.nets[..n],
                    &mut grads.scales,
                )?;
                offset = n;
            }
            Coordinator::Shared(s) => {
                let k = s.values();
                let diag: Vec<f64> = (0..k).map(|j| coord_cot[j * k + j]).collect();
                for (g, d) in grads.scales.iter_mut().zip(softmax_backward(&s.q(), &diag)) {
                    *g += d;
                }
            }
        }
        if let Actors::Learned { nets } = &self.actors {
            for i in 0..2 {
                let n = nets[i].num_params();
                let g_logits = softmax_backward(&tape.actor_probs[i], &actor_cot[i]);
                nets[i].backward(
                    &tape.actor_nets[i],
                    &g_logits,
                    &mut grads.nets[offset..offset + n],
                );
                offset += n;
            }
        }
        Ok(())
    }

    /// The pre-flip joint policy `π(a₁, a₂ | x₁, x₂)` on a grid of request
    /// sizes, as a finite policy over grid indices.
    pub fn tabulate(&self, grid: &[f64]) -> Result<TabulatedPolicy<f64>> {
        let space = FiniteHistorySpace::new(vec![grid.len(); 2], vec![2, 2])?;
        let k = self.advice_size();
        let mut table = Vec::with_capacity(grid.len() * grid.len());
        for &x1 in grid {
            for &x2 in grid {
                let x = [x1, x2];
                let q = self.coordinator_probs(x)?;
                let mut row = vec![0.0; 4];
                for (j, &qj) in q.iter().enumerate() {
                    if qj == 0.0 {
                        continue;
                    }
                    let [p0, p1] = self.actor_probs(x, [j / k, j % k])?;
                    for a0 in 0..2 {
                        for a1 in 0..2 {
                            row[a0 * 2 + a1] += qj * p0[a0] * p1[a1];
                        }
                    }
                }
                table.push(row);
            }
        }
        Ok(TabulatedPolicy::new(space, table)?)
    }
}

fn shared_joint(q: &[f64]) -> Vec<f64> {
    let k = q.len();
    let mut out = vec![0.0; k * k];
    for (j, &p) in q.iter().enumerate() {
        out[j * k + j] = p;
    }
    out
}

impl RoutingPolicy for RouterPolicy {
    fn decide(&self, x: [f64; 2], rng: &mut dyn RngCore) -> Result<Decision> {
        let k = self.advice_size();
        let q = self.coordinator_probs(x)?;
        let j = sample_categorical(&q, rng);
        let advice = [j / k, j % k];
        let probs = self.actor_probs(x, advice)?;
        let mut actions = [0u8; 2];
        let mut actor_log_probs = [0.0; 2];
        for i in 0..2 {
            let a = sample_categorical(&probs[i], rng);
            actions[i] = a as u8;
            actor_log_probs[i] = probs[i][a].max(LOG_FLOOR).ln();
        }
        let coordinator_log_prob = q[j].max(LOG_FLOOR).ln();
        Ok(Decision {
            actions,
            advice,
            log_prob: coordinator_log_prob + actor_log_probs[0] + actor_log_probs[1],
            coordinator_log_prob,
            actor_log_probs,
        })
    }
}
