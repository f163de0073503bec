//! Two routers, two servers. Each step a pair of requests of sizes
//! `x₁, x₂ ~ Exp(μ)` arrives, each router picks a server from its own `xᵢ`,
//! and the next pair arrives after `Δt ~ Exp(λ)`.
//!
//! A queue state `q > 0` is the work still queued; `q < 0` is how long the
//! server has been on its baseline task without interruption. Baseline
//! intervals of length `t` earn `T(t) = t^p`, paid out incrementally so that
//! the per-step rewards of one interval sum to `T(t)`.

use std::io::Write;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{QueueError, Result};

/// How the wait constraint is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaitNormalization {
    /// Total wait divided by the number of requests (two per step).
    PerRequest,
    /// Total wait divided by the number of steps.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueParams {
    /// Arrival rate of request pairs.
    pub lambda_rate: f64,
    /// Rate of the exponential request sizes.
    pub mu_rate: f64,
    /// `T(t) = t^p`.
    pub throughput_exponent: f64,
    pub wait_limit: f64,
    pub wait_normalization: WaitNormalization,
    /// Steps per episode.
    pub horizon: usize,
}

impl Default for QueueParams {
    fn default() -> Self {
        Self {
            lambda_rate: 0.8,
            mu_rate: 1.0,
            throughput_exponent: 2.0,
            wait_limit: 5.5,
            wait_normalization: WaitNormalization::PerRequest,
            horizon: 2048,
        }
    }
}

impl QueueParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QueueError::Config(m.to_string()));
        if !(self.lambda_rate > 0.0 && self.lambda_rate.is_finite()) {
            return bad("arrival rate must be positive");
        }
        if !(self.mu_rate > 0.0 && self.mu_rate.is_finite()) {
            return bad("request size rate must be positive");
        }
        if !(self.throughput_exponent > 1.0 && self.throughput_exponent.is_finite()) {
            return bad("throughput exponent must exceed 1");
        }
        if !(self.wait_limit > 0.0) {
            return bad("wait limit must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        Ok(())
    }

    /// Baseline throughput of an uninterrupted interval of length `t`.
    pub fn throughput(&self, t: f64) -> f64 {
        t.powf(self.throughput_exponent)
    }

    /// Wait cost of one step in the configured normalization.
    pub fn normalized_wait(&self, wait: f64) -> f64 {
        match self.wait_normalization {
            WaitNormalization::PerRequest => wait / 2.0,
            WaitNormalization::PerStep => wait,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub q: [f64; 2],
}

impl QueueState {
    /// Both servers idle with no accumulated baseline time.
    pub fn idle() -> Self {
        Self { q: [0.0, 0.0] }
    }

    /// Servers relabeled.
    pub fn swapped(&self) -> Self {
        Self {
            q: [self.q[1], self.q[0]],
        }
    }
}

/// Exogenous randomness consumed by one transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    /// Whether both routing decisions are mirrored this step.
    pub flip: bool,
    pub dt: f64,
    /// When both requests go to one server, whether request 1 is served
    /// before request 2.
    pub first_is_one: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: QueueState,
    /// Reward credited to each server.
    pub rewards: [f64; 2],
    /// Load sent to each server.
    pub loads: [f64; 2],
    /// Total wait of the two arriving requests.
    pub wait: f64,
    /// Servers actually used, after the flip.
    pub targets: [u8; 2],
}

impl Transition {
    pub fn reward(&self) -> f64 {
        self.rewards[0] + self.rewards[1]
    }
}

fn next_queue(q: f64, load: f64, dt: f64) -> f64 {
    if q < 0.0 && load > 0.0 {
        load - dt
    } else {
        q + load - dt
    }
}

fn server_reward(params: &QueueParams, q: f64, load: f64, q_next: f64) -> f64 {
    if q < 0.0 && load == 0.0 {
        params.throughput(-q_next) - params.throughput(-q)
    } else {
        params.throughput((-q_next).max(0.0))
    }
}

/// Deterministic transition from pre-flip actions, request sizes and draws.
pub fn transition(
    params: &QueueParams,
    state: &QueueState,
    actions: [u8; 2],
    x: [f64; 2],
    draws: &Draws,
) -> Transition {
    let targets = if draws.flip {
        [1 - actions[0], 1 - actions[1]]
    } else {
        actions
    };
    let mut loads = [0.0; 2];
    for (&t, &xi) in targets.iter().zip(&x) {
        loads[usize::from(t)] += xi;
    }
    let mut next = [0.0; 2];
    let mut rewards = [0.0; 2];
    for s in 0..2 {
        next[s] = next_queue(state.q[s], loads[s], draws.dt);
        rewards[s] = server_reward(params, state.q[s], loads[s], next[s]);
    }
    let mut wait =
        state.q[usize::from(targets[0])].max(0.0) + state.q[usize::from(targets[1])].max(0.0);
    if targets[0] == targets[1] {
        wait += if draws.first_is_one { x[0] } else { x[1] };
    }
    Transition {
        next: QueueState { q: next },
        rewards,
        loads,
        wait,
        targets,
    }
}

/// Request sizes for one step.
pub fn draw_requests<R: Rng + ?Sized>(params: &QueueParams, rng: &mut R) -> [f64; 2] {
    let exp = Exp::new(params.mu_rate).expect("validated rate");
    [exp.sample(rng), exp.sample(rng)]
}

pub fn draw_exogenous<R: Rng + ?Sized>(params: &QueueParams, rng: &mut R) -> Draws {
    let flip = rng.random::<bool>();
    let dt = Exp::new(params.lambda_rate)
        .expect("validated rate")
        .sample(rng);
    let first_is_one = rng.random::<bool>();
    Draws {
        flip,
        dt,
        first_is_one,
    }
}

/// Idle state and the first pair of requests.
pub fn reset<R: Rng + ?Sized>(params: &QueueParams, rng: &mut R) -> (QueueState, [f64; 2]) {
    (QueueState::idle(), draw_requests(params, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub transition: Transition,
    pub draws: Draws,
    /// Request sizes of the next step.
    pub obs: [f64; 2],
}

/// Samples the step's draws, applies [`transition`] and draws the next
/// requests.
pub fn step<R: Rng + ?Sized>(
    state: &QueueState,
    actions: [u8; 2],
    x: [f64; 2],
    params: &QueueParams,
    rng: &mut R,
) -> StepOutcome {
    let draws = draw_exogenous(params, rng);
    let transition = transition(params, state, actions, x, &draws);
    let obs = draw_requests(params, rng);
    StepOutcome {
        transition,
        draws,
        obs,
    }
}

/// One routing decision from the two local observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub actions: [u8; 2],
    pub advice: [usize; 2],
    /// `log π(a|x)` summed over the sampling path (coordinator plus actors).
    pub log_prob: f64,
    pub coordinator_log_prob: f64,
    pub actor_log_probs: [f64; 2],
}

/// A joint routing policy. Router `i` only ever sees `xᵢ`; the joint form
/// lets coordinators correlate the two decisions.
pub trait RoutingPolicy {
    fn decide(&self, x: [f64; 2], rng: &mut dyn RngCore) -> Result<Decision>;
}

/// Routes each request by a fixed rule, ignoring the other router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedRouting {
    pub rule: [fn(f64) -> u8; 2],
}

impl RoutingPolicy for FixedRouting {
    fn decide(&self, x: [f64; 2], _rng: &mut dyn RngCore) -> Result<Decision> {
        let actions = [(self.rule[0])(x[0]), (self.rule[1])(x[1])];
        Ok(Decision {
            actions,
            advice: [usize::from(actions[0]), usize::from(actions[1])],
            log_prob: 0.0,
            coordinator_log_prob: 0.0,
            actor_log_probs: [0.0; 2],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub state: QueueState,
    pub obs: [f64; 2],
    pub decision: Decision,
    pub draws: Draws,
    pub next: QueueState,
    /// Requests that arrive with `next`, before any reset.
    pub next_obs: [f64; 2],
    pub rewards: [f64; 2],
    pub wait: f64,
    /// The episode ends after this step and the next state is a reset.
    pub truncated: bool,
}

impl TrajectoryStep {
    pub fn reward(&self) -> f64 {
        self.rewards[0] + self.rewards[1]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueueTrajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl QueueTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `t,q1,q2,x1,x2,a1,a2,flip,dt,reward,wait`, one row per step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,q1,q2,x1,x2,a1,a2,flip,dt,reward,wait")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.state.q[0],
                s.state.q[1],
                s.obs[0],
                s.obs[1],
                s.decision.actions[0],
                s.decision.actions[1],
                u8::from(s.draws.flip),
                s.draws.dt,
                s.reward(),
                s.wait
            )?;
        }
        Ok(())
    }
}

/// A running environment instance with its own random stream.
#[derive(Debug, Clone)]
pub struct QueueEnv<R> {
    params: QueueParams,
    state: QueueState,
    obs: [f64; 2],
    t: usize,
    rng: R,
}

impl<R: Rng> QueueEnv<R> {
    pub fn new(params: QueueParams, mut rng: R) -> Result<Self> {
        params.validate()?;
        let (state, obs) = reset(&params, &mut rng);
        Ok(Self {
            params,
            state,
            obs,
            t: 0,
            rng,
        })
    }

    pub fn params(&self) -> &QueueParams {
        &self.params
    }

    pub fn state(&self) -> QueueState {
        self.state
    }

    pub fn obs(&self) -> [f64; 2] {
        self.obs
    }

    /// Applies `decision`, advancing time; resets after `horizon` steps.
    pub fn step(&mut self, decision: Decision) -> TrajectoryStep {
        let out = step(
            &self.state,
            decision.actions,
            self.obs,
            &self.params,
            &mut self.rng,
        );
        let record = TrajectoryStep {
            t: self.t,
            state: self.state,
            obs: self.obs,
            decision,
            draws: out.draws,
            next: out.transition.next,
            next_obs: out.obs,
            rewards: out.transition.rewards,
            wait: out.transition.wait,
            truncated: self.t + 1 == self.params.horizon,
        };
        if record.truncated {
            let (state, obs) = reset(&self.params, &mut self.rng);
            self.state = state;
            self.obs = obs;
            self.t = 0;
        } else {
            self.state = out.transition.next;
            self.obs = out.obs;
            self.t += 1;
        }
        record
    }
}

/// Runs `policy` for `steps` steps from a fresh reset. Environment draws and
/// policy sampling use separate streams derived from `rng`.
pub fn rollout<R: Rng>(
    policy: &dyn RoutingPolicy,
    params: &QueueParams,
    steps: usize,
    rng: &mut R,
) -> Result<QueueTrajectory> {
    let env_rng = qcoord::rng::seeded(rng.random());
    let mut policy_rng = qcoord::rng::seeded(rng.random());
    let mut env = QueueEnv::new(params.clone(), env_rng)?;
    let mut traj = QueueTrajectory {
        steps: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let decision = policy.decide(env.obs(), &mut policy_rng)?;
        traj.steps.push(env.step(decision));
    }
    Ok(traj)
}

/// Monte-Carlo estimates with standard errors across episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Baseline reward per unit time, `Σ r / Σ Δt`.
    pub throughput: f64,
    /// Mean wait per request, `Σ w / (2 · steps)`.
    pub wait_per_request: f64,
    /// Mean total wait per step, `Σ w / steps`.
    pub wait_per_step: f64,
    pub stderr_throughput: f64,
    pub stderr_wait: f64,
    pub episodes: usize,
    pub steps: usize,
}

impl Evaluation {
    /// Mean wait in the normalization of `params`, with its standard error.
    pub fn wait(&self, params: &QueueParams) -> (f64, f64) {
        match params.wait_normalization {
            WaitNormalization::PerRequest => (self.wait_per_request, self.stderr_wait),
            WaitNormalization::PerStep => (self.wait_per_step, 2.0 * self.stderr_wait),
        }
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates `policy` over `episodes` independent episodes of `steps` steps.
/// Point estimates pool all steps; standard errors come from the spread of
/// per-episode estimates.
pub fn evaluate<R: Rng>(
    policy: &dyn RoutingPolicy,
    params: &QueueParams,
    episodes: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    if episodes == 0 || steps == 0 {
        return Err(QueueError::Config(
            "evaluation needs at least one episode and one step".into(),
        ));
    }
    let episode_params = QueueParams {
        horizon: steps,
        ..params.clone()
    };
    let (mut reward, mut time, mut wait) = (0.0, 0.0, 0.0);
    let mut per_throughput = Vec::with_capacity(episodes);
    let mut per_wait = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let traj = rollout(policy, &episode_params, steps, rng)?;
        let r: f64 = traj.steps.iter().map(TrajectoryStep::reward).sum();
        let dt: f64 = traj.steps.iter().map(|s| s.draws.dt).sum();
        let w: f64 = traj.steps.iter().map(|s| s.wait).sum();
        reward += r;
        time += dt;
        wait += w;
        per_throughput.push(r / dt);
        per_wait.push(w / (2.0 * steps as f64));
    }
    let total_steps = (episodes * steps) as f64;
    Ok(Evaluation {
        throughput: reward / time,
        wait_per_request: wait / (2.0 * total_steps),
        wait_per_step: wait / total_steps,
        stderr_throughput: mean_and_stderr(&per_throughput).1,
        stderr_wait: mean_and_stderr(&per_wait).1,
        episodes,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use qcoord::rng::seeded;

    fn params() -> QueueParams {
        QueueParams::default()
    }

    fn draws(dt: f64) -> Draws {
        Draws {
            flip: false,
            dt,
            first_is_one: true,
        }
    }

    #[test]
    fn uninterrupted_baseline_telescopes() {
        let p = params();
        let s = QueueState { q: [-5.0, 1.0] };
        // Both requests to server 1; server 0 keeps idling.
        let t = transition(&p, &s, [1, 1], [0.5, 0.5], &draws(2.0));
        assert_eq!(t.next.q[0], -7.0);
        assert_eq!(t.rewards[0], 24.0);
    }

    #[test]
    fn arrival_interrupts_baseline() {
        let p = params();
        let s = QueueState { q: [-5.0, 0.0] };
        let t = transition(&p, &s, [0, 1], [3.0, 0.0], &draws(1.0));
        assert_eq!(t.next.q[0], 2.0);
        assert_eq!(t.rewards[0], 0.0);
    }

    #[test]
    fn short_request_restarts_baseline() {
        let p = params();
        let s = QueueState { q: [-5.0, 0.0] };
        let t = transition(&p, &s, [0, 1], [1.0, 0.0], &draws(3.0));
        assert_eq!(t.next.q[0], -2.0);
        assert_eq!(t.rewards[0], 4.0);
    }

    #[test]
    fn lone_request_waits_for_the_queue() {
        let p = params();
        let s = QueueState { q: [4.0, -1.0] };
        let t = transition(&p, &s, [0, 1], [2.0, 1.0], &draws(1.0));
        assert_eq!(t.wait, 4.0);
    }

    #[test]
    fn shared_server_adds_the_first_request() {
        let p = params();
        let s = QueueState { q: [-1.0, -1.0] };
        let mut d = draws(1.0);
        assert_eq!(transition(&p, &s, [1, 1], [2.0, 3.0], &d).wait, 2.0);
        d.first_is_one = false;
        assert_eq!(transition(&p, &s, [1, 1], [2.0, 3.0], &d).wait, 3.0);
        // Split requests to idle servers do not wait.
        assert_eq!(transition(&p, &s, [0, 1], [2.0, 3.0], &d).wait, 0.0);
    }

    #[test]
    fn flip_mirrors_targets() {
        let p = params();
        let s = QueueState { q: [2.0, -3.0] };
        let mut d = draws(0.5);
        let a = transition(&p, &s, [0, 0], [1.0, 2.0], &d);
        d.flip = true;
        let b = transition(&p, &s, [0, 0], [1.0, 2.0], &d);
        assert_eq!(a.targets, [0, 0]);
        assert_eq!(b.targets, [1, 1]);
        assert_eq!(a.loads, [3.0, 0.0]);
        assert_eq!(b.loads, [0.0, 3.0]);
    }

    #[test]
    fn reset_is_idle_with_positive_requests() {
        let p = params();
        let mut rng = seeded(3);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n / 2 {
            let (s, x) = reset(&p, &mut rng);
            assert_eq!(s, QueueState::idle());
            assert!(x[0] > 0.0 && x[1] > 0.0);
            sum += x[0] + x[1];
        }
        let mean = sum / n as f64;
        // Exp(1) has unit standard deviation.
        assert!((mean - 1.0).abs() <= 3.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn zero_step_rollout_is_empty() {
        let policy = FixedRouting {
            rule: [|_| 0, |_| 1],
        };
        let traj = rollout(&policy, &params(), 0, &mut seeded(1)).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn episodes_reset_at_the_horizon() {
        let p = QueueParams {
            horizon: 5,
            ..params()
        };
        let policy = FixedRouting {
            rule: [|_| 0, |_| 0],
        };
        let traj = rollout(&policy, &p, 12, &mut seeded(2)).unwrap();
        let ts: Vec<usize> = traj.steps.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]);
        assert!(traj.steps[4].truncated && traj.steps[9].truncated);
        assert_eq!(traj.steps[5].state, QueueState::idle());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let policy = FixedRouting {
            rule: [|_| 0, |_| 1],
        };
        let a = evaluate(&policy, &params(), 3, 500, &mut seeded(5)).unwrap();
        let b = evaluate(&policy, &params(), 3, 500, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert!((a.wait_per_step - 2.0 * a.wait_per_request).abs() < 1e-12);
    }

    #[test]
    fn overloaded_servers_earn_nothing() {
        // Requests far larger than inter-arrival gaps keep both servers busy.
        let p = QueueParams {
            mu_rate: 1e-3,
            ..params()
        };
        let policy = FixedRouting {
            rule: [|_| 0, |_| 1],
        };
        let e = evaluate(&policy, &p, 2, 400, &mut seeded(6)).unwrap();
        assert!(e.throughput < 1e-3, "{}", e.throughput);
    }

    #[test]
    fn params_are_validated() {
        assert!(params().validate().is_ok());
        assert!(QueueParams {
            lambda_rate: 0.0,
            ..params()
        }
        .validate()
        .is_err());
        assert!(QueueParams {
            throughput_exponent: 1.0,
            ..params()
        }
        .validate()
        .is_err());
        assert!(QueueParams {
            wait_limit: -1.0,
            ..params()
        }
        .validate()
        .is_err());
    }
}
