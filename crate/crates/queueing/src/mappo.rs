//! Constrained MAPPO: clipped surrogates for the coordinator and each actor
//! sharing one advantage, centralized reward and cost critics, and a PID
//! Lagrange multiplier on the wait constraint.

use qcoord::optim::Adam;
use qcoord::policies::LOG_FLOOR;
use qcoord::rng::{seeded, stream, RunRng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::coordinator::{features, Actors, PolicyGrads, RouterPolicy};
use crate::env::{
    evaluate, Evaluation, QueueEnv, QueueParams, QueueState, RoutingPolicy, TrajectoryStep,
};
use crate::error::{QueueError, Result};
use crate::nn::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinatorKind {
    Quantum,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// The integral is kept in `[0, integral_bound]`.
    pub integral_bound: f64,
    pub initial: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.05,
            ki: 0.0005,
            kd: 0.1,
            integral_bound: 1e4,
            initial: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappoConfig {
    pub coordinator: CoordinatorKind,
    /// Values of the shared-randomness coordinator.
    pub shared_values: usize,
    /// Learned actors behind the quantum coordinator.
    pub quantum_learned_actors: bool,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub updates: usize,
    pub envs: usize,
    /// Steps per environment per update.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr_net: f64,
    pub lr_scale: f64,
    pub lr_critic: f64,
    pub entropy_coef: f64,
    pub conditioning_coef: f64,
    pub max_grad_norm: f64,
    pub pid: PidConfig,
    /// Evaluate every this many updates (and after the last).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_steps: usize,
    pub seed: u64,
}

impl Default for MappoConfig {
    fn default() -> Self {
        Self {
            coordinator: CoordinatorKind::Quantum,
            shared_values: 4,
            quantum_learned_actors: false,
            hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            updates: 200,
            envs: 8,
            rollout_len: 256,
            epochs: 4,
            minibatch: 256,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr_net: 3e-4,
            lr_scale: 1e-3,
            lr_critic: 3e-4,
            entropy_coef: 0.001,
            conditioning_coef: 1e-3,
            max_grad_norm: 0.5,
            pid: PidConfig::default(),
            eval_every: 20,
            eval_episodes: 8,
            eval_steps: 20_000,
            seed: 0,
        }
    }
}

impl MappoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QueueError::Config(m.to_string()));
        if self.envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("envs, rollout_len, epochs and minibatch must be positive");
        }
        if self.hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if self.coordinator == CoordinatorKind::Shared && self.shared_values == 0 {
            return bad("shared_values must be positive");
        }
        if !(self.clip > 0.0 && self.clip < 1.0)
            || !(0.0..1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.gae_lambda)
        {
            return bad("clip must lie in (0, 1), gamma in [0, 1) and gae_lambda in [0, 1]");
        }
        if [self.lr_net, self.lr_scale, self.lr_critic]
            .iter()
            .any(|&v| !(v > 0.0))
        {
            return bad("learning rates must be positive");
        }
        if !(self.max_grad_norm > 0.0) || self.entropy_coef < 0.0 || self.conditioning_coef < 0.0 {
            return bad("max_grad_norm must be positive and coefficients non-negative");
        }
        let pid = &self.pid;
        if [pid.kp, pid.ki, pid.kd, pid.integral_bound, pid.initial]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return bad("PID gains, bound and initial multiplier must be non-negative");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.eval_steps == 0 {
            return bad("evaluation settings must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.envs * self.rollout_len
    }

    /// A freshly initialized policy of the configured kind.
    pub fn initial_policy(&self) -> Result<RouterPolicy> {
        let mut rng = stream(self.seed, 0);
        match self.coordinator {
            CoordinatorKind::Quantum => {
                RouterPolicy::quantum(&self.hidden, self.quantum_learned_actors, &mut rng)
            }
            CoordinatorKind::Shared => {
                RouterPolicy::shared(self.shared_values, &self.hidden, &mut rng)
            }
        }
    }
}

/// PID-controlled Lagrange multiplier for `cost ≤ limit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub config: PidConfig,
    pub integral: f64,
    pub previous_cost: Option<f64>,
    pub multiplier: f64,
}

impl LagrangeState {
    pub fn new(config: PidConfig) -> Self {
        Self {
            config,
            integral: config.initial / config.ki.max(f64::MIN_POSITIVE),
            previous_cost: None,
            multiplier: config.initial,
        }
        .clamped()
    }

    fn clamped(mut self) -> Self {
        self.integral = self.integral.clamp(0.0, self.config.integral_bound);
        self
    }

    /// Updates from the latest cost estimate and returns the multiplier.
    pub fn update(&mut self, cost: f64, limit: f64) -> f64 {
        let c = &self.config;
        let error = cost - limit;
        self.integral = (self.integral + error).clamp(0.0, c.integral_bound);
        let rise = self.previous_cost.map_or(0.0, |p| (cost - p).max(0.0));
        self.previous_cost = Some(cost);
        self.multiplier = (c.kp * error + c.ki * self.integral + c.kd * rise).max(0.0);
        self.multiplier
    }
}

/// Running mean and variance (parallel-merge form).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }
}

impl RunningStats {
    pub fn update(&mut self, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.var =
            (self.var * self.count + var * n + delta * delta * self.count * n / total) / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-8)
    }
}

/// Critic input for queue state `q` and requests `x`.
pub fn critic_features(q: &QueueState, x: [f64; 2]) -> Vec<f64> {
    let symlog = |v: f64| v.signum() * v.abs().ln_1p();
    let [f1, l1] = features(x[0]);
    let [f2, l2] = features(x[1]);
    vec![
        symlog(q.q[0]),
        symlog(q.q[1]),
        q.q[0] / 10.0,
        q.q[1] / 10.0,
        f1,
        f2,
        l1,
        l2,
    ]
}

const CRITIC_INPUTS: usize = 8;

/// A value network predicting normalized returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub net: Mlp,
    pub stats: RunningStats,
}

impl Critic {
    pub fn new(hidden: &[usize], rng: &mut RunRng) -> Result<Self> {
        let mut sizes = vec![CRITIC_INPUTS];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::random(&sizes, 1.0, rng)?,
            stats: RunningStats::default(),
        })
    }

    /// Value in return units.
    pub fn value(&self, q: &QueueState, x: [f64; 2]) -> Result<f64> {
        let out = self.net.forward(&critic_features(q, x))?[0];
        Ok(self.stats.mean + self.stats.std() * out)
    }
}

/// Generalized advantage estimates for one environment's consecutive steps.
/// `values[t]` is `V(sₜ)`, `next_values[t]` is `V(sₜ₊₁)` (before any reset)
/// and `cut[t]` marks a step after which the trace does not continue.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    cut: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        if cut[t] {
            acc = 0.0;
        }
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone)]
struct Sample {
    obs: [f64; 2],
    critic_input: Vec<f64>,
    advice: [usize; 2],
    actions: [u8; 2],
    old_coord: f64,
    old_actor: [f64; 2],
    adv_r: f64,
    adv_c: f64,
    target_r: f64,
    target_c: f64,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub env_steps: usize,
    pub multiplier: f64,
    pub batch_throughput: f64,
    pub batch_wait: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub conditioning: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub update: usize,
    pub env_steps: usize,
    pub evaluation: Evaluation,
    pub feasible: bool,
}

/// Policy selection: feasible beats infeasible, then higher throughput among
/// feasible policies and lower wait among infeasible ones.
pub fn better(candidate: &Evaluation, incumbent: &Evaluation, params: &QueueParams) -> bool {
    let feasible = |e: &Evaluation| e.wait(params).0 <= params.wait_limit;
    match (feasible(candidate), feasible(incumbent)) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => candidate.throughput > incumbent.throughput,
        (false, false) => candidate.wait(params).0 < incumbent.wait(params).0,
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub updates: Vec<UpdateLog>,
    pub evaluations: Vec<EvalLog>,
    pub best: RouterPolicy,
    pub best_evaluation: Evaluation,
    pub final_policy: RouterPolicy,
}

/// Training state; everything needed to resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: MappoConfig,
    pub params: QueueParams,
    pub policy: RouterPolicy,
    pub reward_critic: Critic,
    pub cost_critic: Critic,
    pub lagrange: LagrangeState,
    pub update: usize,
    envs: Vec<QueueEnv<RunRng>>,
    sample_rngs: Vec<RunRng>,
    shuffle_rng: RunRng,
    opt_net: Adam,
    opt_scale: Adam,
    opt_reward: Adam,
    opt_cost: Adam,
}

fn global_norm(parts: &[&[f64]]) -> f64 {
    parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn clip_grads(parts: &mut [&mut [f64]], max_norm: f64) {
    let norm = parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in parts.iter_mut() {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
    }
}

fn entropy_grad(p: &[f64]) -> (f64, Vec<f64>) {
    let h = -p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>();
    let g = p.iter().map(|&v| -(v.max(LOG_FLOOR).ln() + 1.0)).collect();
    (h, g)
}

/// Ratio `new/old` with the log-ratio clamped to `±20`, and `∂ratio/∂new`.
fn ratio(new: f64, old: f64) -> (f64, f64) {
    let log_ratio = new.max(LOG_FLOOR).ln() - old.max(LOG_FLOOR).ln();
    if log_ratio.abs() > 20.0 {
        (log_ratio.clamp(-20.0, 20.0).exp(), 0.0)
    } else {
        let r = log_ratio.exp();
        (r, r / new.max(LOG_FLOOR))
    }
}

/// Weight `∂S/∂ratio` of one clipped term. Rewards take the pessimistic
/// minimum, costs the pessimistic maximum.
fn clipped_weight(r: f64, adv: f64, eps: f64, maximize: bool) -> (f64, bool) {
    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
    let (u, c) = (r * adv, clipped * adv);
    let use_unclipped = if maximize { u <= c } else { u >= c };
    if use_unclipped || clipped == r {
        (adv, false)
    } else {
        (0.0, true)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-8);
    for x in v.iter_mut() {
        *x = (*x - mean) / std;
    }
}

impl Trainer {
    pub fn new(config: MappoConfig, params: QueueParams) -> Result<Self> {
        let policy = config.initial_policy()?;
        Self::with_policy(config, params, policy)
    }

    /// Starts from an existing policy, as in a warm-started sweep.
    pub fn with_policy(
        config: MappoConfig,
        params: QueueParams,
        policy: RouterPolicy,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        policy.validate()?;
        let mut init = stream(config.seed, 1);
        let reward_critic = Critic::new(&config.critic_hidden, &mut init)?;
        let cost_critic = Critic::new(&config.critic_hidden, &mut init)?;
        let envs = (0..config.envs)
            .map(|i| QueueEnv::new(params.clone(), stream(config.seed, 100 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let sample_rngs = (0..config.envs)
            .map(|i| stream(config.seed, 10_000 + i as u64))
            .collect();
        let opt_net = Adam::new(policy.net_params().len(), config.lr_net);
        let opt_scale = Adam::new(policy.scale_params().len(), config.lr_scale);
        let opt_reward = Adam::new(reward_critic.net.num_params(), config.lr_critic);
        let opt_cost = Adam::new(cost_critic.net.num_params(), config.lr_critic);
        Ok(Self {
            lagrange: LagrangeState::new(config.pid),
            shuffle_rng: stream(config.seed, 2),
            config,
            params,
            policy,
            reward_critic,
            cost_critic,
            update: 0,
            envs,
            sample_rngs,
            opt_net,
            opt_scale,
            opt_reward,
            opt_cost,
        })
    }

    pub fn env_steps(&self) -> usize {
        self.update * self.config.batch_size()
    }

    fn collect(&mut self) -> Result<Vec<Vec<TrajectoryStep>>> {
        let mut out = Vec::with_capacity(self.envs.len());
        for (env, rng) in self.envs.iter_mut().zip(&mut self.sample_rngs) {
            let mut steps = Vec::with_capacity(self.config.rollout_len);
            for _ in 0..self.config.rollout_len {
                let decision = self.policy.decide(env.obs(), rng)?;
                steps.push(env.step(decision));
            }
            out.push(steps);
        }
        Ok(out)
    }

    fn build_samples(&mut self, rollouts: &[Vec<TrajectoryStep>]) -> Result<Vec<Sample>> {
        let cfg = &self.config;
        let mut samples = Vec::with_capacity(cfg.batch_size());
        let mut returns_r = Vec::with_capacity(cfg.batch_size());
        let mut returns_c = Vec::with_capacity(cfg.batch_size());
        for steps in rollouts {
            let n = steps.len();
            let rewards: Vec<f64> = steps.iter().map(TrajectoryStep::reward).collect();
            let costs: Vec<f64> = steps
                .iter()
                .map(|s| self.params.normalized_wait(s.wait))
                .collect();
            let mut cut = vec![false; n];
            let mut v_r = Vec::with_capacity(n);
            let mut v_c = Vec::with_capacity(n);
            for s in steps {
                v_r.push(self.reward_critic.value(&s.state, s.obs)?);
                v_c.push(self.cost_critic.value(&s.state, s.obs)?);
            }
            let mut nv_r = vec![0.0; n];
            let mut nv_c = vec![0.0; n];
            for t in 0..n {
                if steps[t].truncated || t + 1 == n {
                    cut[t] = true;
                    nv_r[t] = self
                        .reward_critic
                        .value(&steps[t].next, steps[t].next_obs)?;
                    nv_c[t] = self.cost_critic.value(&steps[t].next, steps[t].next_obs)?;
                } else {
                    nv_r[t] = v_r[t + 1];
                    nv_c[t] = v_c[t + 1];
                }
            }
            let (adv_r, ret_r) = gae(&rewards, &v_r, &nv_r, &cut, cfg.gamma, cfg.gae_lambda);
            let (adv_c, ret_c) = gae(&costs, &v_c, &nv_c, &cut, cfg.gamma, cfg.gae_lambda);
            for (t, s) in steps.iter().enumerate() {
                let k = self.policy.advice_size();
                let q = self.policy.coordinator_probs(s.obs)?;
                let probs = self.policy.actor_probs(s.obs, s.decision.advice)?;
                let j = s.decision.advice[0] * k + s.decision.advice[1];
                samples.push(Sample {
                    obs: s.obs,
                    critic_input: critic_features(&s.state, s.obs),
                    advice: s.decision.advice,
                    actions: s.decision.actions,
                    old_coord: q[j],
                    old_actor: [
                        probs[0][usize::from(s.decision.actions[0])],
                        probs[1][usize::from(s.decision.actions[1])],
                    ],
                    adv_r: adv_r[t],
                    adv_c: adv_c[t],
                    target_r: 0.0,
                    target_c: 0.0,
                });
            }
            returns_r.extend(ret_r);
            returns_c.extend(ret_c);
        }
        self.reward_critic.stats.update(&returns_r);
        self.cost_critic.stats.update(&returns_c);
        let mut adv_r: Vec<f64> = samples.iter().map(|s| s.adv_r).collect();
        let mut adv_c: Vec<f64> = samples.iter().map(|s| s.adv_c).collect();
        normalize(&mut adv_r);
        normalize(&mut adv_c);
        let (sr, sc) = (self.reward_critic.stats, self.cost_critic.stats);
        for (i, s) in samples.iter_mut().enumerate() {
            s.adv_r = adv_r[i];
            s.adv_c = adv_c[i];
            s.target_r = (returns_r[i] - sr.mean) / sr.std();
            s.target_c = (returns_c[i] - sc.mean) / sc.std();
        }
        Ok(samples)
    }

    /// Policy gradient (of the loss) over one minibatch; returns the number
    /// of clipped terms, the summed approximate KL and the conditioning penalty.
    fn policy_grads(
        &self,
        batch: &[&Sample],
        multiplier: f64,
        grads: &mut PolicyGrads,
    ) -> Result<(usize, f64, f64)> {
        let cfg = &self.config;
        let k = self.policy.advice_size();
        let n = batch.len() as f64;
        let scale = 1.0 / n;
        let learned = matches!(self.policy.actors, Actors::Learned { .. });
        let mut clipped = 0;
        let mut kl = 0.0;
        let mut cond = 0.0;
        for s in batch {
            let tape = self.policy.forward(s.obs, s.advice)?;
            cond += tape.conditioning_penalty();
            let j = s.advice[0] * k + s.advice[1];
            let mut coord_cot = vec![0.0; tape.coordinator_probs.len()];
            let mut actor_cot = [vec![0.0; 2], vec![0.0; 2]];
            let mut term = |new: f64, old: f64| -> f64 {
                let (r, dr) = ratio(new, old);
                kl += (r - 1.0) - r.max(LOG_FLOOR).ln();
                let (wr, cr) = clipped_weight(r, s.adv_r, cfg.clip, true);
                let (wc, cc) = clipped_weight(r, s.adv_c, cfg.clip, false);
                clipped += usize::from(cr) + usize::from(cc);
                // Loss is −S_r + λ·S_c.
                -(wr - multiplier * wc) * scale * dr
            };
            coord_cot[j] += term(tape.coordinator_probs[j], s.old_coord);
            if learned {
                for i in 0..2 {
                    let a = usize::from(s.actions[i]);
                    actor_cot[i][a] += term(tape.actor_probs[i][a], s.old_actor[i]);
                }
            }
            if cfg.entropy_coef > 0.0 {
                let (_, g) = entropy_grad(&tape.coordinator_probs);
                for (c, gi) in coord_cot.iter_mut().zip(g) {
                    *c -= cfg.entropy_coef * gi / n;
                }
                if learned {
                    for i in 0..2 {
                        let (_, g) = entropy_grad(&tape.actor_probs[i]);
                        for (c, gi) in actor_cot[i].iter_mut().zip(g) {
                            *c -= cfg.entropy_coef * gi / n;
                        }
                    }
                }
            }
            self.policy.backward(
                &tape,
                &coord_cot,
                &actor_cot,
                cfg.conditioning_coef / n,
                grads,
            )?;
        }
        Ok((clipped, kl, cond))
    }

    fn critic_step(
        critic: &mut Critic,
        opt: &mut Adam,
        batch: &[&Sample],
        target: impl Fn(&Sample) -> f64,
        max_norm: f64,
    ) -> Result<()> {
        let mut grads = vec![0.0; critic.net.num_params()];
        let n = batch.len() as f64;
        for s in batch {
            let tape = critic.net.forward_tape(&s.critic_input)?;
            let err = tape.output()[0] - target(s);
            critic.net.backward(&tape, &[err / n], &mut grads);
        }
        clip_grads(&mut [&mut grads], max_norm);
        let mut flat = critic.net.to_flat();
        opt.step(&mut flat, &grads);
        critic.net.set_flat(&flat)
    }

    /// Collects one batch and runs the PPO epochs.
    pub fn step(&mut self) -> Result<UpdateLog> {
        let rollouts = self.collect()?;
        let steps: usize = rollouts.iter().map(Vec::len).sum();
        let all = || rollouts.iter().flatten();
        let batch_throughput =
            all().map(TrajectoryStep::reward).sum::<f64>() / all().map(|s| s.draws.dt).sum::<f64>();
        let batch_wait = all()
            .map(|s| self.params.normalized_wait(s.wait))
            .sum::<f64>()
            / steps as f64;
        let multiplier = self.lagrange.update(batch_wait, self.params.wait_limit);
        let samples = self.build_samples(&rollouts)?;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut clipped, mut kl, mut cond, mut terms) = (0usize, 0.0, 0.0, 0usize);
        let ratios = if matches!(self.policy.actors, Actors::Learned { .. }) {
            3
        } else {
            1
        };
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(self.config.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let mut grads = self.policy.zero_grads();
                let (c, k, p) = self.policy_grads(&batch, multiplier, &mut grads)?;
                clipped += c;
                kl += k;
                cond += p;
                terms += batch.len();
                let norm = global_norm(&[&grads.nets, &grads.scales]);
                if !norm.is_finite() {
                    return Err(self.diverged("non-finite policy gradient"));
                }
                clip_grads(
                    &mut [&mut grads.nets, &mut grads.scales],
                    self.config.max_grad_norm,
                );
                let mut nets = self.policy.net_params();
                let mut scales = self.policy.scale_params();
                self.opt_net.step(&mut nets, &grads.nets);
                self.opt_scale.step(&mut scales, &grads.scales);
                self.policy.set_params(&nets, &scales)?;

                let max_norm = self.config.max_grad_norm;
                Self::critic_step(
                    &mut self.reward_critic,
                    &mut self.opt_reward,
                    &batch,
                    |s| s.target_r,
                    max_norm,
                )?;
                Self::critic_step(
                    &mut self.cost_critic,
                    &mut self.opt_cost,
                    &batch,
                    |s| s.target_c,
                    max_norm,
                )?;
            }
        }
        if !self.policy.is_finite()
            || !self.reward_critic.net.is_finite()
            || !self.cost_critic.net.is_finite()
        {
            return Err(self.diverged("non-finite parameters"));
        }
        self.update += 1;
        Ok(UpdateLog {
            update: self.update,
            env_steps: self.env_steps(),
            multiplier,
            batch_throughput,
            batch_wait,
            approx_kl: kl / (terms * ratios).max(1) as f64,
            clip_fraction: clipped as f64 / (2 * terms * ratios).max(1) as f64,
            conditioning: cond / terms.max(1) as f64,
        })
    }

    fn diverged(&self, reason: &str) -> QueueError {
        QueueError::Divergence {
            update: self.update,
            reason: reason.to_string(),
        }
    }

    /// Evaluates the current policy with a seed fixed by the update index,
    /// so evaluations at different updates are comparable.
    pub fn evaluate_current(&self) -> Result<Evaluation> {
        let mut rng = seeded(self.config.seed ^ 0x5eed_0000_0000);
        evaluate(
            &self.policy,
            &self.params,
            self.config.eval_episodes,
            self.config.eval_steps,
            &mut rng,
        )
    }

    /// Runs the configured number of updates with periodic evaluation and
    /// keeps the best evaluated policy. `on_update` sees every log row.
    pub fn train(
        mut self,
        mut on_update: impl FnMut(&UpdateLog, Option<&EvalLog>),
    ) -> Result<TrainingReport> {
        let mut updates = Vec::with_capacity(self.config.updates);
        let mut evaluations = Vec::new();
        let mut best: Option<(RouterPolicy, Evaluation)> = None;
        for u in 0..self.config.updates {
            let log = self.step()?;
            let eval = if (u + 1) % self.config.eval_every == 0 || u + 1 == self.config.updates {
                let evaluation = self.evaluate_current()?;
                let entry = EvalLog {
                    update: log.update,
                    env_steps: log.env_steps,
                    evaluation,
                    feasible: evaluation.wait(&self.params).0 <= self.params.wait_limit,
                };
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| better(&evaluation, b, &self.params))
                {
                    best = Some((self.policy.clone(), evaluation));
                }
                evaluations.push(entry);
                Some(entry)
            } else {
                None
            };
            on_update(&log, eval.as_ref());
            updates.push(log);
        }
        let (best, best_evaluation) = match best {
            Some(b) => b,
            None => {
                let e = self.evaluate_current()?;
                (self.policy.clone(), e)
            }
        };
        Ok(TrainingReport {
            updates,
            evaluations,
            best,
            best_evaluation,
            final_policy: self.policy,
        })
    }
}

/// One point of a wait-limit sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub wait_limit: f64,
    pub report: TrainingReport,
}

/// Trains at each limit in order, starting every run after the first from
/// the previous limit's best policy. The first limit is trained from
/// `initial_runs` seeds and the best run is kept.
pub fn sweep(
    config: &MappoConfig,
    params: &QueueParams,
    limits: &[f64],
    initial_runs: usize,
    mut on_update: impl FnMut(f64, &UpdateLog, Option<&EvalLog>),
) -> Result<Vec<SweepPoint>> {
    if limits.is_empty() || initial_runs == 0 {
        return Err(QueueError::Config(
            "a sweep needs at least one limit and one initial run".into(),
        ));
    }
    let mut out: Vec<SweepPoint> = Vec::with_capacity(limits.len());
    for (i, &limit) in limits.iter().enumerate() {
        let p = QueueParams {
            wait_limit: limit,
            ..params.clone()
        };
        let report = if i == 0 {
            let mut best: Option<TrainingReport> = None;
            for run in 0..initial_runs {
                let cfg = MappoConfig {
                    seed: config.seed.wrapping_add(run as u64),
                    ..config.clone()
                };
                let r = Trainer::new(cfg, p.clone())?.train(|u, e| on_update(limit, u, e))?;
                if best
                    .as_ref()
                    .is_none_or(|b| better(&r.best_evaluation, &b.best_evaluation, &p))
                {
                    best = Some(r);
                }
            }
            best.expect("at least one run")
        } else {
            let start = out[i - 1].report.best.clone();
            let cfg = MappoConfig {
                seed: config.seed.wrapping_add(1000 * i as u64),
                ..config.clone()
            };
            Trainer::with_policy(cfg, p.clone(), start)?.train(|u, e| on_update(limit, u, e))?
        };
        out.push(SweepPoint {
            wait_limit: limit,
            report,
        });
    }
    Ok(out)
}
