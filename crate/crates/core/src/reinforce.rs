//! REINFORCE with entropy regularization for nonlocal games.
//!
//! The trainer only sees questions, its own answers and the referee's
//! verdicts. Exact win probabilities are computed alongside for logging and
//! for choosing the best step, never for the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::{exact_win_probability, NonlocalGame, Referee, Round};
use crate::optim::Adam;
use crate::policies::{
    EntangledParams, FiniteHistorySpace, JointPolicy, RealizedPolicy, TabulatedPolicy, LOG_FLOOR,
};
use crate::quantum::DEFAULT_CONDITIONING_COEF;
use crate::rng::seeded;

/// How the entropy coefficient evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntropySchedule {
    Constant,
    /// Decreases linearly from the configured value to zero at
    /// `until_fraction` of the steps, then stays at zero.
    LinearDecay {
        until_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub entropy_schedule: EntropySchedule,
    pub steps: usize,
    pub seed: u64,
    pub conditioning_coef: f64,
    /// Hilbert-space dimension per player.
    pub local_dim: usize,
    /// Standard deviation of the initial logits and state factor entries.
    pub init_scale: f64,
}

impl Default for GameTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 3e-2,
            entropy_coef: 0.2,
            entropy_schedule: EntropySchedule::Constant,
            steps: 5000,
            seed: 0,
            conditioning_coef: DEFAULT_CONDITIONING_COEF,
            local_dim: 2,
            init_scale: 0.1,
        }
    }
}

impl GameTrainConfig {
    /// Defaults tuned per game. Rendezvous games use a qutrit per player,
    /// anneal the entropy bonus and take larger, longer steps: most answers
    /// start out illegal and a constant bonus keeps the policy too mixed to
    /// beat the classical value.
    pub fn for_game(name: &str) -> Self {
        let base = Self::default();
        if name.starts_with("rendezvous") {
            Self {
                local_dim: 3,
                init_scale: 1.0,
                learning_rate: 0.1,
                steps: 8000,
                entropy_schedule: EntropySchedule::LinearDecay {
                    until_fraction: 0.7,
                },
                ..base
            }
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy coefficient must be non-negative");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.conditioning_coef >= 0.0) {
            return bad("conditioning coefficient must be non-negative");
        }
        if self.local_dim == 0 {
            return bad("local dimension must be positive");
        }
        if !(self.init_scale > 0.0) {
            return bad("init scale must be positive");
        }
        if let EntropySchedule::LinearDecay { until_fraction } = self.entropy_schedule {
            if !(until_fraction > 0.0 && until_fraction <= 1.0) {
                return bad("entropy decay fraction must lie in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn entropy_coef_at(&self, step: usize) -> f64 {
        match self.entropy_schedule {
            EntropySchedule::Constant => self.entropy_coef,
            EntropySchedule::LinearDecay { until_fraction } => {
                let end = until_fraction * self.steps as f64;
                self.entropy_coef * (1.0 - step as f64 / end).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Exact win probability of the policy used for this step's batch.
    pub win_prob: f64,
    pub empirical_win: f64,
    /// Exact conditional entropy `−E_o E_a log π(a|o)`.
    pub entropy: f64,
    /// Surrogate objective value (maximized).
    pub loss: f64,
    pub cond_penalty: f64,
}

/// Result of a surrogate evaluation: the value and its flat gradient.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Sums per-cell coefficients into a cotangent table on `π(a|h)`.
fn cell_cotangent(
    space: &FiniteHistorySpace,
    cells: impl Iterator<Item = (usize, usize, f64)>,
) -> Vec<Vec<f64>> {
    let na = space.num_joint_actions();
    let mut cot = vec![Vec::new(); space.num_joint_histories()];
    for (h, a, g) in cells {
        if cot[h].is_empty() {
            cot[h] = vec![0.0; na];
        }
        cot[h][a] += g;
    }
    cot
}

/// `Ĵ = (1/N) Σ sg(V − α(log π + 1)) log π − c · penalty` and its gradient.
pub fn surrogate_loss(
    batch: &[Round],
    params: &EntangledParams<f64>,
    realized: &RealizedPolicy<f64>,
    entropy_coef: f64,
    conditioning_coef: f64,
) -> Result<Surrogate> {
    let space = params.space();
    let table = realized.table()?;
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut cells = Vec::with_capacity(batch.len());
    for round in batch {
        let h = space.history_index(&round.questions);
        let a = space.action_index(&round.answers);
        let p = table[h][a].max(LOG_FLOOR);
        let logp = p.ln();
        let weight = f64::from(round.verdict) - entropy_coef * (logp + 1.0);
        value += weight * logp / n;
        // ∇ log π = ∇π / π
        cells.push((h, a, weight / (n * p)));
    }
    let penalty = realized.conditioning_penalty();
    value -= conditioning_coef * penalty;
    let cot = cell_cotangent(space, cells.into_iter());
    let grad = realized.vjp(params, &cot, -conditioning_coef)?;
    Ok(Surrogate { value, grad })
}

/// Exact `J(θ)` and conditional entropy `H(θ)`.
pub fn exact_objective(game: &NonlocalGame, policy: &dyn JointPolicy<f64>) -> Result<(f64, f64)> {
    let win = exact_win_probability(game, policy)?;
    let space = game.space();
    let mut entropy = 0.0;
    for (o, &mu) in game.mu_table().iter().enumerate() {
        if mu == 0.0 {
            continue;
        }
        for p in policy.joint_distribution(&space.history(o))? {
            if p > 0.0 {
                entropy -= mu * p * p.ln();
            }
        }
    }
    Ok((win, entropy))
}

/// Exact gradient of `J + αH` (no conditioning term), the expectation of
/// the surrogate gradient. Reads `μ` and `V` directly; used as an oracle.
pub fn exact_gradient(
    game: &NonlocalGame,
    params: &EntangledParams<f64>,
    entropy_coef: f64,
) -> Result<Vec<f64>> {
    let realized = params.realize()?;
    let space = game.space();
    let table = realized.table()?;
    let na = space.num_joint_actions();
    let mut cells = Vec::new();
    for (o, &mu) in game.mu_table().iter().enumerate() {
        if mu == 0.0 {
            continue;
        }
        for a in 0..na {
            let p = table[o][a].max(LOG_FLOOR);
            let v = f64::from(u8::from(game.wins_flat(o, a)));
            cells.push((o, a, mu * (v - entropy_coef * (p.ln() + 1.0))));
        }
    }
    realized.vjp(params, &cell_cotangent(space, cells.into_iter()), 0.0)
}

/// `max(0, win − classical) / (bound − classical)` as a percentage.
pub fn quantum_advantage_pct(win: f64, classical_opt: f64, quantum_bound: f64) -> Result<f64> {
    let span = quantum_bound - classical_opt;
    if !(span > 0.0) {
        return Err(Error::Config(format!(
            "quantum bound {quantum_bound} does not exceed classical value {classical_opt}"
        )));
    }
    Ok(100.0 * (win - classical_opt).max(0.0) / span)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the highest exact win probability seen.
    pub best: EntangledParams<f64>,
    pub best_win: f64,
    pub best_step: usize,
    pub records: Vec<StepRecord>,
}

/// Runs `cfg.steps` rounds of sample → surrogate → Adam ascent from a random
/// initialization.
pub fn train(game: &NonlocalGame, cfg: &GameTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let params = EntangledParams::random(
        game.space().clone(),
        cfg.local_dim,
        cfg.init_scale,
        &mut rng,
    );
    train_from(game, params, cfg, &mut rng)
}

pub fn train_from(
    game: &NonlocalGame,
    mut params: EntangledParams<f64>,
    cfg: &GameTrainConfig,
    rng: &mut crate::rng::RunRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.space() != game.space() {
        return Err(Error::Shape(
            "policy alphabets do not match the game".into(),
        ));
    }
    let referee = Referee::new(game);
    let mut adam = Adam::new(params.num_params(), cfg.learning_rate);
    let mut flat = params.to_flat();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());

    for step in 0..=cfg.steps {
        let realized = params.realize().map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;
        let table = TabulatedPolicy::new(game.space().clone(), realized.table()?.to_vec())?;
        let (win, entropy) = exact_objective(game, &table)?;
        if win > best.0 {
            best = (win, step, params.clone());
        }
        if step == cfg.steps {
            break;
        }
        let batch = referee.play_batch(&table, cfg.batch_size, rng)?;
        let alpha = cfg.entropy_coef_at(step);
        let s = surrogate_loss(&batch, &params, &realized, alpha, cfg.conditioning_coef)?;
        if !s.value.is_finite() || s.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite surrogate or gradient".into(),
            });
        }
        let wins = batch.iter().filter(|r| r.verdict == 1).count();
        records.push(StepRecord {
            step,
            win_prob: win,
            empirical_win: wins as f64 / batch.len() as f64,
            entropy,
            loss: s.value,
            cond_penalty: realized.conditioning_penalty(),
        });
        adam.step_ascent(&mut flat, &s.grad);
        params.set_flat(&flat).map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;
    }
    Ok(TrainOutcome {
        best: best.2,
        best_win: best.0,
        best_step: best.1,
        records,
    })
}
