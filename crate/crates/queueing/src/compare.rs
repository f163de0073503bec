//! Quantum versus shared-randomness coordination at one wait limit.
//!
//! Each coordinator kind is trained from several seeds against a tightened
//! limit `W − margin`, the best run is kept, and the winner of each kind is
//! evaluated once more on a long, fresh set of episodes. Verdicts use 95%
//! confidence intervals of that final evaluation.

use serde::{Deserialize, Serialize};

use crate::coordinator::RouterPolicy;
use crate::env::{evaluate, Evaluation, QueueParams};
use crate::error::{QueueError, Result};
use crate::mappo::{
    better, CoordinatorKind, EvalLog, MappoConfig, PidConfig, Trainer, TrainingReport, UpdateLog,
};
use qcoord::rng::stream;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub mappo: MappoConfig,
    pub params: QueueParams,
    /// Training seeds per coordinator kind.
    pub runs: usize,
    /// Training aims at `wait_limit − margin`; feasibility is judged at
    /// `wait_limit`.
    pub margin: f64,
    pub final_episodes: usize,
    pub final_steps: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            mappo: MappoConfig {
                updates: 150,
                eval_every: 10,
                pid: PidConfig {
                    kp: 1.0,
                    ki: 0.02,
                    kd: 1.0,
                    ..PidConfig::default()
                },
                ..MappoConfig::default()
            },
            params: QueueParams::default(),
            runs: 2,
            margin: 0.2,
            final_episodes: 32,
            final_steps: 40_000,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        self.mappo.validate()?;
        self.params.validate()?;
        if self.runs == 0 || self.final_episodes < 2 || self.final_steps == 0 {
            return Err(QueueError::Config(
                "need one run and a final evaluation of at least two episodes".into(),
            ));
        }
        if !(self.margin >= 0.0 && self.margin < self.params.wait_limit) {
            return Err(QueueError::Config(
                "margin must lie in [0, wait limit)".into(),
            ));
        }
        Ok(())
    }
}

/// A symmetric 95% interval around a point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(estimate: f64, stderr: f64) -> Self {
        Self {
            estimate,
            low: estimate - Z95 * stderr,
            high: estimate + Z95 * stderr,
        }
    }

    pub fn strictly_above(&self, other: &Interval) -> bool {
        self.low > other.high
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: CoordinatorKind,
    pub training_seed: u64,
    pub selection: Evaluation,
    pub evaluation: Evaluation,
    pub throughput: Interval,
    pub wait: Interval,
    pub feasible: bool,
    #[serde(skip)]
    pub policy: Option<RouterPolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub wait_limit: f64,
    pub quantum: KindResult,
    pub shared: KindResult,
    /// Quantum is significantly better on at least one axis and not
    /// significantly worse on the other, with both policies feasible.
    pub quantum_better: bool,
    pub reason: String,
}

/// Trains `config.runs` seeds of one coordinator kind and returns the best
/// report with the seed that produced it.
pub fn train_kind(
    config: &CompareConfig,
    kind: CoordinatorKind,
    mut on_update: impl FnMut(u64, &UpdateLog, Option<&EvalLog>),
) -> Result<(u64, TrainingReport)> {
    config.validate()?;
    let params = QueueParams {
        wait_limit: config.params.wait_limit - config.margin,
        ..config.params.clone()
    };
    let mut best: Option<(u64, TrainingReport)> = None;
    for run in 0..config.runs {
        let seed = config.mappo.seed.wrapping_add(run as u64);
        let cfg = MappoConfig {
            coordinator: kind,
            seed,
            ..config.mappo.clone()
        };
        let report = Trainer::new(cfg, params.clone())?.train(|u, e| on_update(seed, u, e))?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| better(&report.best_evaluation, &b.best_evaluation, &params))
        {
            best = Some((seed, report));
        }
    }
    Ok(best.expect("at least one run"))
}

/// Final evaluation of a trained policy on episodes no training run saw.
pub fn final_evaluation(
    config: &CompareConfig,
    kind: CoordinatorKind,
    policy: &RouterPolicy,
) -> Result<Evaluation> {
    let index = match kind {
        CoordinatorKind::Quantum => 0xf1_0000,
        CoordinatorKind::Shared => 0xf2_0000,
    };
    let mut rng = stream(config.mappo.seed, index);
    evaluate(
        policy,
        &config.params,
        config.final_episodes,
        config.final_steps,
        &mut rng,
    )
}

fn result(
    config: &CompareConfig,
    kind: CoordinatorKind,
    seed: u64,
    report: TrainingReport,
) -> Result<KindResult> {
    let evaluation = final_evaluation(config, kind, &report.best)?;
    let (wait, wait_se) = evaluation.wait(&config.params);
    Ok(KindResult {
        kind,
        training_seed: seed,
        selection: report.best_evaluation,
        evaluation,
        throughput: Interval::new(evaluation.throughput, evaluation.stderr_throughput),
        wait: Interval::new(wait, wait_se),
        feasible: wait <= config.params.wait_limit,
        policy: Some(report.best),
    })
}

/// Decision rule for two finished results.
pub fn judge(quantum: &KindResult, shared: &KindResult) -> (bool, String) {
    if !quantum.feasible || !shared.feasible {
        let who = match (quantum.feasible, shared.feasible) {
            (false, false) => "both policies violate",
            (false, true) => "quantum policy violates",
            _ => "shared-randomness policy violates",
        };
        return (false, format!("{who} the wait limit"));
    }
    let better_thr = quantum.throughput.strictly_above(&shared.throughput);
    let worse_thr = shared.throughput.strictly_above(&quantum.throughput);
    let better_wait = shared.wait.strictly_above(&quantum.wait);
    let worse_wait = quantum.wait.strictly_above(&shared.wait);
    if worse_thr || worse_wait {
        return (
            false,
            "quantum policy is significantly worse on throughput or wait".into(),
        );
    }
    if better_thr || better_wait {
        return (
            true,
            "quantum policy is significantly better and not worse on either axis".into(),
        );
    }
    (
        false,
        "confidence intervals overlap on both throughput and wait".into(),
    )
}

/// Trains and evaluates both coordinator kinds. `on_update` receives the
/// kind, the training seed and every log row.
pub fn compare(
    config: &CompareConfig,
    mut on_update: impl FnMut(CoordinatorKind, u64, &UpdateLog, Option<&EvalLog>),
) -> Result<Comparison> {
    config.validate()?;
    let mut results = Vec::with_capacity(2);
    for kind in [CoordinatorKind::Quantum, CoordinatorKind::Shared] {
        let (seed, report) = train_kind(config, kind, |s, u, e| on_update(kind, s, u, e))?;
        results.push(result(config, kind, seed, report)?);
    }
    let shared = results.pop().expect("two results");
    let quantum = results.pop().expect("two results");
    let (quantum_better, reason) = judge(&quantum, &shared);
    Ok(Comparison {
        wait_limit: config.params.wait_limit,
        quantum,
        shared,
        quantum_better,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(kind: CoordinatorKind, thr: f64, wait: f64, se: f64) -> KindResult {
        let evaluation = Evaluation {
            throughput: thr,
            wait_per_request: wait,
            wait_per_step: 2.0 * wait,
            stderr_throughput: se,
            stderr_wait: se,
            episodes: 2,
            steps: 10,
        };
        KindResult {
            kind,
            training_seed: 0,
            selection: evaluation,
            evaluation,
            throughput: Interval::new(thr, se),
            wait: Interval::new(wait, se),
            feasible: wait <= 5.5,
            policy: None,
        }
    }

    #[test]
    fn verdicts_follow_the_interval_rule() {
        let q = |thr, wait| fake(CoordinatorKind::Quantum, thr, wait, 0.01);
        let s = |thr, wait| fake(CoordinatorKind::Shared, thr, wait, 0.01);
        assert!(judge(&q(1.6, 5.4), &s(1.5, 5.4)).0);
        assert!(judge(&q(1.5, 5.0), &s(1.5, 5.4)).0);
        assert!(!judge(&q(1.5, 5.4), &s(1.5, 5.4)).0);
        assert!(!judge(&q(1.6, 5.45), &s(1.5, 5.0)).0);
        assert!(!judge(&q(1.6, 5.6), &s(1.5, 5.0)).0);
        assert!(!judge(&q(1.6, 5.0), &s(1.5, 5.6)).0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = CompareConfig::default();
        c.margin = 6.0;
        assert!(c.validate().is_err());
        let mut c = CompareConfig::default();
        c.final_episodes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tiny_comparison_runs_and_is_reproducible() {
        let config = CompareConfig {
            mappo: MappoConfig {
                updates: 2,
                envs: 2,
                rollout_len: 32,
                minibatch: 32,
                eval_every: 1,
                eval_episodes: 2,
                eval_steps: 200,
                hidden: vec![4],
                critic_hidden: vec![4],
                ..CompareConfig::default().mappo
            },
            final_episodes: 2,
            final_steps: 500,
            runs: 1,
            ..CompareConfig::default()
        };
        let a = compare(&config, |_, _, _, _| {}).unwrap();
        let b = compare(&config, |_, _, _, _| {}).unwrap();
        assert_eq!(a.quantum.evaluation, b.quantum.evaluation);
        assert_eq!(a.shared.evaluation, b.shared.evaluation);
        assert_eq!(a.quantum_better, judge(&a.quantum, &a.shared).0);
    }
}
