//! Consistency checks of the environment against independent models.

use rand::Rng;

use crate::env::{rollout, transition, QueueParams, QueueTrajectory, RoutingPolicy};
use crate::error::{QueueError, Result};

/// Per-server baseline throughput of a single-episode trajectory, computed
/// from absolute event times: a server is busy until its work runs out and
/// earns `T(len)` for every idle stretch, the last one cut at the end.
pub fn interval_oracle(params: &QueueParams, traj: &QueueTrajectory) -> [f64; 2] {
    let mut now = 0.0;
    let mut busy_until = [0.0f64; 2];
    let mut total = [0.0; 2];
    for s in &traj.steps {
        let mut load = [0.0; 2];
        for i in 0..2 {
            let target = s.decision.actions[i] ^ u8::from(s.draws.flip);
            load[usize::from(target)] += s.obs[i];
        }
        for k in 0..2 {
            if load[k] > 0.0 {
                if busy_until[k] <= now {
                    total[k] += params.throughput(now - busy_until[k]);
                    busy_until[k] = now;
                }
                busy_until[k] += load[k];
            }
        }
        now += s.draws.dt;
    }
    for k in 0..2 {
        if busy_until[k] < now {
            total[k] += params.throughput(now - busy_until[k]);
        }
    }
    total
}

/// Largest relative gap between per-step rewards summed per server and
/// [`interval_oracle`].
pub fn telescoping_error(params: &QueueParams, traj: &QueueTrajectory) -> Result<f64> {
    if traj
        .steps
        .iter()
        .any(|s| s.truncated && s.t + 1 != traj.len())
    {
        return Err(QueueError::Config(
            "telescoping needs a single episode".into(),
        ));
    }
    let oracle = interval_oracle(params, traj);
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let summed: f64 = traj.steps.iter().map(|s| s.rewards[k]).sum();
        worst = worst.max((summed - oracle[k]).abs() / oracle[k].abs().max(1.0));
    }
    Ok(worst)
}

/// Largest deviation when every recorded step is recomputed from its state,
/// actions, requests and recorded draws.
pub fn replay_error(params: &QueueParams, traj: &QueueTrajectory) -> f64 {
    let mut worst: f64 = 0.0;
    for s in &traj.steps {
        let t = transition(params, &s.state, s.decision.actions, s.obs, &s.draws);
        let diffs = [
            t.next.q[0] - s.next.q[0],
            t.next.q[1] - s.next.q[1],
            t.rewards[0] - s.rewards[0],
            t.rewards[1] - s.rewards[1],
            t.wait - s.wait,
        ];
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    worst
}

/// Batch-means z-scores of server 1 minus server 2 for reward per step,
/// mean queue state and the share of requests received. The random flip
/// makes the servers exchangeable, so each should be a standard normal.
pub fn swap_symmetry_z<R: Rng>(
    policy: &dyn RoutingPolicy,
    params: &QueueParams,
    steps: usize,
    batches: usize,
    rng: &mut R,
) -> Result<[f64; 3]> {
    if batches < 2 || steps < batches {
        return Err(QueueError::Config(
            "need at least two non-empty batches".into(),
        ));
    }
    let p = QueueParams {
        horizon: steps,
        ..params.clone()
    };
    let traj = rollout(policy, &p, steps, rng)?;
    let per = steps / batches;
    let mut diffs = [
        Vec::with_capacity(batches),
        Vec::with_capacity(batches),
        Vec::with_capacity(batches),
    ];
    for chunk in traj.steps.chunks(per).take(batches) {
        let n = chunk.len() as f64;
        let mut d = [0.0; 3];
        for s in chunk {
            d[0] += s.rewards[0] - s.rewards[1];
            d[1] += s.state.q[0] - s.state.q[1];
            for i in 0..2 {
                let target = s.decision.actions[i] ^ u8::from(s.draws.flip);
                d[2] += if target == 0 { 1.0 } else { -1.0 };
            }
        }
        for j in 0..3 {
            diffs[j].push(d[j] / n);
        }
    }
    Ok(diffs.map(|d| {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var == 0.0 {
            0.0
        } else {
            mean / (var / n).sqrt()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FixedRouting;
    use qcoord::rng::seeded;

    #[test]
    fn shared_server_trajectory_telescopes() {
        let params = QueueParams::default();
        let policy = FixedRouting {
            rule: [|_| 0, |_| 0],
        };
        let p = QueueParams {
            horizon: 50,
            ..params
        };
        let traj = rollout(&policy, &p, 50, &mut seeded(1)).unwrap();
        assert!(telescoping_error(&p, &traj).unwrap() < 1e-12);
        assert_eq!(replay_error(&p, &traj), 0.0);
    }
}
