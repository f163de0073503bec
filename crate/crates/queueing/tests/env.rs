use proptest::prelude::*;
use qcoord::rng::seeded;
use qcoord_queueing::checks::{replay_error, swap_symmetry_z, telescoping_error};
use qcoord_queueing::coordinator::RouterPolicy;
use qcoord_queueing::env::{
    evaluate, rollout, transition, Decision, Draws, FixedRouting, QueueEnv, QueueParams, QueueState,
};

fn threshold() -> FixedRouting {
    FixedRouting {
        rule: [|x| u8::from(x > 1.0), |x| u8::from(x < 0.7)],
    }
}

fn single_episode(steps: usize) -> QueueParams {
    QueueParams {
        horizon: steps,
        ..QueueParams::default()
    }
}

#[test]
fn rewards_telescope_over_long_runs() {
    let params = single_episode(100_000);
    let learned = RouterPolicy::quantum(&[8], true, &mut seeded(1)).unwrap();
    let traj = rollout(&threshold(), &params, 100_000, &mut seeded(2)).unwrap();
    assert!(telescoping_error(&params, &traj).unwrap() <= 1e-9);
    let traj = rollout(&learned, &params, 100_000, &mut seeded(3)).unwrap();
    assert!(telescoping_error(&params, &traj).unwrap() <= 1e-9);
}

#[test]
fn recorded_draws_replay_exactly() {
    let params = single_episode(20_000);
    let traj = rollout(&threshold(), &params, 20_000, &mut seeded(4)).unwrap();
    assert_eq!(replay_error(&params, &traj), 0.0);
}

#[test]
fn same_seed_reproduces_the_trajectory() {
    let params = QueueParams::default();
    let policy = RouterPolicy::shared(4, &[8], &mut seeded(5)).unwrap();
    let a = rollout(&policy, &params, 5000, &mut seeded(6)).unwrap();
    let b = rollout(&policy, &params, 5000, &mut seeded(6)).unwrap();
    assert_eq!(a, b);
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_csv(&mut csv_a).unwrap();
    b.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn servers_are_exchangeable_under_the_flip() {
    let params = QueueParams::default();
    for z in swap_symmetry_z(&threshold(), &params, 100_000, 100, &mut seeded(7)).unwrap() {
        assert!(z.abs() <= 3.0, "z = {z}");
    }
}

#[test]
fn trajectory_csv_has_the_documented_columns() {
    let traj = rollout(&threshold(), &QueueParams::default(), 3, &mut seeded(8)).unwrap();
    let mut out = Vec::new();
    traj.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("t,q1,q2,x1,x2,a1,a2,flip,dt,reward,wait")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn complementing_actions_is_invisible_under_the_flip() {
    let params = QueueParams::default();
    let mirrored = FixedRouting {
        rule: [|x| u8::from(x <= 1.0), |x| u8::from(x >= 0.7)],
    };
    let a = evaluate(&threshold(), &params, 20, 5000, &mut seeded(9)).unwrap();
    let b = evaluate(&mirrored, &params, 20, 5000, &mut seeded(10)).unwrap();
    let z = (a.throughput - b.throughput) / (a.stderr_throughput.hypot(b.stderr_throughput));
    assert!(z.abs() <= 3.0, "z = {z}");
    let z = (a.wait_per_request - b.wait_per_request) / (a.stderr_wait.hypot(b.stderr_wait));
    assert!(z.abs() <= 3.0, "z = {z}");
}

#[test]
fn env_matches_the_pure_transition() {
    let params = QueueParams::default();
    let mut env = QueueEnv::new(params.clone(), seeded(11)).unwrap();
    for t in 0..500 {
        let actions = [(t % 2) as u8, (t / 3 % 2) as u8];
        let decision = Decision {
            actions,
            advice: [usize::from(actions[0]), usize::from(actions[1])],
            log_prob: 0.0,
            coordinator_log_prob: 0.0,
            actor_log_probs: [0.0; 2],
        };
        let s = env.step(decision);
        let tr = transition(&params, &s.state, actions, s.obs, &s.draws);
        assert_eq!(tr.next, s.next);
        assert_eq!(tr.rewards, s.rewards);
        assert_eq!(tr.wait, s.wait);
    }
}

fn arb_state() -> impl Strategy<Value = QueueState> {
    [-5.0f64..5.0, -5.0f64..5.0].prop_map(|q| QueueState { q })
}

fn arb_draws() -> impl Strategy<Value = Draws> {
    (any::<bool>(), 1e-3f64..5.0, any::<bool>()).prop_map(|(flip, dt, first_is_one)| Draws {
        flip,
        dt,
        first_is_one,
    })
}

proptest! {
    #[test]
    fn rewards_and_waits_are_non_negative(
        state in arb_state(), a in [0u8..2, 0u8..2], x in [1e-3f64..5.0, 1e-3f64..5.0], d in arb_draws()
    ) {
        let t = transition(&QueueParams::default(), &state, a, x, &d);
        prop_assert!(t.rewards.iter().all(|&r| r >= 0.0));
        prop_assert!(t.wait >= 0.0);
        prop_assert!((t.loads[0] + t.loads[1] - x[0] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn flipping_mirrors_the_servers(
        state in arb_state(), a in [0u8..2, 0u8..2], x in [1e-3f64..5.0, 1e-3f64..5.0], d in arb_draws()
    ) {
        let params = QueueParams::default();
        let t = transition(&params, &state, a, x, &d);
        let mirrored = transition(&params, &state.swapped(), [1 - a[0], 1 - a[1]], x, &d);
        prop_assert_eq!(t.next.swapped(), mirrored.next);
        prop_assert_eq!([t.rewards[1], t.rewards[0]], mirrored.rewards);
        prop_assert_eq!(t.wait, mirrored.wait);
    }

    #[test]
    fn idle_servers_accumulate_baseline_time(q in -5.0f64..-1e-3, dt in 1e-3f64..5.0) {
        let params = QueueParams::default();
        let d = Draws { flip: false, dt, first_is_one: true };
        let t = transition(&params, &QueueState { q: [q, -1.0] }, [1, 1], [0.5, 0.5], &d);
        prop_assert!((t.next.q[0] - (q - dt)).abs() < 1e-12);
        prop_assert!((t.rewards[0] - ((q - dt).powi(2) - q * q)).abs() < 1e-9);
    }
}
