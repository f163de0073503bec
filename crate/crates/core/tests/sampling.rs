//! Monte-Carlo checks of samplers against exact distributions.

use qcoord::games::{chsh_quantum_policy, exact_win_probability, make_chsh, make_ghz, Referee};
use qcoord::policies::{CoordinatorAdvicePolicy, EntangledPolicy, JointPolicy, TabulatedPolicy};
use qcoord::reinforce::{train, GameTrainConfig};
use qcoord::rng::seeded;

#[test]
fn referee_win_rate_matches_the_analytic_chsh_value() {
    let game = make_chsh();
    let policy = TabulatedPolicy::from_policy(&chsh_quantum_policy::<f64>()).unwrap();
    let referee = Referee::new(&game);
    let n = 1_000_000;
    let wins = referee
        .play_batch(&policy, n, &mut seeded(7))
        .unwrap()
        .iter()
        .filter(|r| r.verdict == 1)
        .count();
    let p = (std::f64::consts::PI / 8.0).cos().powi(2);
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let rate = wins as f64 / n as f64;
    assert!(
        (rate - p).abs() <= 3.0 * sigma,
        "rate {rate}, expected {p} ± {}",
        3.0 * sigma
    );
}

fn assert_frequencies_match(policy: &dyn JointPolicy<f64>, h: &[usize], n: usize, seed: u64) {
    let exact = policy.joint_distribution(h).unwrap();
    let mut counts = vec![0usize; exact.len()];
    let mut rng = seeded(seed);
    let space = policy.space();
    for _ in 0..n {
        let s = policy.sample_action(h, &mut rng).unwrap();
        counts[space.action_index(&s.actions)] += 1;
    }
    for (c, p) in counts.iter().zip(&exact) {
        let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-6);
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() <= 4.0 * sigma, "frequency {f} vs {p}");
    }
}

#[test]
fn entangled_sampler_matches_born_probabilities() {
    let game = make_ghz();
    let policy = EntangledPolicy::<f64>::random(game.space().clone(), 2, &mut seeded(11)).unwrap();
    assert_frequencies_match(&policy, &[1, 0, 1], 100_000, 12);
}

#[test]
fn two_stage_sampler_matches_its_marginal() {
    let space = make_chsh().space().clone();
    let mut rng = seeded(13);
    let entangled =
        CoordinatorAdvicePolicy::<f64>::random_entangled(space.clone(), &[3, 3], 2, &mut rng)
            .unwrap();
    assert_frequencies_match(&entangled, &[0, 1], 100_000, 14);
    let shared = CoordinatorAdvicePolicy::<f64>::random_shared(space, 3, &mut rng).unwrap();
    assert_frequencies_match(&shared, &[1, 1], 100_000, 15);
}

#[test]
fn sampled_log_probabilities_match_the_table() {
    let space = make_chsh().space().clone();
    let policy =
        CoordinatorAdvicePolicy::<f64>::random_entangled(space, &[2, 2], 2, &mut seeded(16))
            .unwrap();
    let joint = policy.joint_distribution(&[1, 0]).unwrap();
    let q = policy.coordinator_distribution(&[1, 0]).unwrap();
    let mut rng = seeded(17);
    for _ in 0..200 {
        let s = policy.sample_action(&[1, 0], &mut rng).unwrap();
        let a = policy.space().action_index(&s.actions);
        assert!((s.log_prob - joint[a].ln()).abs() <= 1e-12);
        let x = s.advice.as_ref().unwrap();
        let coord = s.coordinator_log_prob.unwrap();
        assert!((coord - q[x[0] * 2 + x[1]].ln()).abs() <= 1e-12);
        // The advice path is one of several ways to reach the same action.
        let path: f64 = coord + s.actor_log_probs.iter().sum::<f64>();
        assert!(path <= s.log_prob + 1e-12);
    }
}

#[test]
fn short_chsh_training_beats_the_classical_value() {
    let game = make_chsh();
    let cfg = GameTrainConfig {
        steps: 1500,
        seed: 3,
        ..GameTrainConfig::default()
    };
    let out = train(&game, &cfg).unwrap();
    assert!(out.best_win > 0.8, "best {}", out.best_win);
    let realized = out.best.realize().unwrap();
    let w = exact_win_probability(&game, &realized.policy).unwrap();
    assert!((w - out.best_win).abs() <= 1e-12);
}

#[test]
fn training_is_reproducible() {
    let game = make_chsh();
    let cfg = GameTrainConfig {
        steps: 50,
        seed: 9,
        ..GameTrainConfig::default()
    };
    let a = train(&game, &cfg).unwrap();
    let b = train(&game, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.best.to_flat(), b.best.to_flat());
}
