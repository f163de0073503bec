//! Reverse-mode rules against central finite differences.

use num_complex::Complex;
use qcoord::games::{make_chsh, make_ghz};
use qcoord::policies::{EntangledParams, FiniteHistorySpace, JointPolicy};
use qcoord::quantum::{
    born_joint, born_joint_vjp, density_from_factor, density_from_factor_vjp, quantum_softmax,
    DensityFactor, PovmLogits,
};
use qcoord::reinforce::{exact_gradient, exact_objective};
use qcoord::rng::seeded;
use qcoord::CMat;
use rand::Rng;

const H: f64 = 1e-5;

fn random_cmat(d: usize, rng: &mut impl Rng) -> CMat<f64> {
    CMat::from_fn(d, |_, _| {
        Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    // Exactly-zero gradients leave only finite-difference rounding noise.
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-6);
    diff / scale
}

fn fd_grad(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let x = t[k];
            t[k] = x + H;
            let plus = f(&t);
            t[k] = x - H;
            let minus = f(&t);
            t[k] = x;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

/// `Re tr(Σ_j C_j P_j)` where `P = QuantumSoftmax(Z)`.
fn softmax_loss(theta: &[f64], d: usize, m: usize, c: &[CMat<f64>], cond: f64) -> f64 {
    let logits = PovmLogits::from_flat(d, m, theta).unwrap();
    let out = quantum_softmax(&logits).unwrap();
    let v: f64 = out
        .povm
        .elements()
        .iter()
        .zip(c)
        .map(|(p, cj)| cj.matmul(p).trace().re)
        .sum();
    v + cond * out.conditioning_penalty()
}

#[test]
fn quantum_softmax_vjp_matches_finite_differences() {
    let mut rng = seeded(100);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let d = 1 + case % 4;
        let m = 2 + (case / 4) % 3;
        let logits = PovmLogits::<f64>::random(d, m, 1.0, &mut rng);
        let c: Vec<CMat<f64>> = (0..m).map(|_| random_cmat(d, &mut rng)).collect();
        let cond = if case % 2 == 0 { 0.0 } else { 0.3 };
        // dL = Re tr(C dP) = Re tr((Cᴴ)ᴴ dP)
        let cot: Vec<CMat<f64>> = c.iter().map(CMat::adjoint).collect();
        let grad: Vec<f64> = quantum_softmax(&logits)
            .unwrap()
            .vjp(&cot, cond)
            .unwrap()
            .iter()
            .flat_map(CMat::to_interleaved)
            .collect();
        let fd = fd_grad(&logits.to_flat(), |t| softmax_loss(t, d, m, &c, cond));
        worst = worst.max(rel_err(&grad, &fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn scalar_case_matches_softmax_jacobian() {
    let mut rng = seeded(101);
    for _ in 0..20 {
        let m = 4;
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = PovmLogits::new(
            z.iter()
                .map(|&x| CMat::from_rows(vec![vec![Complex::new(x, 0.0)]]).unwrap())
                .collect(),
        )
        .unwrap();
        let g: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<CMat<f64>> = g.iter().map(|&x| CMat::from_diag(&[x])).collect();
        let grad = quantum_softmax(&logits).unwrap().vjp(&cot, 0.0).unwrap();
        let s: f64 = z.iter().map(|x| x.exp()).sum();
        let p: Vec<f64> = z.iter().map(|x| x.exp() / s).collect();
        let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        for k in 0..m {
            let want = p[k] * (g[k] - mean);
            assert!((grad[k][(0, 0)].re - want).abs() < 1e-12);
            // Imaginary parts of scalar logits do not affect the output.
            assert!(grad[k][(0, 0)].im.abs() < 1e-15);
        }
    }
}

#[test]
fn density_from_factor_vjp_matches_finite_differences() {
    let mut rng = seeded(102);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let d = 1 + case % 6;
        let f = DensityFactor::<f64>::random(d, 1.0, &mut rng);
        let c = random_cmat(d, &mut rng);
        let loss = |t: &[f64]| {
            let f = DensityFactor::new(CMat::from_interleaved(d, t).unwrap()).unwrap();
            c.matmul(density_from_factor(&f).unwrap().matrix())
                .trace()
                .re
        };
        let grad = density_from_factor_vjp(&f, &c.adjoint()).to_interleaved();
        let fd = fd_grad(&f.factor().to_interleaved(), loss);
        worst = worst.max(rel_err(&grad, &fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn born_vjp_matches_finite_differences() {
    let mut rng = seeded(103);
    for _ in 0..30 {
        let (da, db, ma, mb) = (2, 3, 3, 2);
        let f = DensityFactor::<f64>::random(da * db, 1.0, &mut rng);
        let za = PovmLogits::<f64>::random(da, ma, 1.0, &mut rng);
        let zb = PovmLogits::<f64>::random(db, mb, 1.0, &mut rng);
        let w: Vec<f64> = (0..ma * mb).map(|_| rng.random_range(-1.0..1.0)).collect();
        let na = f.factor().to_interleaved().len();
        let nza = za.num_params();
        let mut theta = f.factor().to_interleaved();
        theta.extend(za.to_flat());
        theta.extend(zb.to_flat());
        let loss = |t: &[f64]| {
            let f = DensityFactor::new(CMat::from_interleaved(da * db, &t[..na]).unwrap()).unwrap();
            let rho = density_from_factor(&f).unwrap();
            let a = quantum_softmax(&PovmLogits::from_flat(da, ma, &t[na..na + nza]).unwrap())
                .unwrap()
                .povm;
            let b = quantum_softmax(&PovmLogits::from_flat(db, mb, &t[na + nza..]).unwrap())
                .unwrap()
                .povm;
            born_joint(&rho, &[&a, &b])
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(p, x)| p * x)
                .sum::<f64>()
        };
        let rho = density_from_factor(&f).unwrap();
        let fa = quantum_softmax(&za).unwrap();
        let fb = quantum_softmax(&zb).unwrap();
        let g = born_joint_vjp(&rho, &[&fa.povm, &fb.povm], &w).unwrap();
        let mut grad = density_from_factor_vjp(&f, &g.rho).to_interleaved();
        grad.extend(
            fa.vjp(&g.povms[0], 0.0)
                .unwrap()
                .iter()
                .flat_map(CMat::to_interleaved),
        );
        grad.extend(
            fb.vjp(&g.povms[1], 0.0)
                .unwrap()
                .iter()
                .flat_map(CMat::to_interleaved),
        );
        let fd = fd_grad(&theta, loss);
        let e = rel_err(&grad, &fd);
        assert!(e <= 1e-4, "relative error {e}");
    }
}

fn objective(
    game: &qcoord::games::NonlocalGame,
    params: &EntangledParams<f64>,
    t: &[f64],
    alpha: f64,
) -> f64 {
    let mut p = params.clone();
    p.set_flat(t).unwrap();
    let (j, h) = exact_objective(game, &p.realize().unwrap().policy).unwrap();
    j + alpha * h
}

#[test]
fn exact_policy_gradient_matches_finite_differences() {
    for (game, alpha, seed) in [
        (make_chsh(), 0.0, 1),
        (make_chsh(), 0.2, 2),
        (make_ghz(), 0.2, 3),
    ] {
        let mut rng = seeded(seed);
        let params = EntangledParams::random(game.space().clone(), 2, 0.7, &mut rng);
        let grad = exact_gradient(&game, &params, alpha).unwrap();
        let fd = fd_grad(&params.to_flat(), |t| objective(&game, &params, t, alpha));
        let e = rel_err(&grad, &fd);
        assert!(e <= 1e-4, "{}: relative error {e}", game.name());
    }
}

#[test]
fn realized_policy_rows_are_distributions() {
    let mut rng = seeded(104);
    let space = FiniteHistorySpace::new(vec![3, 2], vec![2, 3]).unwrap();
    let params = EntangledParams::random(space, 2, 1.0, &mut rng);
    let policy = params.realize().unwrap().policy;
    for row in policy.distribution_table().unwrap() {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
