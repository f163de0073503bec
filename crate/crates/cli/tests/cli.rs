use std::path::Path;
use std::process::Command;

use qcoord::games::{exact_win_probability, make_chsh};
use qcoord_cli::checkpoint::Checkpoint;
use qcoord_cli::run;

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qcoord").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn oracle_prints_classical_values() {
    assert_eq!(
        run_cli(&["oracle", "--game", "chsh"]),
        (0, "0.75\n".into(), String::new())
    );
    assert_eq!(
        run_cli(&["oracle", "--game", "rendezvous-cube"]).1,
        "0.3125\n"
    );
    let (code, out, _) = run_cli(&["oracle", "--game", "ghz", "--strategy"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("0.75\nplayer 0: "));
}

#[test]
fn custom_rendezvous_graph_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("k4.txt");
    std::fs::write(&graph, "0 1\n0 2\n0 3\n1 2\n1 3\n2 3\n").unwrap();
    let (code, out, _) = run_cli(&[
        "oracle",
        "--game",
        "rendezvous-k4",
        "--graph",
        graph.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(out, "0.625\n");
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let (code, _, err) = run_cli(&["oracle", "--game", "chsh", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(run_cli(&["frobnicate"]).0, 2);
    assert_eq!(run_cli(&["oracle", "--game", "nonesuch"]).0, 2);
    assert_eq!(
        run_cli(&[
            "train-game",
            "--game",
            "chsh",
            "--lr=-1",
            "--out",
            "/nonexistent"
        ])
        .0,
        2
    );
    assert_eq!(
        run_cli(&[
            "train-queueing",
            "--sweep",
            "9:5:0.5",
            "--out",
            "/nonexistent"
        ])
        .0,
        2
    );
    assert_eq!(
        run_cli(&[
            "bell-check",
            "--policy",
            "/nonexistent/p.json",
            "--game",
            "chsh"
        ])
        .0,
        4
    );
    assert_eq!(run_cli(&["oracle", "--config", "/nonexistent/c.json"]).0, 4);
    assert_eq!(run_cli(&["--help"]).0, 0);
}

#[test]
fn train_game_is_reproducible_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, _, err) = run_cli(&[
            "train-game",
            "--game",
            "chsh",
            "--seeds",
            "2",
            "--steps",
            "60",
            "--batch",
            "64",
            "--plot",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let files = read_dir_sorted(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "seed_0.csv",
            "seed_0.json",
            "seed_0.svg",
            "seed_1.csv",
            "seed_1.json",
            "seed_1.svg",
            "summary.csv"
        ]
    );
    assert_eq!(files, read_dir_sorted(&b));
    let csv = std::fs::read_to_string(a.join("seed_0.csv")).unwrap();
    assert!(csv.starts_with("step,win_prob,empirical_win,entropy,loss,cond_penalty\n"));
    assert_eq!(csv.lines().count(), 61);

    let text = std::fs::read_to_string(a.join("seed_1.json")).unwrap();
    let ckpt = Checkpoint::from_json(&text).unwrap();
    assert_eq!(ckpt.to_json().unwrap() + "\n", text);
    let policy = ckpt.to_entangled_policy().unwrap();
    let win = exact_win_probability(&make_chsh(), &policy).unwrap();
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap().to_bits(), win.to_bits());

    let p = a.join("seed_1.json");
    let (code, out, _) = run_cli(&["eval", "--policy", p.to_str().unwrap(), "--game", "chsh"]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(
        report["win_probability"].as_f64().unwrap().to_bits(),
        win.to_bits()
    );

    let (code, out, _) = run_cli(&[
        "bell-check",
        "--policy",
        p.to_str().unwrap(),
        "--game",
        "chsh",
    ]);
    assert_eq!(code, 0);
    let cert: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(cert["verified"], true);
    let expected = if win > 0.75 + 1e-6 {
        "outside"
    } else {
        "inside"
    };
    assert_eq!(cert["verdict"], expected, "win {win}");
}

#[test]
fn bell_check_certifies_the_analytic_chsh_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chsh.json");
    let policy = qcoord::games::chsh_quantum_policy::<f64>();
    Checkpoint::from_entangled_policy(&policy, serde_json::json!({"game": "chsh"}))
        .save(&path)
        .unwrap();
    let (code, out, _) = run_cli(&[
        "bell-check",
        "--policy",
        path.to_str().unwrap(),
        "--game",
        "chsh",
    ]);
    assert_eq!(code, 0);
    let cert: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(cert["verdict"], "outside");
    assert_eq!(cert["method"], "polytope");
    assert_eq!(cert["verified"], true);
    assert!(cert["violation"].as_f64().unwrap() > 0.0);
    assert_eq!(
        cert["hyperplane"]["coefficients"].as_array().unwrap().len(),
        16
    );
    assert_eq!(
        run_cli(&[
            "bell-check",
            "--policy",
            path.to_str().unwrap(),
            "--game",
            "ghz"
        ])
        .0,
        2
    );

    let out_dir = dir.path().join("dist");
    let (code, _, _) = run_cli(&[
        "eval",
        "--policy",
        path.to_str().unwrap(),
        "--game",
        "chsh",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let dist = std::fs::read_to_string(out_dir.join("distribution.csv")).unwrap();
    assert_eq!(dist.lines().count(), 17);
}

const TINY_QUEUE: [&str; 16] = [
    "--updates",
    "2",
    "--envs",
    "2",
    "--rollout-len",
    "32",
    "--minibatch",
    "32",
    "--eval-every",
    "1",
    "--eval-episodes",
    "2",
    "--eval-steps",
    "100",
    "--hidden",
    "4",
];

#[test]
fn train_queueing_sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec![
            "train-queueing",
            "--coordinator",
            "classical",
            "--sweep",
            "5.5:6.0:0.5",
            "--final-episodes",
            "2",
            "--final-steps",
            "200",
            "--critic-hidden",
            "4",
            "--plot",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend(TINY_QUEUE);
        let (code, _, err) = run_cli(&args);
        assert_eq!(code, 0, "{err}");
    }
    let files = read_dir_sorted(&a);
    assert_eq!(files, read_dir_sorted(&b));
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "evals.csv",
            "evaluation.csv",
            "frontier.svg",
            "policy_w5_50.json",
            "policy_w6_00.json",
            "training.csv",
            "training.svg"
        ]
    );
    let eval = std::fs::read_to_string(a.join("evaluation.csv")).unwrap();
    let mut lines = eval.lines();
    assert_eq!(
        lines.next().unwrap(),
        "wait_limit,throughput,mean_wait,stderr_throughput,stderr_wait"
    );
    assert!(lines.next().unwrap().starts_with("5.5,"));
    assert!(lines.next().unwrap().starts_with("6,"));

    let p = a.join("policy_w5_50.json");
    let ckpt = Checkpoint::load(&p).unwrap();
    assert_eq!(ckpt.config["coordinator"], "shared");
    ckpt.to_router().unwrap();
    let traj = dir.path().join("traj");
    let (code, out, _) = run_cli(&[
        "eval",
        "--policy",
        p.to_str().unwrap(),
        "--episodes",
        "2",
        "--steps",
        "300",
        "--dump-steps",
        "50",
        "--out",
        traj.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["throughput"].as_f64().unwrap() > 0.0);
    let dump = std::fs::read_to_string(traj.join("trajectory.csv")).unwrap();
    assert!(dump.starts_with("t,q1,q2,x1,x2,a1,a2,flip,dt,reward,wait\n"));
    assert_eq!(dump.lines().count(), 51);
}

#[test]
fn compare_coordinators_writes_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let mut args = vec![
        "compare-coordinators",
        "--runs",
        "1",
        "--final-episodes",
        "2",
        "--final-steps",
        "300",
        "--critic-hidden",
        "4",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY_QUEUE);
    let (code, stdout, err) = run_cli(&args);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("quantum better at W=5.5"));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("quantum,"));
    assert!(csv.lines().nth(2).unwrap().starts_with("classical,"));
    for f in [
        "comparison.json",
        "quantum.json",
        "classical.json",
        "training.csv",
        "evals.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let q = Checkpoint::load(&out.join("quantum.json")).unwrap();
    assert_eq!(q.config["coordinator"], "quantum");
    q.to_router().unwrap();
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let out = dir.path().join("from-config");
    std::fs::write(
        &config,
        serde_json::json!({
            "command": "train-game", "game": "ghz", "steps": 5, "batch": 16, "seeds": 1,
            "out": out.to_str().unwrap()
        })
        .to_string(),
    )
    .unwrap();
    let (code, _, err) = run_cli(&["--config", config.to_str().unwrap(), "--steps", "7"]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("seed_0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    let ckpt = Checkpoint::load(&out.join("seed_0.json")).unwrap();
    assert_eq!(ckpt.config["game"], "ghz");

    std::fs::write(&config, r#"{"game": "chsh", "unknown-key": 1}"#).unwrap();
    assert_eq!(
        run_cli(&["oracle", "--config", config.to_str().unwrap()]).0,
        2
    );
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_qcoord"))
        .args([
            "train-game",
            "--game",
            "chsh",
            "--steps",
            "3",
            "--batch",
            "8",
        ])
        .env("QCOORD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert!(dir.path().join("train-game").join("summary.csv").exists());

    let status = Command::new(env!("CARGO_BIN_EXE_qcoord"))
        .args(["oracle", "--game", "chsh", "--nope"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}
