use std::io::Write;
use std::path::Path;

use qcoord::bell_lp::{game_certificate, membership, verify_certificate, PolicyTable, Verdict};
use qcoord::games::{
    classical_optimum, exact_win_probability, make_rendezvous, quantum_bound, GraphSpec,
    NonlocalGame,
};
use qcoord::policies::{write_distribution_csv, JointPolicy};
use qcoord::reinforce::{
    quantum_advantage_pct, train, EntropySchedule, GameTrainConfig, TrainOutcome,
};
use serde_json::json;

use crate::args::{
    BellCheckArgs, EvalArgs, GameSelect, GameTrainFlags, OracleArgs, Table1Args, TrainGameArgs,
};
use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};
use crate::output::{create_dir, write_text, Csv};
use crate::svg::{line_chart, Series};

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io("<stdout>", e))
}

pub(crate) fn load_game(name: &str, graph: Option<&Path>) -> Result<NonlocalGame> {
    match graph {
        None => Ok(NonlocalGame::by_name(name)?),
        Some(path) => {
            if !name.starts_with("rendezvous") {
                return Err(CliError::Config(
                    "--graph only applies to rendezvous games".into(),
                ));
            }
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Ok(make_rendezvous(name, &GraphSpec::parse_edge_list(&text)?))
        }
    }
}

fn select(s: &GameSelect) -> Result<NonlocalGame> {
    load_game(&s.game, s.graph.as_deref())
}

fn game_config(name: &str, f: &GameTrainFlags) -> Result<GameTrainConfig> {
    let mut cfg = GameTrainConfig::for_game(name);
    if let Some(v) = f.entropy_coef {
        cfg.entropy_coef = v;
    }
    if f.constant_entropy {
        cfg.entropy_schedule = EntropySchedule::Constant;
    }
    if let Some(v) = f.entropy_decay {
        if f.constant_entropy {
            return Err(CliError::Config(
                "--entropy-decay conflicts with --constant-entropy".into(),
            ));
        }
        cfg.entropy_schedule = EntropySchedule::LinearDecay { until_fraction: v };
    }
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.local_dim {
        cfg.local_dim = v;
    }
    if let Some(v) = f.init_scale {
        cfg.init_scale = v;
    }
    if let Some(v) = f.conditioning_coef {
        cfg.conditioning_coef = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_records(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut csv = Csv::create(
        path,
        &[
            "step",
            "win_prob",
            "empirical_win",
            "entropy",
            "loss",
            "cond_penalty",
        ],
    )?;
    for r in &outcome.records {
        csv.row(&[
            &r.step,
            &r.win_prob,
            &r.empirical_win,
            &r.entropy,
            &r.loss,
            &r.cond_penalty,
        ])?;
    }
    csv.finish()
}

fn advantage(game: &NonlocalGame, win: f64, classical: f64) -> Result<Option<f64>> {
    quantum_bound(game.name())
        .map(|b| quantum_advantage_pct(win, classical, b))
        .transpose()
        .map_err(Into::into)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn train_game(a: &TrainGameArgs, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let game = select(&a.select)?;
    let base = game_config(&a.select.game, &a.train)?;
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let classical = classical_optimum(&game)?.value;
    create_dir(dir)?;
    let mut summary = Csv::create(
        &dir.join("summary.csv"),
        &[
            "seed",
            "best_win",
            "best_step",
            "classical_value",
            "advantage_pct",
        ],
    )?;
    for seed in a.first_seed..a.first_seed + a.seeds {
        let cfg = GameTrainConfig {
            seed,
            ..base.clone()
        };
        let outcome = train(&game, &cfg)?;
        write_records(&dir.join(format!("seed_{seed}.csv")), &outcome)?;
        let snapshot = json!({ "game": game.name(), "train": cfg });
        Checkpoint::from_entangled_params(&outcome.best, snapshot, seed, outcome.best_step as u64)
            .save(&dir.join(format!("seed_{seed}.json")))?;
        if a.plot {
            let points = |f: fn(&qcoord::reinforce::StepRecord) -> f64| {
                outcome
                    .records
                    .iter()
                    .map(|r| (r.step as f64, f(r)))
                    .collect()
            };
            let svg = line_chart(
                &format!("{} seed {seed}", game.name()),
                "step",
                "win probability",
                &[
                    Series {
                        label: "exact",
                        points: points(|r| r.win_prob),
                    },
                    Series {
                        label: "empirical",
                        points: points(|r| r.empirical_win),
                    },
                    Series {
                        label: "classical optimum",
                        points: vec![(0.0, classical), (cfg.steps as f64, classical)],
                    },
                ],
            );
            write_text(&dir.join(format!("seed_{seed}.svg")), &svg)?;
        }
        let adv = advantage(&game, outcome.best_win, classical)?;
        summary.row(&[
            &seed,
            &outcome.best_win,
            &outcome.best_step,
            &classical,
            &fmt_opt(adv),
        ])?;
        say(
            out,
            format!(
                "seed {seed}: best win {:.6} at step {} (classical {classical})",
                outcome.best_win, outcome.best_step
            ),
        )?;
    }
    summary.finish()
}

pub fn oracle(a: &OracleArgs, out: &mut dyn Write) -> Result<()> {
    let game = select(&a.select)?;
    let opt = classical_optimum(&game)?;
    say(out, opt.value.to_string())?;
    if a.strategy {
        for (i, answers) in opt.profile.iter().enumerate() {
            let list: Vec<String> = answers.iter().map(usize::to_string).collect();
            say(out, format!("player {i}: {}", list.join(" ")))?;
        }
    }
    Ok(())
}

pub fn bell_check(a: &BellCheckArgs, out: &mut dyn Write) -> Result<()> {
    let game = select(&a.select)?;
    let policy = Checkpoint::load(&a.policy)?.to_entangled_policy()?;
    if policy.space() != game.space() {
        return Err(CliError::Config(format!(
            "policy does not fit game `{}`",
            game.name()
        )));
    }
    let table = PolicyTable::from_policy(&policy)?;
    let (cert, method) = match membership(&table, game.space()) {
        Ok(c) => (c, "polytope"),
        Err(qcoord::Error::BudgetExceeded { .. }) => {
            (game_certificate(&game, &table)?, "game-inequality")
        }
        Err(e) => return Err(e.into()),
    };
    let verified = verify_certificate(&cert, &table, game.space());
    let verdict = match (cert.verdict, method) {
        (Verdict::Outside, _) => "outside",
        (Verdict::Inside, "polytope") => "inside",
        _ => "inconclusive",
    };
    let report = json!({
        "game": game.name(),
        "verdict": verdict,
        "method": method,
        "verified": verified,
        "violation": cert.violation,
        "hyperplane": cert.hyperplane,
        "weights": cert.weights,
        "residual": cert.residual.is_finite().then_some(cert.residual),
        "boundary": cert.boundary,
    });
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    say(out, text)
}

pub fn eval_game(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let name = a.game.as_deref().expect("dispatched with a game");
    let game = load_game(name, a.graph.as_deref())?;
    let policy = Checkpoint::load(&a.policy)?.to_entangled_policy()?;
    if policy.space() != game.space() {
        return Err(CliError::Config(format!(
            "policy does not fit game `{}`",
            game.name()
        )));
    }
    let win = exact_win_probability(&game, &policy)?;
    let classical = classical_optimum(&game)?.value;
    let report = json!({
        "game": game.name(),
        "win_probability": win,
        "classical_value": classical,
        "advantage_pct": advantage(&game, win, classical)?,
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("distribution.csv");
        let mut buf = Vec::new();
        write_distribution_csv(&policy, &mut buf).map_err(|e| CliError::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    }
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    say(out, text)
}

pub fn reproduce_table1(a: &Table1Args, dir: &Path, out: &mut dyn Write) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let games = a
        .games
        .iter()
        .map(|g| NonlocalGame::by_name(g).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    create_dir(dir)?;
    let mut runs = Csv::create(
        &dir.join("runs.csv"),
        &[
            "game",
            "alpha",
            "seed",
            "best_win",
            "classical_value",
            "advantage_pct",
        ],
    )?;
    let mut table = Csv::create(
        &dir.join("table1.csv"),
        &[
            "game",
            "alpha",
            "seeds",
            "worst_advantage_pct",
            "best_advantage_pct",
            "worst_win",
            "best_win",
        ],
    )?;
    let mut lines = vec![format!(
        "{:<18} {:>6} {:>12} {:>12}",
        "game", "alpha", "worst adv %", "best win"
    )];
    for alpha in [0.0, 0.2] {
        for game in &games {
            let classical = classical_optimum(game)?.value;
            let bound = quantum_bound(game.name()).ok_or_else(|| {
                CliError::Config(format!("no quantum bound for `{}`", game.name()))
            })?;
            let mut base = GameTrainConfig::for_game(game.name());
            base.entropy_coef = alpha;
            if let Some(s) = a.steps {
                base.steps = s;
            }
            let (mut worst_adv, mut best_adv) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut worst_win, mut best_win) = (f64::INFINITY, f64::NEG_INFINITY);
            for seed in 0..a.seeds {
                let cfg = GameTrainConfig {
                    seed,
                    ..base.clone()
                };
                let outcome = train(game, &cfg)?;
                let adv = quantum_advantage_pct(outcome.best_win, classical, bound)?;
                runs.row(&[
                    &game.name(),
                    &alpha,
                    &seed,
                    &outcome.best_win,
                    &classical,
                    &adv,
                ])?;
                worst_adv = worst_adv.min(adv);
                best_adv = best_adv.max(adv);
                worst_win = worst_win.min(outcome.best_win);
                best_win = best_win.max(outcome.best_win);
            }
            table.row(&[
                &game.name(),
                &alpha,
                &a.seeds,
                &worst_adv,
                &best_adv,
                &worst_win,
                &best_win,
            ])?;
            lines.push(format!(
                "{:<18} {:>6} {:>12.2} {:>12.6}",
                game.name(),
                alpha,
                worst_adv,
                best_win
            ));
        }
    }
    runs.finish()?;
    table.finish()?;
    say(out, lines.join("\n"))
}
