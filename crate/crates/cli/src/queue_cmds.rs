use std::io::Write;
use std::path::Path;

use qcoord::rng::stream;
use qcoord_queueing::compare::{compare, CompareConfig, Comparison, KindResult};
use qcoord_queueing::env::{evaluate, rollout, QueueParams, WaitNormalization};
use qcoord_queueing::mappo::{sweep, CoordinatorKind, EvalLog, MappoConfig, UpdateLog};
use serde_json::json;

use crate::args::{
    parse_sweep, CompareArgs, CoordinatorArg, EvalArgs, MappoFlags, QueueFlags, TrainQueueingArgs,
};
use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};
use crate::output::{create_dir, limit_tag, write_text, Csv};
use crate::svg::{line_chart, Series};

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io("<stdout>", e))
}

fn queue_params(f: &QueueFlags, wait_limit: Option<f64>) -> Result<QueueParams> {
    let mut p = QueueParams::default();
    if let Some(v) = f.lambda {
        p.lambda_rate = v;
    }
    if let Some(v) = f.mu {
        p.mu_rate = v;
    }
    if let Some(v) = f.throughput_exponent {
        p.throughput_exponent = v;
    }
    if let Some(v) = f.horizon {
        p.horizon = v;
    }
    if f.per_step_wait {
        p.wait_normalization = WaitNormalization::PerStep;
    }
    if let Some(w) = wait_limit {
        p.wait_limit = w;
    }
    p.validate()?;
    Ok(p)
}

fn apply_mappo(mut c: MappoConfig, f: &MappoFlags) -> MappoConfig {
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = f.$field.clone() { $target = v; })*
        };
    }
    set!(
        updates => c.updates,
        envs => c.envs,
        rollout_len => c.rollout_len,
        epochs => c.epochs,
        minibatch => c.minibatch,
        clip => c.clip,
        gamma => c.gamma,
        gae_lambda => c.gae_lambda,
        lr_net => c.lr_net,
        lr_scale => c.lr_scale,
        lr_critic => c.lr_critic,
        entropy_coef => c.entropy_coef,
        conditioning_coef => c.conditioning_coef,
        max_grad_norm => c.max_grad_norm,
        kp => c.pid.kp,
        ki => c.pid.ki,
        kd => c.pid.kd,
        integral_bound => c.pid.integral_bound,
        hidden => c.hidden,
        critic_hidden => c.critic_hidden,
        shared_values => c.shared_values,
        eval_every => c.eval_every,
        eval_episodes => c.eval_episodes,
        eval_steps => c.eval_steps,
        seed => c.seed,
    );
    if f.learned_actors {
        c.quantum_learned_actors = true;
    }
    c
}

fn kind(arg: CoordinatorArg) -> CoordinatorKind {
    match arg {
        CoordinatorArg::Quantum => CoordinatorKind::Quantum,
        CoordinatorArg::Classical => CoordinatorKind::Shared,
    }
}

fn kind_name(kind: CoordinatorKind) -> &'static str {
    match kind {
        CoordinatorKind::Quantum => "quantum",
        CoordinatorKind::Shared => "classical",
    }
}

const TRAINING_HEADER: [&str; 10] = [
    "run",
    "wait_limit",
    "update",
    "env_steps",
    "multiplier",
    "batch_throughput",
    "batch_wait",
    "approx_kl",
    "clip_fraction",
    "conditioning",
];

const EVALS_HEADER: [&str; 9] = [
    "run",
    "wait_limit",
    "update",
    "env_steps",
    "throughput",
    "mean_wait",
    "stderr_throughput",
    "stderr_wait",
    "feasible",
];

/// Streams training and evaluation rows; `run` tags the training run.
struct TrainingLog {
    training: Csv,
    evals: Csv,
    error: Option<CliError>,
    curves: Vec<(String, Vec<(f64, f64)>)>,
}

impl TrainingLog {
    fn create(dir: &Path) -> Result<Self> {
        Ok(Self {
            training: Csv::create(&dir.join("training.csv"), &TRAINING_HEADER)?,
            evals: Csv::create(&dir.join("evals.csv"), &EVALS_HEADER)?,
            error: None,
            curves: Vec::new(),
        })
    }

    fn record(
        &mut self,
        run: &str,
        limit: f64,
        params: &QueueParams,
        u: &UpdateLog,
        e: Option<&EvalLog>,
    ) {
        if self.error.is_some() {
            return;
        }
        let mut result = self.training.row(&[
            &run,
            &limit,
            &u.update,
            &u.env_steps,
            &u.multiplier,
            &u.batch_throughput,
            &u.batch_wait,
            &u.approx_kl,
            &u.clip_fraction,
            &u.conditioning,
        ]);
        if let (Ok(()), Some(e)) = (&result, e) {
            let (wait, wait_se) = e.evaluation.wait(params);
            result = self.evals.row(&[
                &run,
                &limit,
                &e.update,
                &e.env_steps,
                &e.evaluation.throughput,
                &wait,
                &e.evaluation.stderr_throughput,
                &wait_se,
                &e.feasible,
            ]);
            let label = format!("{run} W={limit}");
            match self.curves.last_mut() {
                Some((l, pts)) if *l == label => {
                    pts.push((e.env_steps as f64, e.evaluation.throughput))
                }
                _ => self
                    .curves
                    .push((label, vec![(e.env_steps as f64, e.evaluation.throughput)])),
            }
        }
        if let Err(err) = result {
            self.error = Some(err);
        }
    }

    fn finish(self, dir: &Path, plot: bool) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.training.finish()?;
        self.evals.finish()?;
        if plot && !self.curves.is_empty() {
            let series: Vec<Series<'_>> = self
                .curves
                .iter()
                .map(|(label, points)| Series {
                    label,
                    points: points.clone(),
                })
                .collect();
            write_text(
                &dir.join("training.svg"),
                &line_chart(
                    "evaluated throughput",
                    "environment steps",
                    "throughput",
                    &series,
                ),
            )?;
        }
        Ok(())
    }
}

fn snapshot(config: &MappoConfig, params: &QueueParams) -> serde_json::Value {
    json!({ "mappo": config, "queue": params })
}

pub fn train_queueing(
    a: &TrainQueueingArgs,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let params = queue_params(&a.queue, Some(a.wait_limit))?;
    let config = MappoConfig {
        coordinator: kind(a.coordinator),
        ..apply_mappo(MappoConfig::default(), &a.mappo)
    };
    config.validate()?;
    let limits = match &a.sweep {
        Some(s) => parse_sweep(s)?,
        None => vec![a.wait_limit],
    };
    if a.initial_runs == 0 || a.final_episodes < 2 || a.final_steps == 0 {
        return Err(CliError::Config(
            "need one initial run and a final evaluation of at least two episodes".into(),
        ));
    }
    create_dir(dir)?;
    let mut log = TrainingLog::create(dir)?;
    let run = kind_name(config.coordinator);
    let points = sweep(&config, &params, &limits, a.initial_runs, |limit, u, e| {
        let p = QueueParams {
            wait_limit: limit,
            ..params.clone()
        };
        if let Some(e) = e {
            let _ = writeln!(
                err,
                "W={limit} update {}: throughput {:.4} wait {:.4} multiplier {:.3}",
                e.update,
                e.evaluation.throughput,
                e.evaluation.wait(&p).0,
                u.multiplier
            );
        }
        log.record(run, limit, &p, u, e);
    })?;
    log.finish(dir, a.plot)?;

    let mut evaluation = Csv::create(
        &dir.join("evaluation.csv"),
        &[
            "wait_limit",
            "throughput",
            "mean_wait",
            "stderr_throughput",
            "stderr_wait",
        ],
    )?;
    let mut frontier = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let p = QueueParams {
            wait_limit: point.wait_limit,
            ..params.clone()
        };
        let mut rng = stream(config.seed, 0xe000_0000 + i as u64);
        let e = evaluate(
            &point.report.best,
            &p,
            a.final_episodes,
            a.final_steps,
            &mut rng,
        )?;
        let (wait, wait_se) = e.wait(&p);
        evaluation.row(&[
            &point.wait_limit,
            &e.throughput,
            &wait,
            &e.stderr_throughput,
            &wait_se,
        ])?;
        frontier.push((point.wait_limit, e.throughput));
        let last = point.report.updates.last().map_or(0, |u| u.update as u64);
        Checkpoint::from_router(&point.report.best, snapshot(&config, &p), config.seed, last)
            .save(&dir.join(format!("policy_w{}.json", limit_tag(point.wait_limit))))?;
        say(
            out,
            format!(
                "W={}: throughput {:.4} ± {:.4}, mean wait {:.4} ± {:.4}",
                point.wait_limit, e.throughput, e.stderr_throughput, wait, wait_se
            ),
        )?;
    }
    evaluation.finish()?;
    if a.plot && frontier.len() > 1 {
        let svg = line_chart(
            "throughput against wait limit",
            "wait limit",
            "throughput",
            &[Series {
                label: run,
                points: frontier,
            }],
        );
        write_text(&dir.join("frontier.svg"), &svg)?;
    }
    Ok(())
}

pub fn eval_router(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.policy)?;
    if ckpt.kind != crate::checkpoint::KIND_ROUTER {
        return Err(CliError::Config("entangled checkpoints need --game".into()));
    }
    let policy = ckpt.to_router()?;
    let params = queue_params(&a.queue, a.wait_limit)?;
    if a.episodes < 2 || a.steps == 0 {
        return Err(CliError::Config(
            "evaluation needs at least two episodes".into(),
        ));
    }
    let e = evaluate(
        &policy,
        &params,
        a.episodes,
        a.steps,
        &mut stream(a.seed, 0),
    )?;
    let (wait, wait_se) = e.wait(&params);
    if let Some(steps) = a.dump_steps {
        let dir = a
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config("--dump-steps needs --out".into()))?;
        create_dir(dir)?;
        let p = QueueParams {
            horizon: steps.max(1),
            ..params.clone()
        };
        let traj = rollout(&policy, &p, steps, &mut stream(a.seed, 1))?;
        let path = dir.join("trajectory.csv");
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)
            .map_err(|e| CliError::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
    }
    let report = json!({
        "wait_limit": params.wait_limit,
        "throughput": e.throughput,
        "mean_wait": wait,
        "stderr_throughput": e.stderr_throughput,
        "stderr_wait": wait_se,
        "feasible": wait <= params.wait_limit,
        "episodes": e.episodes,
        "steps": e.steps,
    });
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    say(out, text)
}

pub fn compare_config(a: &CompareArgs) -> Result<CompareConfig> {
    let base = CompareConfig::default();
    let config = CompareConfig {
        mappo: apply_mappo(base.mappo.clone(), &a.mappo),
        params: queue_params(&a.queue, Some(a.wait_limit))?,
        runs: a.runs.unwrap_or(base.runs),
        margin: a.margin.unwrap_or(base.margin),
        final_episodes: a.final_episodes.unwrap_or(base.final_episodes),
        final_steps: a.final_steps.unwrap_or(base.final_steps),
    };
    config.validate()?;
    Ok(config)
}

fn comparison_row(csv: &mut Csv, r: &KindResult) -> Result<()> {
    csv.row(&[
        &kind_name(r.kind),
        &r.training_seed,
        &r.throughput.estimate,
        &r.throughput.low,
        &r.throughput.high,
        &r.wait.estimate,
        &r.wait.low,
        &r.wait.high,
        &r.feasible,
    ])
}

pub fn write_comparison(dir: &Path, config: &CompareConfig, c: &Comparison) -> Result<()> {
    let mut csv = Csv::create(
        &dir.join("comparison.csv"),
        &[
            "coordinator",
            "training_seed",
            "throughput",
            "throughput_low",
            "throughput_high",
            "mean_wait",
            "wait_low",
            "wait_high",
            "feasible",
        ],
    )?;
    comparison_row(&mut csv, &c.quantum)?;
    comparison_row(&mut csv, &c.shared)?;
    csv.finish()?;
    let text = serde_json::to_string_pretty(&json!({ "config": config, "result": c }))
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&dir.join("comparison.json"), &(text + "\n"))?;
    for r in [&c.quantum, &c.shared] {
        if let Some(policy) = &r.policy {
            let mappo = MappoConfig {
                coordinator: r.kind,
                seed: r.training_seed,
                ..config.mappo.clone()
            };
            Checkpoint::from_router(
                policy,
                snapshot(&mappo, &config.params),
                r.training_seed,
                config.mappo.updates as u64,
            )
            .save(&dir.join(format!("{}.json", kind_name(r.kind))))?;
        }
    }
    Ok(())
}

pub fn compare_coordinators(
    a: &CompareArgs,
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let config = compare_config(a)?;
    create_dir(dir)?;
    let mut log = TrainingLog::create(dir)?;
    let target = QueueParams {
        wait_limit: config.params.wait_limit - config.margin,
        ..config.params.clone()
    };
    let c = compare(&config, |k, seed, u, e| {
        if let Some(e) = e {
            let _ = writeln!(
                err,
                "{} seed {seed} update {}: throughput {:.4} wait {:.4}",
                kind_name(k),
                e.update,
                e.evaluation.throughput,
                e.evaluation.wait(&target).0
            );
        }
        log.record(
            &format!("{}-{seed}", kind_name(k)),
            target.wait_limit,
            &target,
            u,
            e,
        );
    })?;
    log.finish(dir, a.plot)?;
    write_comparison(dir, &config, &c)?;
    for r in [&c.quantum, &c.shared] {
        say(
            out,
            format!(
                "{:<9} throughput {:.4} [{:.4}, {:.4}]  mean wait {:.4} [{:.4}, {:.4}]  feasible {}",
                kind_name(r.kind),
                r.throughput.estimate,
                r.throughput.low,
                r.throughput.high,
                r.wait.estimate,
                r.wait.low,
                r.wait.high,
                r.feasible
            ),
        )?;
    }
    say(
        out,
        format!(
            "quantum better at W={}: {} ({})",
            c.wait_limit,
            if c.quantum_better { "yes" } else { "no" },
            c.reason
        ),
    )
}
