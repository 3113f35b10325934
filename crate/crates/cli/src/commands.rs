//! Subcommand implementations.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use modp::blockworld::TaskSpec;
use modp::steer::{analyze, calibrate, serve, SessionConfig, SteerSession};
use modp::trainer::{
    ablate, build_dataset, evaluate, generate_demos, load_checkpoint, train_with_hook,
    AblationVariant, Condition, Dataset, DemoSet, EvalReport, PolicyController,
};
use modp::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, ConditionArg};

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut config = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.paths.out = out;
    }
    apply_flags(&mut config, &cli.command);
    config.validate()?;
    match cli.command {
        Command::GenDemos { .. } => gen_demos(&config),
        Command::Train { .. } => train(&config),
        Command::Eval(_) => eval(&config),
        Command::Ablate { .. } => run_ablation(&config),
        Command::Analyze { .. } => run_analysis(&config),
        Command::Steer { .. } => steer(&config),
    }
}

fn apply_flags(config: &mut RunConfig, command: &Command) {
    match command {
        Command::GenDemos { n, noise } => {
            config.demos.n = n.unwrap_or(config.demos.n);
            config.demos.noise = noise.unwrap_or(config.demos.noise);
        }
        Command::Train { demos } | Command::Ablate { demos } => {
            if demos.is_some() {
                config.paths.demos.clone_from(demos);
            }
        }
        Command::Eval(args) => {
            if args.ckpt.is_some() {
                config.paths.ckpt.clone_from(&args.ckpt);
            }
            if let Some(c) = args.condition {
                config.eval.condition = match c {
                    ConditionArg::Nominal => Condition::Nominal,
                    ConditionArg::Disturbed => Condition::Disturbed,
                };
            }
            config.eval.rollouts = args.rollouts.unwrap_or(config.eval.rollouts);
            if let Some(seeds) = &args.seeds {
                config.eval.seeds.clone_from(seeds);
            }
        }
        Command::Analyze { report } => {
            if report.is_some() {
                config.paths.report.clone_from(report);
            }
        }
        Command::Steer { ckpt, port } => {
            if ckpt.is_some() {
                config.paths.ckpt.clone_from(ckpt);
            }
            config.steer.port = port.unwrap_or(config.steer.port);
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

/// Creates the next free `run-NNN` below `paths.out` and writes the
/// resolved config into it.
fn new_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let root = &config.paths.out;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0.. {
        let dir = root.join(format!("run-{i:03}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => {
                let path = dir.join("config.json");
                let text = serde_json::to_string_pretty(config)?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
                log::info!("run directory {}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run numbers are unbounded")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = required(&config.paths.demos, "demos")?;
    let demos = DemoSet::load(path)?;
    if demos.task != config.task {
        return Err(Error::Contract(format!(
            "{} was recorded on task {:?}, but the config describes {:?}",
            path.display(),
            demos.task.task_id,
            config.task.task_id
        )));
    }
    build_dataset(&demos.episodes, &config.train.policy.chunking)
}

fn gen_demos(config: &RunConfig) -> Result<()> {
    let d = &config.demos;
    if d.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if !(d.noise >= 0.0 && d.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be >= 0", d.noise)));
    }
    let (episodes, resampled) =
        generate_demos(&config.task, d.n, d.noise, config.seed, d.max_retries)?;
    if resampled > 0 {
        log::warn!("{resampled} expert episodes failed and were resampled");
    }
    let dir = new_run_dir(config)?;
    let path = dir.join("demos.modp");
    DemoSet {
        task: config.task.clone(),
        episodes,
    }
    .save(&path)?;
    println!(
        "{} successful episodes ({resampled} resampled) written to {}",
        d.n,
        path.display()
    );
    Ok(())
}

fn train(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(config)?;
    let dir = new_run_dir(config)?;
    let evals = dir.join("evals.jsonl");
    let n = config.train.num_eval_rollouts;
    let outcome = train_with_hook(&config.train, &dataset, config.seed, Some(&dir), |ck| {
        if n == 0 {
            return Ok(());
        }
        let controller = PolicyController::new(ck.ema);
        let report = evaluate(
            &controller,
            &config.task,
            Condition::Nominal,
            n,
            &[config.seed],
        )?;
        log::info!(
            "epoch {} step {}: nominal success {:.2}",
            ck.epoch,
            ck.step,
            report.success_rate
        );
        let line = serde_json::json!({
            "epoch": ck.epoch,
            "step": ck.step,
            "success_rate": report.success_rate,
            "mean_gate_entropy": report.mean_gate_entropy,
            "distinct_experts": report.distinct_experts,
        });
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&evals)
            .map_err(|e| Error::io(&evals, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&evals, e))
    })?;
    let summary = serde_json::json!({
        "run_dir": dir,
        "steps": outcome.steps,
        "checkpoint": dir.join("final.ckpt"),
        "final_l_diff": outcome.metrics.last().map(|m| m.l_diff),
    });
    println!("{summary}");
    Ok(())
}

fn eval(config: &RunConfig) -> Result<()> {
    let e = &config.eval;
    if e.rollouts == 0 || e.seeds.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one rollout and one seed".into(),
        ));
    }
    let nets = load_checkpoint(required(&config.paths.ckpt, "ckpt")?)?;
    let report = evaluate(
        &PolicyController::new(&nets),
        &config.task,
        e.condition,
        e.rollouts,
        &e.seeds,
    )?;
    let dir = new_run_dir(config)?;
    let text = serde_json::to_string(&report)?;
    write_file(&dir.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run_ablation(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(config)?;
    let dir = new_run_dir(config)?;
    let table = ablate(
        &config.train,
        &config.task,
        &dataset,
        &AblationVariant::ALL,
        &config.train.seeds,
        Some(&dir),
    )?;
    write_file(
        &dir.join("ablation.json"),
        &serde_json::to_string_pretty(&table)?,
    )?;
    print!("{}", format_table(&table.summary));
    Ok(())
}

fn format_table(summary: &[modp::trainer::AblationSummary]) -> String {
    let mut out = String::from("variant  runs  nominal  disturbed  distinct  entropy  purity\n");
    for s in summary {
        writeln!(
            out,
            "{:<7}  {:>4}  {:>7.3}  {:>9.3}  {:>8.2}  {:>7.3}  {:>6.3}",
            s.variant.name(),
            s.runs,
            s.nominal_success,
            s.disturbed_success,
            s.mean_distinct_experts,
            s.mean_gate_entropy,
            s.mean_purity
        )
        .expect("writing to a String");
    }
    out
}

fn run_analysis(config: &RunConfig) -> Result<()> {
    let path = required(&config.paths.report, "report")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    check_task(&report, &config.task)?;
    let analysis = analyze(&report, &config.task)?;
    let dir = new_run_dir(config)?;
    write_file(&dir.join("timeline.csv"), &analysis.csv)?;
    let summary = serde_json::to_string_pretty(&analysis.summary)?;
    write_file(&dir.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn check_task(report: &EvalReport, task: &TaskSpec) -> Result<()> {
    if report.task_id != task.task_id {
        return Err(Error::Contract(format!(
            "report is for task {:?}, config describes {:?}",
            report.task_id, task.task_id
        )));
    }
    Ok(())
}

fn steer(config: &RunConfig) -> Result<()> {
    let s = &config.steer;
    let nets = load_checkpoint(required(&config.paths.ckpt, "ckpt")?)?;
    let map = if s.calibration_rollouts > 0 && nets.moe().is_some() {
        let (map, _) = calibrate(&nets, &config.task, s.calibration_rollouts, &[config.seed])?;
        log::info!("calibrated expert map, purity {:.3}", map.purity);
        Some(map)
    } else {
        None
    };
    let session = SteerSession::new(
        nets,
        config.task.clone(),
        map,
        &SessionConfig {
            tick_hz: s.tick_hz,
            seed: config.seed,
            disturbance: config.disturbance.clone(),
        },
    )?;
    let handle = serve(session, &format!("{}:{}", s.host, s.port), s.tick_hz)?;
    new_run_dir(config)?;
    println!("listening on ws://{}", handle.local_addr());
    std::io::stdout()
        .flush()
        .map_err(|e| Error::Network(e.to_string()))?;
    handle.wait()
}
