//! Subcommand implementations. Every command materializes a run directory
//! (config snapshot, checkpoints/, logs/, reports/) and finishes by
//! writing a checksummed manifest.

use crate::config::FileConfig;
use crate::manifest;
use crate::svg::{self, Series};
use anyhow::{bail, Result};
use oar_core::attribution::{self, AttributionMethod, ImportanceProfile};
use oar_core::evaluation;
use oar_core::policy::{checkpoint, ModelParams};
use oar_core::tasks;
use oar_core::trainer::{self, StepLog, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Root for auto-named run directories; overridable so tests and batch
/// drivers can isolate workspaces.
pub const RUN_ROOT_ENV: &str = "OAR_RUN_ROOT";

pub fn resolve_run_dir(out: Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let root = std::env::var(RUN_ROOT_ENV).unwrap_or_else(|_| "runs".into());
            PathBuf::from(root).join(default_name)
        }
    };
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("logs"))?;
    fs::create_dir_all(dir.join("reports"))?;
    Ok(dir)
}

fn write_snapshot(dir: &Path, cfg: &FileConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.snapshot_toml()?)?;
    Ok(())
}

// ── pretrain ─────────────────────────────────────────────────────────────

pub fn cmd_pretrain(config_path: &Path, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = FileConfig::load(config_path)?;
    let p = &cfg.pretrain;
    let dir = resolve_run_dir(out, &format!("pretrain-seed{}", p.seed))?;
    write_snapshot(&dir, &cfg)?;

    let mut params = ModelParams::init(&cfg.policy_config()?, p.seed)?;
    let losses = trainer::sft_warmstart(
        &mut params,
        p.steps,
        p.batch_size,
        p.learning_rate,
        p.seed,
        (p.difficulty_min, p.difficulty_max),
    )?;
    checkpoint::save(&params, &dir.join("checkpoints/warmstart.ckpt"))?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}")?;
    }
    fs::write(dir.join("reports/sft_loss.csv"), csv)?;

    let heldout = trainer::heldout_tasks(p.seed, 64, (p.difficulty_min, p.difficulty_max))?;
    let (acc, fmt, overall) = trainer::evaluate_greedy(&params, &heldout, 96)?;
    fs::write(
        dir.join("reports/warmstart_eval.csv"),
        format!("metric,value\naccuracy,{acc}\nformat,{fmt}\noverall,{overall}\n"),
    )?;

    manifest::write_manifest(
        &dir,
        "pretrain",
        &cfg,
        BTreeMap::from([("pretrain".into(), p.seed)]),
    )?;
    println!("pretrain complete: {}", dir.display());
    Ok(dir)
}

// ── train ────────────────────────────────────────────────────────────────

/// Flag overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub credit: Option<String>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub probe: Option<String>,
    pub seed: Option<u64>,
    pub force_degenerate: bool,
    pub total_steps: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut FileConfig) {
        if let Some(c) = &self.credit {
            cfg.train.credit = c.clone();
        }
        if let Some(t) = self.tau {
            cfg.train.tau = t;
        }
        if let Some(b) = self.beta {
            cfg.train.beta = b;
        }
        if let Some(p) = &self.probe {
            cfg.train.probe = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if self.force_degenerate {
            cfg.train.force_degenerate = true;
        }
        if let Some(n) = self.total_steps {
            cfg.train.total_steps = n;
        }
    }
}

pub fn cmd_train(
    config_path: &Path,
    checkpoint_path: &Path,
    overrides: &TrainOverrides,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let mut cfg = FileConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    let train_cfg = cfg.train_config()?;
    if !checkpoint_path.exists() {
        bail!("checkpoint not found: {}", checkpoint_path.display());
    }
    let dir = resolve_run_dir(
        out,
        &format!("train-{}-seed{}", train_cfg.credit.name(), train_cfg.seed),
    )?;
    write_snapshot(&dir, &cfg)?;

    let mut params = checkpoint::load(checkpoint_path)?;
    let log_path = dir.join("logs/steps.jsonl");
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let ckpt_dir = dir.join("checkpoints");
    let every = train_cfg.checkpoint_every.max(1);
    let logs = trainer::train(&mut params, &train_cfg, |p, log| {
        trainer::append_step_log(&mut log_file, log)?;
        if (log.step + 1) % every == 0 {
            checkpoint::save(p, &ckpt_dir.join(format!("step_{:05}.ckpt", log.step + 1)))?;
        }
        Ok(())
    })?;
    log_file.flush()?;
    checkpoint::save(&params, &ckpt_dir.join("final.ckpt"))?;
    fs::write(dir.join("reports/metrics.csv"), metrics_csv(&[("run".into(), logs)]))?;

    manifest::write_manifest(
        &dir,
        "train",
        &cfg,
        BTreeMap::from([("train".into(), train_cfg.seed)]),
    )?;
    println!("train complete: {}", dir.display());
    Ok(dir)
}

fn metrics_csv(runs: &[(String, Vec<StepLog>)]) -> String {
    let mut csv = String::from(
        "run,step,mean_reward,mean_accuracy,mean_format,mean_entropy,mean_ess_ratio,\
         mean_top10_mass,entropy_bonus_mass,clip_fraction,grad_norm,loss,response_tokens\n",
    );
    for (name, logs) in runs {
        for l in logs {
            writeln!(
                csv,
                "{name},{},{},{},{},{},{},{},{},{},{},{},{}",
                l.step,
                l.mean_reward,
                l.mean_accuracy,
                l.mean_format,
                l.mean_entropy,
                l.mean_ess_ratio,
                l.mean_top10_mass,
                l.entropy_bonus_mass,
                l.clip_fraction,
                l.grad_norm,
                l.loss,
                l.response_tokens
            )
            .unwrap();
        }
    }
    csv
}

// ── eval ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Oracle,
    Recall,
    Variance,
    Timing,
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    study: Study,
    config_path: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let cfg = match config_path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if !checkpoint_path.exists() {
        bail!("checkpoint not found: {}", checkpoint_path.display());
    }
    let name = match study {
        Study::Oracle => "oracle",
        Study::Recall => "recall",
        Study::Variance => "variance",
        Study::Timing => "timing",
    };
    let dir = resolve_run_dir(out, &format!("eval-{name}-seed{}", cfg.eval.seed))?;
    write_snapshot(&dir, &cfg)?;

    match study {
        Study::Variance => run_variance(&dir, &cfg)?,
        Study::Timing => run_timing(&dir, &cfg, checkpoint_path)?,
        Study::Oracle => run_oracle(&dir, &cfg, checkpoint_path)?,
        Study::Recall => run_recall(&dir, &cfg, checkpoint_path)?,
    }
    manifest::write_manifest(
        &dir,
        &format!("eval-{name}"),
        &cfg,
        BTreeMap::from([("eval".into(), cfg.eval.seed)]),
    )?;
    println!("eval {name} complete: {}", dir.display());
    Ok(dir)
}

fn run_variance(dir: &Path, cfg: &FileConfig) -> Result<()> {
    let mut csv = String::from("t,var_broadcast,var_token,ratio\n");
    for t in [1usize, 5, 10, 25, 50] {
        let v = evaluation::variance_sim(t, cfg.eval.variance_trials, cfg.eval.seed)?;
        writeln!(csv, "{},{},{},{}", v.t, v.var_broadcast, v.var_token, v.ratio)?;
    }
    fs::write(dir.join("reports/variance.csv"), csv)?;
    Ok(())
}

fn run_timing(dir: &Path, cfg: &FileConfig, ckpt: &Path) -> Result<()> {
    let params = checkpoint::load(ckpt)?;
    let train_cfg = cfg.train_config()?;
    let batch = trainer::step_tasks(&train_cfg, 0)?;
    let groups = trainer::collect_rollouts(&params, &batch, &train_cfg, 0)?;
    let rows = evaluation::profile_time_per_token(&params, &train_cfg, &groups)?;
    let mut csv = String::from("variant,seconds_per_token,normalized\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.variant, r.seconds_per_token, r.normalized)?;
    }
    fs::write(dir.join("reports/timing.csv"), csv)?;
    Ok(())
}

/// Shared collection step for the counterfactual studies.
fn correct_set(
    params: &ModelParams,
    cfg: &FileConfig,
) -> Result<Vec<(tasks::TaskInstance, trainer::Trajectory)>> {
    let e = &cfg.eval;
    let t = &cfg.train;
    let set = evaluation::correct_trajectories(
        params,
        e.trajectories,
        t.max_new_tokens,
        (t.difficulty_min, t.difficulty_max),
        e.seed,
        e.max_attempts,
    )?;
    if set.is_empty() {
        bail!("no correct trajectories found within {} attempts", e.max_attempts);
    }
    Ok(set)
}

fn run_oracle(dir: &Path, cfg: &FileConfig, ckpt: &Path) -> Result<()> {
    let params = checkpoint::load(ckpt)?;
    let train_cfg = cfg.train_config()?;
    let set = correct_set(&params, cfg)?;
    let mut jsonl = std::io::BufWriter::new(fs::File::create(dir.join("reports/oracle.jsonl"))?);
    let mut csv = String::from("trajectory,response_len,labeled,causal\n");
    for (i, (task, traj)) in set.iter().enumerate() {
        let labels =
            evaluation::oracle_label(&params, task, &traj.response, train_cfg.max_new_tokens)?;
        let raw = attribution::oar_p_scores(
            &params,
            &task.prompt,
            &traj.response,
            &train_cfg.probe,
            train_cfg.batch_budget,
        )?;
        let p = ImportanceProfile::from_raw(AttributionMethod::OarP, Some(train_cfg.probe.kind), raw)?;
        // Per-token visualization record: token text, normalized importance,
        // and the oracle flip flag (absent for unlabeled positions).
        let mut causal = vec![None; traj.response.len()];
        for (&t, &c) in labels.targets.iter().zip(&labels.causal) {
            causal[t] = Some(c);
        }
        let rec = serde_json::json!({
            "trajectory": i,
            "tokens": traj.response.iter().map(|&id| tasks::vocab::decode_token(id)).collect::<Vec<_>>(),
            "i_hat": p.i_hat,
            "oracle_causal": causal,
        });
        serde_json::to_writer(&mut jsonl, &rec)?;
        jsonl.write_all(b"\n")?;
        writeln!(
            csv,
            "{i},{},{},{}",
            traj.response.len(),
            labels.targets.len(),
            labels.causal.iter().filter(|&&c| c).count()
        )?;
    }
    jsonl.flush()?;
    fs::write(dir.join("reports/oracle.csv"), csv)?;
    Ok(())
}

fn run_recall(dir: &Path, cfg: &FileConfig, ckpt: &Path) -> Result<()> {
    let params = checkpoint::load(ckpt)?;
    let train_cfg = cfg.train_config()?;
    let set = correct_set(&params, cfg)?;
    let labels: Vec<_> = set
        .iter()
        .map(|(task, traj)| {
            evaluation::oracle_label(&params, task, &traj.response, train_cfg.max_new_tokens)
        })
        .collect::<oar_core::Result<_>>()?;
    let k_grid: Vec<f64> = (1..=20).map(|k| k as f64 * 5.0).collect();
    let mut csv = String::from("method,k_percent,recall\n");
    for method in [
        AttributionMethod::OarP,
        AttributionMethod::OarG,
        AttributionMethod::Entropy,
        AttributionMethod::Random,
    ] {
        let importance: Vec<Vec<f64>> = set
            .iter()
            .enumerate()
            .map(|(i, (task, traj))| {
                method_importance(&params, &train_cfg, method, task, traj, i as u64)
            })
            .collect::<Result<_>>()?;
        let curve = evaluation::recall_curve(&labels, &importance, &k_grid)?;
        for (k, r) in curve.k_grid.iter().zip(&curve.recall) {
            writeln!(csv, "{},{k},{r}", method.name())?;
        }
    }
    fs::write(dir.join("reports/recall.csv"), csv)?;
    Ok(())
}

fn method_importance(
    params: &ModelParams,
    cfg: &TrainConfig,
    method: AttributionMethod,
    task: &tasks::TaskInstance,
    traj: &trainer::Trajectory,
    index: u64,
) -> Result<Vec<f64>> {
    let raw = match method {
        AttributionMethod::OarP => attribution::oar_p_scores(
            params,
            &task.prompt,
            &traj.response,
            &cfg.probe,
            cfg.batch_budget,
        )?,
        AttributionMethod::OarG => {
            let sigma = cfg
                .sigma
                .unwrap_or_else(|| attribution::default_sigma(params, &task.prompt, &traj.response));
            attribution::oar_g_scores(
                params,
                &task.prompt,
                &traj.response,
                &cfg.probe,
                sigma,
                cfg.seed.wrapping_add(index),
                cfg.oar_g_repeats,
            )?
        }
        AttributionMethod::Entropy => {
            attribution::entropy_scores(params, &task.prompt, &traj.response, cfg.temperature)?
        }
        AttributionMethod::Random => {
            attribution::random_scores(traj.response.len(), cfg.seed.wrapping_add(index))?
        }
    };
    let p = ImportanceProfile::from_raw(method, Some(cfg.probe.kind), raw)?;
    Ok(p.i_hat)
}

// ── report ───────────────────────────────────────────────────────────────

pub fn cmd_report(run_dirs: &[PathBuf], out: Option<PathBuf>) -> Result<PathBuf> {
    if run_dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut runs = Vec::new();
    for d in run_dirs {
        let log_path = d.join("logs/steps.jsonl");
        if !log_path.exists() {
            bail!("no step log at {}", log_path.display());
        }
        let logs = trainer::read_step_logs(&log_path)?;
        if logs.is_empty() {
            bail!("empty step log at {}", log_path.display());
        }
        let name = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        runs.push((name, logs));
    }
    let min_steps = runs.iter().map(|(_, l)| l.len()).min().unwrap();
    let truncated = runs.iter().any(|(_, l)| l.len() > min_steps);
    for (_, logs) in &mut runs {
        logs.truncate(min_steps);
    }

    let dir = resolve_run_dir(out, "report")?;
    let mut csv = metrics_csv(&runs);
    if truncated {
        csv.push_str(&format!("# truncated to common step count {min_steps}\n"));
    }
    fs::write(dir.join("reports/aggregate.csv"), csv)?;

    let metrics: [(&str, fn(&StepLog) -> f64); 4] = [
        ("reward", |l| l.mean_reward),
        ("entropy", |l| l.mean_entropy),
        ("ess_ratio", |l| l.mean_ess_ratio),
        ("top10_mass", |l| l.mean_top10_mass),
    ];
    for (name, get) in metrics {
        let series: Vec<Series> = runs
            .iter()
            .map(|(run, logs)| Series {
                name: run,
                points: logs.iter().map(|l| (l.step as f64, get(l))).collect(),
            })
            .collect();
        let chart = svg::line_chart(&format!("mean {name} per step"), "step", name, &series);
        fs::write(dir.join(format!("reports/{name}.svg")), chart)?;
    }
    let cfg = FileConfig::default();
    manifest::write_manifest(&dir, "report", &cfg, BTreeMap::new())?;
    println!("report complete: {}", dir.display());
    Ok(dir)
}
