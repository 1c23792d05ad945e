use std::fs;
use std::path::{Path, PathBuf};

use asr_core::asrloop::{
    ablate_init, compare_strategies, run_episode_full, write_trajectories_csv, AsrConfig, Dip,
    RunSummary, Strategy,
};
use asr_core::checkpoint::Checkpoint;
use asr_core::encoder::EncoderParams;
use asr_core::metrics::{evaluate, MetricReport};
use asr_core::par::{self, Parallelism};
use asr_core::rl::{run_softmax_bandit, skewed_logits, steps_to_majority};
use asr_core::samplers::InitKind;
use serde::{Deserialize, Serialize};

use crate::config::{BanditInit, ExperimentConfig};
use crate::error::CliError;
use crate::schema;

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(asr_core::Error::from)?;
    text.push('\n');
    write(path, &text)
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Long-format per-epoch metrics and the best epoch per metric.
fn write_epoch_tables(root: &Path, summaries: &[RunSummary]) -> Result<(), CliError> {
    let mut epochs = String::from("seed,epoch,metric,value\n");
    let mut best = String::from("seed,metric,best_epoch\n");
    for s in summaries {
        for (e, report) in s.epoch_reports.iter().enumerate() {
            for (name, v) in report.entries() {
                epochs.push_str(&format!("{},{},{name},{v}\n", s.seed, e + 1));
            }
        }
        if let Some(first) = s.epoch_reports.first() {
            for (name, _) in first.entries() {
                let values: Vec<f64> = s
                    .epoch_reports
                    .iter()
                    .map(|r| r.entries().into_iter().find(|(k, _)| *k == name).map_or(f64::NAN, |(_, v)| v))
                    .collect();
                let idx = values
                    .iter()
                    .enumerate()
                    .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
                        Some((_, b)) if v <= b => acc,
                        _ => Some((i, v)),
                    })
                    .map_or(0, |(i, _)| i + 1);
                best.push_str(&format!("{},{name},{idx}\n", s.seed));
            }
        }
    }
    let epochs_path = root.join("epochs.csv");
    let best_path = root.join("best_epochs.csv");
    write(&epochs_path, &epochs)?;
    write(&best_path, &best)?;
    schema::csv_table(&epochs_path, &["seed", "epoch", "metric", "value"], 3)?;
    schema::csv_table(&best_path, &["seed", "metric", "best_epoch"], 2)?;
    Ok(())
}

pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = cfg.dataset()?;
    let root = cfg.out.join("train");
    create_dir(&root)?;
    let outcomes = par::map_slice(&cfg.seeds, Parallelism::default(), |&seed| {
        let splits = data.splits(seed)?;
        run_episode_full(&cfg.for_seed(seed), &splits).map_err(|e| asr_core::Error::Run {
            config: cfg.run.label(),
            seed,
            source: Box::new(e),
        })
    });
    let mut summaries = Vec::with_capacity(outcomes.len());
    for (seed, outcome) in cfg.seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        let dir = seed_dir(&root, *seed);
        create_dir(&dir)?;
        let log_path = dir.join("log.jsonl");
        outcome.log.write_jsonl(&log_path)?;
        schema::jsonl_log(&log_path)?;
        let summary = outcome.log.summary();
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        schema::json::<RunSummary>(&summary_path)?;
        let enc_path = dir.join("encoder.ckpt");
        outcome.encoder.to_checkpoint().write(&enc_path)?;
        EncoderParams::from_checkpoint(&Checkpoint::read(&enc_path)?)?;
        if let Some(policy) = &outcome.policy {
            let path = dir.join("policy.ckpt");
            policy.to_checkpoint().write(&path)?;
            Checkpoint::read(&path)?;
        }
        summaries.push(summary);
    }
    let summary_path = root.join("summary.json");
    write_json(&summary_path, &summaries)?;
    schema::json::<Vec<RunSummary>>(&summary_path)?;
    write_epoch_tables(&root, &summaries)
}

pub fn compare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.seeds.len() < 2 {
        return Err(CliError::Config("compare needs at least two seeds".into()));
    }
    let data = cfg.dataset()?;
    let strategies: Vec<Strategy> = cfg
        .compare_losses
        .iter()
        .flat_map(|&loss| {
            cfg.compare_samplers.iter().map(move |&sampler| {
                Strategy::new(AsrConfig { sampler, loss, ..cfg.run.clone() })
            })
        })
        .collect();
    let cmp = compare_strategies(&strategies, &cfg.seeds, &data, Parallelism::default())?;
    let root = cfg.out.join("compare");
    create_dir(&root)?;

    let summary_path = root.join("summary.csv");
    cmp.write_csv(&summary_path)?;
    let rows = schema::csv_table(&summary_path, &["strategy", "loss", "metric", "mean", "std", "n_seeds"], 3)?;
    if rows != cmp.rows.len() {
        return Err(CliError::Schema { path: summary_path, message: "row count mismatch".into() });
    }

    let rankings_path = root.join("rankings.json");
    let rankings: Vec<Ranking> = cmp
        .rankings
        .iter()
        .map(|(metric, order)| Ranking { metric: metric.clone(), order: order.clone() })
        .collect();
    write_json(&rankings_path, &rankings)?;
    schema::json::<Vec<Ranking>>(&rankings_path)?;

    let mut curves = String::from("strategy,loss,seed,step,weighted\n");
    for (s, logs) in strategies.iter().zip(&cmp.logs) {
        for log in logs {
            for (step, v) in log.weighted_trajectory().iter().enumerate() {
                curves.push_str(&format!("{},{},{},{step},{v}\n", s.name, s.config.loss, log.seed));
            }
        }
    }
    let curves_path = root.join("curves.csv");
    write(&curves_path, &curves)?;
    schema::csv_table(&curves_path, &["strategy", "loss", "seed", "step", "weighted"], 2)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Ranking {
    metric: String,
    order: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SeedDip {
    seed: u64,
    dip: Option<Dip>,
}

#[derive(Serialize, Deserialize)]
struct DipReport {
    init: InitKind,
    dip_rate: f64,
    delta: f64,
    runs: Vec<SeedDip>,
    final_test: Vec<MetricReport>,
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if !cfg.run.sampler.is_adaptive() {
        return Err(CliError::Config(format!(
            "ablate-init needs an adaptive sampler, got `{}`",
            cfg.run.sampler
        )));
    }
    let data = cfg.dataset()?;
    let groups = ablate_init(&cfg.run, &cfg.seeds, &data, cfg.dip_delta, Parallelism::default())?;
    let root = cfg.out.join("ablate-init");
    create_dir(&root)?;

    let traj_path = root.join("trajectories.csv");
    write_trajectories_csv(&groups, &traj_path)?;
    schema::csv_table(&traj_path, &["init", "seed", "step", "weighted"], 1)?;

    let reports: Vec<DipReport> = groups
        .iter()
        .map(|g| DipReport {
            init: g.init,
            dip_rate: g.dip_rate,
            delta: cfg.dip_delta,
            runs: g.seeds.iter().zip(&g.dips).map(|(&seed, &dip)| SeedDip { seed, dip }).collect(),
            final_test: g.final_test.clone(),
        })
        .collect();
    let dips_path = root.join("dips.json");
    write_json(&dips_path, &reports)?;
    let back = schema::json::<Vec<DipReport>>(&dips_path)?;
    if back.len() != InitKind::ALL.len() || back.iter().any(|r| !(0.0..=1.0).contains(&r.dip_rate)) {
        return Err(CliError::Schema { path: dips_path, message: "expected six groups with dip rates".into() });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BanditSummary {
    rewards: Vec<f64>,
    init_probs: Vec<f64>,
    optimal_action: usize,
    threshold: f64,
    steps: usize,
    lr: f64,
    /// First step with the optimal action above the threshold.
    steps_to_majority: Option<usize>,
}

pub fn bandit(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let b = &cfg.bandit;
    let n = b.rewards.len();
    if n < 2 || b.steps == 0 || !(b.lr > 0.0) || !(0.0..1.0).contains(&b.threshold) {
        return Err(CliError::Config(
            "bandit needs >= 2 rewards, steps >= 1, lr > 0 and a threshold in [0, 1)".into(),
        ));
    }
    let logits = match b.init {
        BanditInit::Uniform => vec![0.0; n],
        BanditInit::Skewed { action, prob } => {
            skewed_logits(n, action, prob).map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    let traj = run_softmax_bandit(&b.rewards, &logits, b.steps, b.lr)?;
    let optimal = b
        .rewards
        .iter()
        .enumerate()
        .fold(0, |best, (i, &r)| if r > b.rewards[best] { i } else { best });

    let root = cfg.out.join("bandit");
    create_dir(&root)?;
    let mut header: Vec<String> = vec!["step".into()];
    header.extend((0..n).map(|i| format!("p_{i}")));
    header.push("optimal_majority".into());
    let mut text = header.join(",");
    text.push('\n');
    for (step, probs) in traj.iter().enumerate() {
        let cells: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
        let majority = u8::from(probs[optimal] > b.threshold);
        text.push_str(&format!("{step},{},{majority}\n", cells.join(",")));
    }
    let traj_path = root.join("trajectory.csv");
    write(&traj_path, &text)?;
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = schema::csv_table(&traj_path, &header_refs, 0)?;
    if rows != b.steps + 1 {
        return Err(CliError::Schema { path: traj_path, message: format!("{rows} rows for {} steps", b.steps) });
    }

    let summary_path = root.join("summary.json");
    write_json(
        &summary_path,
        &BanditSummary {
            rewards: b.rewards.clone(),
            init_probs: traj[0].clone(),
            optimal_action: optimal,
            threshold: b.threshold,
            steps: b.steps,
            lr: b.lr,
            steps_to_majority: steps_to_majority(&traj, optimal, b.threshold),
        },
    )?;
    schema::json::<BanditSummary>(&summary_path)?;
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = cfg.dataset()?;
    let root = cfg.out.join("eval");
    create_dir(&root)?;
    for &seed in &cfg.seeds {
        let ckpt = cfg
            .eval_checkpoint
            .clone()
            .unwrap_or_else(|| seed_dir(&cfg.out.join("train"), seed).join("encoder.ckpt"));
        let encoder = EncoderParams::from_checkpoint(&Checkpoint::read(&ckpt)?)?;
        let splits = data.splits(seed)?;
        let emb = encoder.embed(splits.test.features().view())?;
        let report = evaluate(emb.view(), splits.test.labels(), &cfg.run.metric_weights, seed)?;
        let path = root.join(format!("seed-{seed}.json"));
        write_json(&path, &report)?;
        schema::json::<MetricReport>(&path)?;
    }
    Ok(())
}
