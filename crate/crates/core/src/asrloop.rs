//! Episode orchestration.
//!
//! One episode interleaves encoder training with policy decisions: every
//! `inner_iters` encoder steps the validation set is evaluated, the change in
//! the weighted metric becomes the reward for the previous adjustment, the
//! policy is updated and a new adjustment is applied to the sampling
//! distribution. Static samplers run the same schedule without the policy.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::index;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_gaussian_blobs, load_csv, LabeledDataset, SplitSpec, Splits};
use crate::encoder::{AdamConfig, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, margin_loss, triplet_loss, MarginState, Reduction};
use crate::metrics::{evaluate, MetricName, MetricReport, MetricWeights};
use crate::par::{self, Parallelism};
use crate::rl::{PolicyAgent, PolicyAlgorithm, PolicyConfig, PolicyParams, TrajectoryBuffer, Transition};
use crate::rng::{self, streams, Rng};
use crate::samplers::{
    build_triplets, init_distribution, Action, InitKind, InitialDistributionSpec, NegativeSampler,
    SamplingDistribution,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    Triplet,
    Margin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    Semihard,
    Distance,
    AsrReinforce,
    AsrPpo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// Weighted metric, current bin weights and epoch fraction.
    #[default]
    Augmented,
    /// Weighted metric only.
    Strict,
}

macro_rules! name_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

name_enum!(LossKind { Contrastive => "contrastive", Triplet => "triplet", Margin => "margin" });
name_enum!(SamplerKind {
    Random => "random",
    Semihard => "semihard",
    Distance => "distance",
    AsrReinforce => "asr_reinforce",
    AsrPpo => "asr_ppo",
});
name_enum!(StateMode { Augmented => "augmented", Strict => "strict" });

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Random,
        SamplerKind::Semihard,
        SamplerKind::Distance,
        SamplerKind::AsrReinforce,
        SamplerKind::AsrPpo,
    ];

    pub fn algorithm(self) -> Option<PolicyAlgorithm> {
        match self {
            SamplerKind::AsrReinforce => Some(PolicyAlgorithm::Reinforce),
            SamplerKind::AsrPpo => Some(PolicyAlgorithm::Ppo),
            _ => None,
        }
    }

    pub fn is_adaptive(self) -> bool {
        self.algorithm().is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub contrastive_margin: f64,
    pub margin_gamma: f64,
    pub beta: f64,
    pub beta_lr: f64,
    pub margin_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet_margin: 0.2,
            contrastive_margin: 1.0,
            margin_gamma: 0.2,
            beta: 0.6,
            beta_lr: 5e-4,
            margin_reduction: Reduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub init: InitKind,
    pub epochs: usize,
    /// Encoder steps per policy step.
    pub inner_iters: usize,
    /// Classes per batch.
    pub batch_classes: usize,
    /// Instances per class per batch.
    pub batch_per_class: usize,
    pub metric_weights: MetricWeights,
    pub bins: usize,
    pub multiplier: f64,
    pub state_mode: StateMode,
    pub policy: PolicyConfig,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub losses: LossConfig,
    pub seed: u64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Triplet,
            sampler: SamplerKind::AsrPpo,
            init: InitKind::NormalLow,
            epochs: 40,
            inner_iters: 20,
            batch_classes: 4,
            batch_per_class: 8,
            metric_weights: MetricWeights::default(),
            bins: 10,
            multiplier: 2.0,
            state_mode: StateMode::Augmented,
            policy: PolicyConfig::default(),
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
            losses: LossConfig::default(),
            seed: 0,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner_iters must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_classes < 2 || self.batch_per_class < 2 {
            return Err(Error::invalid(
                "batches need at least 2 classes and 2 instances per class",
            ));
        }
        if self.bins < 2 {
            return Err(Error::invalid("need at least 2 distance bins"));
        }
        if !(self.multiplier > 1.0) {
            return Err(Error::invalid("action multiplier must exceed 1"));
        }
        if self.encoder.hidden == 0 || self.encoder.out_dim == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        let l = &self.losses;
        for (name, v) in [
            ("triplet_margin", l.triplet_margin),
            ("contrastive_margin", l.contrastive_margin),
            ("margin_gamma", l.margin_gamma),
            ("beta", l.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(l.beta_lr >= 0.0) {
            return Err(Error::invalid("beta_lr must be non-negative"));
        }
        self.metric_weights.validate()?;
        self.adam.validate()?;
        self.policy.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_classes * self.batch_per_class
    }

    pub fn state_dim(&self) -> usize {
        match self.state_mode {
            StateMode::Augmented => self.bins + 2,
            StateMode::Strict => 1,
        }
    }

    /// Human-readable `sampler+loss` label.
    pub fn label(&self) -> String {
        format!("{}+{}", self.sampler, self.loss)
    }
}

/// Encoder, margin state and the random streams that drive mini-batch
/// training. The episode loop is a thin layer on top of this.
pub struct Trainer<'a> {
    train: &'a LabeledDataset,
    members: Vec<Vec<usize>>,
    pub encoder: EncoderParams,
    pub margin: MarginState,
    loss: LossKind,
    losses: LossConfig,
    adam: AdamConfig,
    batch_classes: usize,
    batch_per_class: usize,
    batch_rng: Rng,
    negative_rng: Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub active: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &AsrConfig, train: &'a LabeledDataset, seed: u64) -> Result<Self> {
        let members = train.class_members();
        if members.len() < 2 || members.iter().all(|m| m.len() < 2) {
            return Err(Error::invalid(
                "training set needs at least 2 classes and a class with 2 members",
            ));
        }
        let encoder = EncoderParams::init(
            train.dim(),
            &cfg.encoder,
            &mut rng::stream(seed, streams::ENCODER_INIT),
        )?;
        Ok(Self {
            train,
            members,
            encoder,
            margin: MarginState {
                beta: cfg.losses.beta,
                beta_lr: cfg.losses.beta_lr,
            },
            loss: cfg.loss,
            losses: cfg.losses,
            adam: cfg.adam,
            batch_classes: cfg.batch_classes,
            batch_per_class: cfg.batch_per_class,
            batch_rng: rng::stream(seed, streams::BATCHES),
            negative_rng: rng::stream(seed, streams::NEGATIVES),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train
            .len()
            .div_ceil(self.batch_classes * self.batch_per_class)
            .max(1)
    }

    /// Class-balanced batch: up to `batch_classes` classes, each contributing
    /// up to `batch_per_class` distinct rows. At least one chosen class has
    /// two rows.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        let eligible: Vec<usize> = (0..self.members.len()).filter(|&c| self.members[c].len() >= 2).collect();
        let anchor_class = *eligible.choose(&mut self.batch_rng).expect("checked in new");
        let mut others: Vec<usize> = (0..self.members.len()).filter(|&c| c != anchor_class).collect();
        others.shuffle(&mut self.batch_rng);
        let mut classes = vec![anchor_class];
        classes.extend(others.into_iter().take(self.batch_classes.min(self.members.len()) - 1));
        let mut rows = Vec::with_capacity(self.batch_classes * self.batch_per_class);
        for c in classes {
            let pool = &self.members[c];
            let take = self.batch_per_class.min(pool.len());
            rows.extend(index::sample(&mut self.batch_rng, pool.len(), take).into_iter().map(|i| pool[i]));
        }
        rows
    }

    /// One encoder update on a fresh batch using `sampler` for negatives.
    pub fn step(&mut self, sampler: NegativeSampler<'_>) -> Result<StepStats> {
        let rows = self.sample_batch();
        let x = self.train.features().select(Axis(0), &rows);
        let labels: Vec<usize> = rows.iter().map(|&r| self.train.labels()[r]).collect();
        let fwd = self.encoder.forward(x.view())?;
        let emb = fwd.embeddings().view();
        let triplets = build_triplets(&labels, emb, sampler, &mut self.negative_rng)?;
        let report = match self.loss {
            LossKind::Triplet => triplet_loss(emb, &triplets, self.losses.triplet_margin)?,
            LossKind::Contrastive => {
                contrastive_loss(emb, &triplets.to_pairs(), self.losses.contrastive_margin)?
            }
            LossKind::Margin => margin_loss(
                emb,
                &triplets.to_pairs(),
                self.losses.margin_gamma,
                &self.margin,
                self.losses.margin_reduction,
            )?,
        };
        if !report.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss at encoder step {}",
                self.loss,
                self.encoder.step + 1
            )));
        }
        let grads = self.encoder.backward(&fwd, report.grad_embeddings.view())?;
        self.encoder.adam_step(&grads, &self.adam)?;
        if self.loss == LossKind::Margin {
            self.margin.update(report.grad_beta)?;
        }
        Ok(StepStats {
            loss: report.value,
            active: report.active_count,
        })
    }
}

/// One evaluation point of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Policy step index; 0 is the evaluation before any training.
    pub step: usize,
    pub encoder_step: usize,
    pub report: MetricReport,
    pub state: Vec<f64>,
    /// Action code chosen after this evaluation.
    pub action: Option<usize>,
    pub reward: f64,
    /// Distribution in force after the action.
    pub distribution: Option<SamplingDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: AsrConfig,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    /// Validation report at the end of every epoch.
    pub epoch_reports: Vec<MetricReport>,
    pub final_test: MetricReport,
    pub final_beta: Option<f64>,
}

impl RunLog {
    /// Weighted validation metric at every record, starting before training.
    pub fn weighted_trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.report.weighted).collect()
    }

    pub fn reward_sum(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    /// `m_T - m_0`
    pub fn metric_gain(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.report.weighted - a.report.weighted,
            _ => 0.0,
        }
    }

    /// 1-based epoch with the highest value of `metric` (earliest on ties).
    pub fn best_epoch(&self, metric: Option<MetricName>) -> Option<usize> {
        best_epoch(&self.epoch_reports, metric)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            config: self.config.clone(),
            seed: self.seed,
            records: self.records.len(),
            initial_val: self.records.first().map(|r| r.report.clone()).unwrap_or_default(),
            final_val: self.records.last().map(|r| r.report.clone()).unwrap_or_default(),
            reward_sum: self.reward_sum(),
            best_epoch: self.best_epoch(None),
            epoch_reports: self.epoch_reports.clone(),
            final_test: self.final_test.clone(),
            final_beta: self.final_beta,
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: AsrConfig,
    pub seed: u64,
    pub records: usize,
    pub initial_val: MetricReport,
    pub final_val: MetricReport,
    pub reward_sum: f64,
    pub best_epoch: Option<usize>,
    pub epoch_reports: Vec<MetricReport>,
    pub final_test: MetricReport,
    pub final_beta: Option<f64>,
}

/// 1-based index of the best report by `metric` (weighted when `None`).
pub fn best_epoch(reports: &[MetricReport], metric: Option<MetricName>) -> Option<usize> {
    let value = |r: &MetricReport| match metric {
        None => Some(r.weighted),
        Some(m) => r.get(m),
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reports.iter().enumerate() {
        let v = value(r)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Final state of an episode alongside its log.
pub struct EpisodeOutcome {
    pub log: RunLog,
    pub encoder: EncoderParams,
    pub policy: Option<PolicyParams>,
}

fn build_state(mode: StateMode, metric: f64, dist: Option<&SamplingDistribution>, bins: usize, frac: f64) -> Vec<f64> {
    match mode {
        StateMode::Strict => vec![metric],
        StateMode::Augmented => {
            let mut s = Vec::with_capacity(bins + 2);
            s.push(metric);
            match dist {
                Some(d) => s.extend_from_slice(d.weights()),
                None => s.extend(std::iter::repeat_n(0.0, bins)),
            }
            s.push(frac);
            s
        }
    }
}

fn eval_split(encoder: &EncoderParams, ds: &LabeledDataset, weights: &MetricWeights, seed: u64) -> Result<MetricReport> {
    let emb = encoder.embed(ds.features().view())?;
    evaluate(emb.view(), ds.labels(), weights, seed)
}

/// Run one episode and return its log.
pub fn run_episode(cfg: &AsrConfig, splits: &Splits) -> Result<RunLog> {
    run_episode_full(cfg, splits).map(|o| o.log)
}

/// Run one episode, also returning the trained encoder and policy.
pub fn run_episode_full(cfg: &AsrConfig, splits: &Splits) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut trainer = Trainer::new(cfg, &splits.train, seed)?;
    let eval_seed = seed;
    let weights = &cfg.metric_weights;

    let mut dist = match cfg.sampler.is_adaptive() {
        true => {
            let spec = InitialDistributionSpec::preset(cfg.init, cfg.encoder.out_dim, seed);
            Some(init_distribution(&spec, cfg.bins)?)
        }
        false => None,
    };
    let mut agent = match cfg.sampler.algorithm() {
        Some(alg) => {
            let params = PolicyParams::init(
                cfg.state_dim(),
                cfg.policy.hidden,
                Action::count(cfg.bins),
                &mut rng::stream(seed, streams::POLICY_INIT),
            )?;
            Some(PolicyAgent::new(params, cfg.policy, alg)?)
        }
        None => None,
    };
    let mut action_rng = rng::stream(seed, streams::ACTIONS);
    let mut buffer = TrajectoryBuffer::default();

    let steps_per_epoch = trainer.steps_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;

    let report0 = eval_split(&trainer.encoder, &splits.val, weights, eval_seed)?;
    let mut prev_metric = report0.weighted;
    let state0 = build_state(cfg.state_mode, prev_metric, dist.as_ref(), cfg.bins, 0.0);
    // (state, action, logp) awaiting its reward
    let mut pending = None;
    let mut action0 = None;
    if let (Some(agent), Some(d)) = (agent.as_ref(), dist.as_mut()) {
        let (a, logp) = agent.act(&state0, &mut action_rng)?;
        *d = d.apply_action(Action::decode(a, cfg.bins)?, cfg.multiplier)?;
        pending = Some((state0.clone(), a, logp));
        action0 = Some(a);
    }
    let mut records = vec![StepRecord {
        step: 0,
        encoder_step: 0,
        report: report0,
        state: state0,
        action: action0,
        reward: 0.0,
        distribution: dist.clone(),
    }];
    let mut epoch_reports = Vec::with_capacity(cfg.epochs);

    for s in 1..=total_steps {
        let sampler = match cfg.sampler {
            SamplerKind::Random => NegativeSampler::Random,
            SamplerKind::Semihard => NegativeSampler::Semihard {
                gamma: cfg.losses.triplet_margin,
            },
            SamplerKind::Distance => NegativeSampler::DistanceWeighted,
            SamplerKind::AsrReinforce | SamplerKind::AsrPpo => {
                NegativeSampler::Binned(dist.as_ref().expect("adaptive samplers own a distribution"))
            }
        };
        trainer.step(sampler)?;

        let rl_step = s % cfg.inner_iters == 0;
        let epoch_end = s % steps_per_epoch == 0;
        if !rl_step && !epoch_end {
            continue;
        }
        let report = eval_split(&trainer.encoder, &splits.val, weights, eval_seed)?;
        if epoch_end {
            epoch_reports.push(report.clone());
        }
        if !rl_step {
            continue;
        }
        let metric = report.weighted;
        let reward = metric - prev_metric;
        prev_metric = metric;
        let frac = s as f64 / total_steps as f64;
        let state = build_state(cfg.state_mode, metric, dist.as_ref(), cfg.bins, frac);
        let mut action = None;
        if let (Some(agent), Some(d)) = (agent.as_mut(), dist.as_mut()) {
            let (prev_state, prev_action, logp) = pending.take().expect("an action is always pending");
            buffer.push(Transition {
                state: prev_state,
                action: prev_action,
                logp_old: Some(logp),
                reward,
            });
            agent.update(&mut buffer)?;
            let (a, logp) = agent.act(&state, &mut action_rng)?;
            *d = d.apply_action(Action::decode(a, cfg.bins)?, cfg.multiplier)?;
            pending = Some((state.clone(), a, logp));
            action = Some(a);
        }
        records.push(StepRecord {
            step: records.len(),
            encoder_step: s,
            report,
            state,
            action,
            reward,
            distribution: dist.clone(),
        });
    }

    let final_test = eval_split(&trainer.encoder, &splits.test, weights, eval_seed)?;
    let final_beta = (cfg.loss == LossKind::Margin).then_some(trainer.margin.beta);
    Ok(EpisodeOutcome {
        log: RunLog {
            config: cfg.clone(),
            seed,
            records,
            epoch_reports,
            final_test,
            final_beta,
        },
        encoder: trainer.encoder,
        policy: agent.map(|a| a.params),
    })
}

/// Dip-then-recover pattern in a metric trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dip {
    pub index: usize,
    pub depth: f64,
}

/// Reports the global minimum when it lies more than `delta` below the
/// starting value and the trajectory later climbs more than `delta` above it.
pub fn detect_gravity_well(trajectory: &[f64], delta: f64) -> Option<Dip> {
    if trajectory.len() < 3 || !(delta > 0.0) {
        return None;
    }
    let (index, &min) = trajectory
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))?;
    let start = trajectory[0];
    if !(min < start - delta) {
        return None;
    }
    let recovered = trajectory[index + 1..].iter().any(|&v| v > min + delta);
    recovered.then_some(Dip {
        index,
        depth: start - min,
    })
}

/// Source of train/validation/test splits for a given seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Gaussian blobs regenerated from every run seed.
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        val_fraction: f64,
    },
    Csv {
        path: std::path::PathBuf,
        header: bool,
        val_fraction: f64,
    },
}

impl Default for DatasetSpec {
    /// The 8-class, 20-dimensional benchmark.
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: 8,
            per_class: BENCHMARK_PER_CLASS,
            dim: 20,
            spread: BENCHMARK_SPREAD,
            val_fraction: 0.15,
        }
    }
}

/// Rows per class of the default benchmark.
pub const BENCHMARK_PER_CLASS: usize = 100;
/// Noise scale of the default benchmark.
pub const BENCHMARK_SPREAD: f64 = 1.5;
/// Epochs of the default benchmark.
pub const BENCHMARK_EPOCHS: usize = 10;

impl DatasetSpec {
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        match self {
            DatasetSpec::Blobs { classes, per_class, dim, spread, val_fraction } => {
                let ds = gen_gaussian_blobs(*classes, *per_class, *dim, *spread, seed)?;
                Splits::from_dataset(&ds, &SplitSpec { val_fraction: *val_fraction, seed })
            }
            DatasetSpec::Csv { path, header, val_fraction } => {
                let ds = load_csv(path, *header)?.dataset;
                Splits::from_dataset(&ds, &SplitSpec { val_fraction: *val_fraction, seed })
            }
        }
    }
}

/// A named configuration in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub name: String,
    pub config: AsrConfig,
}

impl Strategy {
    pub fn new(config: AsrConfig) -> Self {
        Self {
            name: config.sampler.to_string(),
            config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub loss: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<SummaryRow>,
    /// Per metric, `strategy+loss` labels from best to worst mean.
    pub rankings: Vec<(String, Vec<String>)>,
    /// Logs indexed by strategy, then seed.
    pub logs: Vec<Vec<RunLog>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Comparison {
    pub fn row(&self, strategy: &str, loss: LossKind, metric: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.loss == loss.name() && r.metric == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Run `f` over every (strategy, seed) pair in parallel; results come back
/// grouped by strategy in seed order.
fn fan_out<T, F>(strategies: &[Strategy], seeds: &[u64], mode: Parallelism, f: F) -> Result<Vec<Vec<T>>>
where
    T: Send,
    F: Fn(&Strategy, u64) -> Result<T> + Sync + Send,
{
    let jobs: Vec<(usize, u64)> = (0..strategies.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = par::map_slice(&jobs, mode, |&(i, seed)| {
        f(&strategies[i], seed).map_err(|e| Error::Run {
            config: strategies[i].name.clone(),
            seed,
            source: Box::new(e),
        })
    });
    let mut grouped: Vec<Vec<T>> = (0..strategies.len()).map(|_| Vec::with_capacity(seeds.len())).collect();
    for ((i, _), r) in jobs.iter().zip(results) {
        grouped[*i].push(r?);
    }
    Ok(grouped)
}

/// Run every strategy on every seed and summarize the final test reports.
pub fn compare_strategies(
    strategies: &[Strategy],
    seeds: &[u64],
    data: &DatasetSpec,
    mode: Parallelism,
) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(Error::invalid("comparison needs at least one strategy"));
    }
    if seeds.len() < 2 {
        return Err(Error::invalid("comparison needs at least two seeds"));
    }
    let logs = fan_out(strategies, seeds, mode, |s, seed| {
        let splits = data.splits(seed)?;
        run_episode(&AsrConfig { seed, ..s.config.clone() }, &splits)
    })?;

    let mut rows = Vec::new();
    let metric_names: Vec<String> = logs[0][0].final_test.entries().into_iter().map(|(k, _)| k).collect();
    for (strategy, runs) in strategies.iter().zip(&logs) {
        for metric in &metric_names {
            let values: Vec<f64> = runs
                .iter()
                .map(|log| {
                    log.final_test
                        .entries()
                        .into_iter()
                        .find(|(k, _)| k == metric)
                        .map_or(f64::NAN, |(_, v)| v)
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                strategy: strategy.name.clone(),
                loss: strategy.config.loss.to_string(),
                metric: metric.clone(),
                mean,
                std,
                n_seeds: values.len(),
            });
        }
    }
    let rankings = metric_names
        .iter()
        .map(|metric| {
            let mut entries: Vec<&SummaryRow> = rows.iter().filter(|r| &r.metric == metric).collect();
            entries.sort_by(|a, b| b.mean.total_cmp(&a.mean));
            (
                metric.clone(),
                entries.iter().map(|r| format!("{}+{}", r.strategy, r.loss)).collect(),
            )
        })
        .collect();
    Ok(Comparison { rows, rankings, logs })
}

/// Trajectories and dip statistics for one initial distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGroup {
    pub init: InitKind,
    pub seeds: Vec<u64>,
    pub trajectories: Vec<Vec<f64>>,
    pub dips: Vec<Option<Dip>>,
    pub dip_rate: f64,
    pub final_test: Vec<MetricReport>,
}

/// Run the adaptive sampler from each of the six initial distributions on
/// shared seeds and detect dips in the validation trajectory.
pub fn ablate_init(
    base: &AsrConfig,
    seeds: &[u64],
    data: &DatasetSpec,
    delta: f64,
    mode: Parallelism,
) -> Result<Vec<AblationGroup>> {
    if !base.sampler.is_adaptive() {
        return Err(Error::invalid("initial-distribution ablation needs an adaptive sampler"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let strategies: Vec<Strategy> = InitKind::ALL
        .iter()
        .map(|&init| Strategy {
            name: init.to_string(),
            config: AsrConfig { init, ..base.clone() },
        })
        .collect();
    let logs = fan_out(&strategies, seeds, mode, |s, seed| {
        let splits = data.splits(seed)?;
        run_episode(&AsrConfig { seed, ..s.config.clone() }, &splits)
    })?;
    Ok(InitKind::ALL
        .iter()
        .zip(logs)
        .map(|(&init, runs)| {
            let trajectories: Vec<Vec<f64>> = runs.iter().map(RunLog::weighted_trajectory).collect();
            let dips: Vec<Option<Dip>> = trajectories.iter().map(|t| detect_gravity_well(t, delta)).collect();
            let dip_rate = dips.iter().filter(|d| d.is_some()).count() as f64 / dips.len() as f64;
            AblationGroup {
                init,
                seeds: seeds.to_vec(),
                trajectories,
                dips,
                dip_rate,
                final_test: runs.into_iter().map(|r| r.final_test).collect(),
            }
        })
        .collect())
}

/// Write `init,seed,step,value` rows for every trajectory.
pub fn write_trajectories_csv(groups: &[AblationGroup], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("init,seed,step,weighted\n");
    for g in groups {
        for (seed, traj) in g.seeds.iter().zip(&g.trajectories) {
            for (step, v) in traj.iter().enumerate() {
                out.push_str(&format!("{},{seed},{step},{v}\n", g.init));
            }
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
