//! Experiment configuration, the outer round loop and run-directory I/O.
//!
//! A run directory holds:
//!
//! - `rounds.jsonl`: one [`RoundRecord`] per line
//! - `summary.csv`: `task_id, mode, best_metric, final_metric, delta_m_percent`
//! - `run.json`: the resolved configuration
//! - `checkpoints/`: final models in the MFED binary format

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, run_round, EncoderWeighting, Mode, RoundContext, RoundRecord, ScheduleConfig, ServerState};
use crate::client::{ClientState, LocalTrainConfig, PenaltyForm};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::{checkpoint, init_params, Architecture, DenseLayer, HeadKind, ModelParams};
use crate::rng;
use crate::taskgen::{generate_task_data, partition, partition_noniid, LatentSpec, TaskDataset, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    #[default]
    Iid,
    /// Label skew with per-class client shares drawn from Dirichlet(`alpha`).
    Dirichlet { alpha: f64 },
}

/// One task of an experiment. All tasks share the experiment's latent map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task_id: u32,
    pub head: HeadKind,
    pub metric: MetricKind,
    pub head_seed: u64,
    #[serde(default = "one")]
    pub head_scale: f64,
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

fn default_validation_samples() -> usize {
    200
}

impl TaskConfig {
    pub fn to_spec(&self, latent: LatentSpec) -> TaskSpec {
        TaskSpec {
            task_id: self.task_id,
            head: self.head,
            metric: self.metric,
            latent,
            head_seed: self.head_seed,
            head_scale: self.head_scale,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Aggregation rounds `T`.
    pub rounds: usize,
    /// Local epochs per round `m`.
    pub local_epochs: usize,
    /// Client step size `alpha`.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Clients per task `N_k`.
    pub clients_per_task: usize,
    pub samples_per_client: usize,
    #[serde(default = "default_validation_samples")]
    pub validation_samples: usize,
    #[serde(default)]
    pub penalty: PenaltyForm,
    #[serde(default)]
    pub partition: Partition,
    #[serde(default)]
    pub encoder_weighting: EncoderWeighting,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Hidden encoder layers; defaults to 32 and 16 tanh units.
    #[serde(default)]
    pub encoder: Option<Vec<DenseLayer>>,
    pub latent: LatentSpec,
    pub tasks: Vec<TaskConfig>,
    /// Run directory of a local-mode run used as the Δ_m reference.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The four-task shared-latent benchmark: regression, binary detection,
    /// classification and per-position segmentation.
    pub fn default_benchmark(seed: u64, mode: Mode) -> Self {
        let task = |task_id: u32, head: HeadKind, metric: MetricKind| TaskConfig {
            task_id,
            head,
            metric,
            head_seed: 1000 + u64::from(task_id),
            head_scale: 2.0,
            noise: 0.1,
        };
        Self {
            seed,
            mode,
            rounds: 20,
            local_epochs: 5,
            learning_rate: 0.05,
            batch_size: 8,
            clients_per_task: 5,
            samples_per_client: 16,
            validation_samples: 200,
            penalty: PenaltyForm::Squared,
            partition: Partition::Iid,
            encoder_weighting: EncoderWeighting::Uniform,
            schedule: ScheduleConfig::default(),
            encoder: None,
            latent: LatentSpec {
                input_dim: 8,
                latent_dim: 4,
                seed: 7,
            },
            tasks: vec![
                task(0, HeadKind::Regression { outputs: 2 }, MetricKind::Mse),
                task(1, HeadKind::Binary, MetricKind::Ap),
                task(2, HeadKind::Classification { classes: 4 }, MetricKind::Accuracy),
                task(
                    3,
                    HeadKind::PerPosition {
                        positions: 8,
                        classes: 3,
                    },
                    MetricKind::Miou,
                ),
            ],
            baseline: None,
            output_dir: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match &self.encoder {
            Some(layers) => Architecture {
                input_dim: self.latent.input_dim,
                encoder: layers.clone(),
            },
            None => Architecture::default_for(self.latent.input_dim),
        }
    }

    pub fn task_specs(&self) -> BTreeMap<u32, TaskSpec> {
        self.tasks.iter().map(|t| (t.task_id, t.to_spec(self.latent))).collect()
    }

    pub fn train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            lambda: 0.0,
            learning_rate: self.learning_rate,
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            penalty: self.penalty,
        }
    }

    /// Checks every field; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, what: &str| Err(Error::invalid(format!("{name}: {what}")));
        if self.local_epochs < 1 {
            return field("local_epochs (m)", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate (alpha)", "must be positive and finite");
        }
        if self.batch_size < 1 {
            return field("batch_size", "must be at least 1");
        }
        if self.clients_per_task < 1 {
            return field("clients_per_task (N_k)", "must be at least 1");
        }
        if self.samples_per_client < 1 {
            return field("samples_per_client", "must be at least 1");
        }
        if self.validation_samples < 1 {
            return field("validation_samples", "must be at least 1");
        }
        if self.latent.input_dim < 1 || self.latent.latent_dim < 1 {
            return field("latent", "input_dim and latent_dim must be at least 1");
        }
        if self.tasks.is_empty() {
            return field("tasks (K)", "at least one task is required");
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id) {
                return field("tasks", &format!("duplicate task_id {}", t.task_id));
            }
            t.to_spec(self.latent)
                .validate()
                .map_err(|e| Error::invalid(format!("tasks[task_id={}]: {e}", t.task_id)))?;
            if let Partition::Dirichlet { .. } = self.partition {
                if !matches!(t.head, HeadKind::Binary | HeadKind::Classification { .. }) {
                    return field(
                        "partition",
                        &format!("dirichlet split needs per-sample labels, task {} has none", t.task_id),
                    );
                }
            }
        }
        if let Partition::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return field("partition.dirichlet.alpha", "must be positive and finite");
            }
        }
        self.schedule.validate()?;
        self.architecture()
            .validate()
            .map_err(|e| Error::invalid(format!("encoder: {e}")))?;
        Ok(())
    }
}

/// Built experiment: data, clients and server state.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: Architecture,
    pub tasks: BTreeMap<u32, TaskSpec>,
    pub validation: BTreeMap<u32, TaskDataset>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    task_weights: BTreeMap<u32, f64>,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture();
        let tasks = config.task_specs();
        let seed = config.seed;
        let mut validation = BTreeMap::new();
        let mut clients = Vec::new();
        let mut task_models = BTreeMap::new();
        let mut task_weights = BTreeMap::new();
        for (k, (&task_id, spec)) in tasks.iter().enumerate() {
            let n = config.clients_per_task * config.samples_per_client;
            let train = generate_task_data(
                spec,
                n,
                rng::derive_seed(seed, &[rng::tag::TRAIN_DATA, u64::from(task_id)]),
            )?;
            let val = generate_task_data(
                spec,
                config.validation_samples,
                rng::derive_seed(seed, &[rng::tag::VALIDATION_DATA, u64::from(task_id)]),
            )?;
            let first_id =
                u32::try_from(k * config.clients_per_task).map_err(|_| Error::invalid("too many clients"))?;
            let shards = match config.partition {
                Partition::Iid => partition(&train, config.clients_per_task, first_id)?,
                Partition::Dirichlet { alpha } => {
                    partition_noniid(&train, &spec.head, config.clients_per_task, alpha, first_id, seed)?
                }
            };
            let init = init_params(&arch, &spec.head, task_id, seed)?;
            for shard in shards {
                clients.push(ClientState {
                    client_id: shard.client_id,
                    task_id,
                    shard,
                    params: init.clone(),
                });
            }
            task_weights.insert(task_id, n as f64);
            task_models.insert(task_id, init);
            validation.insert(task_id, val);
        }
        let server = ServerState::new(task_models, config.schedule, config.encoder_weighting, &task_weights)?;
        Ok(Self {
            config,
            arch,
            tasks,
            validation,
            clients,
            server,
            task_weights,
        })
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let ctx = RoundContext {
            mode: self.config.mode,
            arch: &self.arch,
            tasks: &self.tasks,
            validation: &self.validation,
            train: self.config.train_config(),
            weighting: self.config.encoder_weighting,
            task_weights: self.task_weights.clone(),
            seed: self.config.seed,
        };
        run_round(&mut self.server, &mut self.clients, &ctx)
    }

    /// Current validation metric per task. In local mode this is the mean
    /// over the task's clients.
    pub fn task_metrics(&self) -> Result<BTreeMap<u32, f64>> {
        let mut out = BTreeMap::new();
        for (&task_id, spec) in &self.tasks {
            let val = &self.validation[&task_id];
            let value = match self.config.mode {
                Mode::Local => {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for c in self.clients.iter().filter(|c| c.task_id == task_id) {
                        sum += evaluate(&c.params, &self.arch, spec, val)?;
                        count += 1;
                    }
                    sum / count.max(1) as f64
                }
                Mode::Fedavg | Mode::Mfed => evaluate(&self.server.task_models[&task_id], &self.arch, spec, val)?,
            };
            out.insert(task_id, value);
        }
        Ok(out)
    }

    /// Writes the current models into `dir`.
    pub fn write_checkpoints(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        match self.config.mode {
            Mode::Local => {
                for c in &self.clients {
                    checkpoint::write(&dir.join(format!("client_{}.mfed", c.client_id)), &c.params)?;
                }
            }
            Mode::Fedavg | Mode::Mfed => {
                for (task_id, params) in &self.server.task_models {
                    checkpoint::write(&dir.join(format!("task_{task_id}.mfed")), params)?;
                }
            }
        }
        let g = ModelParams::encoder_only(self.server.global_encoder.clone(), self.arch.encoder_layout())?;
        checkpoint::write(&dir.join("global_encoder.mfed"), &g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: u32,
    pub mode: Mode,
    pub best_metric: f64,
    pub final_metric: f64,
    pub delta_m_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub records: Vec<RoundRecord>,
    pub tasks: Vec<TaskSummary>,
    /// Mean of the per-task relative improvements, when all are defined.
    pub delta_m: Option<f64>,
}

/// Relative improvement of `value` over `baseline` in percent, signed so
/// that positive always means better.
pub fn relative_improvement(metric: MetricKind, value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        return (value == 0.0).then_some(0.0);
    }
    let diff = if metric.higher_is_better() {
        value - baseline
    } else {
        baseline - value
    };
    Some(100.0 * diff / baseline.abs())
}

fn mean_delta(tasks: &[TaskSummary]) -> Option<f64> {
    let values: Option<Vec<f64>> = tasks.iter().map(|t| t.delta_m_percent).collect();
    let values = values?;
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs all rounds and writes the run directory. `threads = None` uses
/// rayon's default pool size.
pub fn run_experiment(config: ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    config.validate()?;
    let baseline = match &config.baseline {
        Some(dir) => Some(
            read_summary(dir)?
                .into_iter()
                .map(|t| (t.task_id, t.final_metric))
                .collect::<BTreeMap<_, _>>(),
        ),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let mut exp = Experiment::build(config)?;
    fs::create_dir_all(out_dir)?;
    serde_json::to_writer_pretty(File::create(out_dir.join("run.json"))?, &exp.config)?;
    let mut log = BufWriter::new(File::create(out_dir.join("rounds.jsonl"))?);
    let mut records = Vec::with_capacity(exp.config.rounds);
    for _ in 0..exp.config.rounds {
        let record = pool.install(|| exp.run_round())?;
        log::info!(
            "round {} lambda={:.4} metrics={:?}",
            record.round,
            record.lambda,
            record.task_metrics
        );
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        records.push(record);
    }
    log.flush()?;
    exp.write_checkpoints(&out_dir.join("checkpoints"))?;

    let final_metrics = exp.task_metrics()?;
    let mut tasks = Vec::new();
    for (&task_id, spec) in &exp.tasks {
        let final_metric = final_metrics[&task_id];
        let key = task_id.to_string();
        let best_metric =
            records
                .iter()
                .filter_map(|r| r.task_metrics.get(&key).copied())
                .fold(final_metric, |best, v| {
                    if spec.metric.higher_is_better() {
                        best.max(v)
                    } else {
                        best.min(v)
                    }
                });
        let delta_m_percent = match (&baseline, exp.config.mode) {
            (Some(b), _) => b
                .get(&task_id)
                .and_then(|&base| relative_improvement(spec.metric, final_metric, base)),
            (None, Mode::Local) => Some(0.0),
            (None, _) => None,
        };
        tasks.push(TaskSummary {
            task_id,
            mode: exp.config.mode,
            best_metric,
            final_metric,
            delta_m_percent,
        });
    }
    write_summary(&out_dir.join("summary.csv"), &tasks)?;
    let delta_m = mean_delta(&tasks);
    Ok(RunSummary {
        records,
        tasks,
        delta_m,
    })
}

fn write_summary(path: &Path, tasks: &[TaskSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in tasks {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::invalid(format!("missing file {}", path.display())))
    }
}

/// Reads `summary.csv` from a run directory.
pub fn read_summary(run_dir: &Path) -> Result<Vec<TaskSummary>> {
    let path = require(run_dir.join("summary.csv"))?;
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Reads `rounds.jsonl` from a run directory.
pub fn read_rounds(run_dir: &Path) -> Result<Vec<RoundRecord>> {
    let path = require(run_dir.join("rounds.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// The resolved configuration stored with a run.
pub type RunManifest = ExperimentConfig;

/// Reads `run.json` from a run directory.
pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = require(run_dir.join("run.json"))?;
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
