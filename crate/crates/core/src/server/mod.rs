//! Round orchestration: distribute task models and the global encoder,
//! collect client deltas, aggregate within each task, then aggregate the
//! task encoders into the new global encoder.

mod eval;
mod experiment;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, LocalReport, LocalTrainConfig};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, ParamVector};
use crate::taskgen::{TaskDataset, TaskSpec};

pub use eval::evaluate;
pub use experiment::{
    read_manifest, read_rounds, read_summary, relative_improvement, run_experiment, Experiment, ExperimentConfig,
    Partition, RunManifest, RunSummary, TaskConfig, TaskSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every client trains on its own shard; nothing is aggregated.
    Local,
    /// Per-task federated averaging; the proximity weight is held at 0.
    Fedavg,
    /// Per-task averaging plus the cross-task global encoder penalty.
    Mfed,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Fedavg => "fedavg",
            Mode::Mfed => "mfed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderWeighting {
    /// Every task counts equally.
    #[default]
    Uniform,
    /// Tasks weighted by their total training sample count.
    DataWeighted,
}

/// Growth schedule of the proximity weight λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda_0: f64,
    pub growth: f64,
    pub lambda_max: f64,
    #[serde(default = "default_true")]
    pub cold_start: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda_0: 0.01,
            growth: 1.3,
            lambda_max: 1.0,
            cold_start: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_0 >= 0.0 && self.lambda_0.is_finite()) {
            return Err(Error::invalid("schedule.lambda_0 must be finite and >= 0"));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(Error::invalid("schedule.growth (gamma) must be finite and >= 1"));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::invalid("schedule.lambda_max must be finite and > 0"));
        }
        if self.lambda_0 > self.lambda_max {
            return Err(Error::invalid("schedule.lambda_0 must not exceed schedule.lambda_max"));
        }
        Ok(())
    }
}

/// `min(λ_0 γ^t, λ_max)`, or 0 in round 0 when `cold_start` is set.
pub fn lambda_at(schedule: &ScheduleConfig, t: usize) -> f64 {
    if schedule.cold_start && t == 0 {
        return 0.0;
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    (schedule.lambda_0 * schedule.growth.powi(exp)).min(schedule.lambda_max)
}

/// `base + Σ_i (S_i / S) δ_i` with the sum taken in ascending client id.
pub fn aggregate_task(base: &ModelParams, reports: &[LocalReport]) -> Result<ModelParams> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty report list"))?;
    if let Some(r) = reports.iter().find(|r| r.task_id != first.task_id) {
        return Err(Error::invalid(format!(
            "reports mix tasks {} and {}",
            first.task_id, r.task_id
        )));
    }
    let n = base.total_len();
    if let Some(r) = reports.iter().find(|r| r.delta.len() != n) {
        return Err(Error::LengthMismatch {
            what: "client delta",
            expected: n,
            actual: r.delta.len(),
        });
    }
    let mut ordered: Vec<&LocalReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.client_id);
    let total: usize = ordered.iter().map(|r| r.sample_count).sum();
    if total == 0 {
        return Err(Error::invalid("reports carry no samples"));
    }
    let total = total as f64;

    let w0 = ordered[0].sample_count as f64 / total;
    let mut acc: Vec<f64> = ordered[0].delta.iter().map(|d| w0 * d).collect();
    for r in &ordered[1..] {
        let w = r.sample_count as f64 / total;
        for (a, d) in acc.iter_mut().zip(r.delta.iter()) {
            *a += w * d;
        }
    }
    let merged: Vec<f64> = base.flat().iter().zip(&acc).map(|(b, a)| b + a).collect();
    base.with_flat(&merged)
}

/// Uniform mean of the task encoders, summed in the given order.
pub fn aggregate_encoder(task_models: &[&ModelParams]) -> Result<ParamVector> {
    let first = check_encoders(task_models)?;
    let mut acc = first.encoder.to_vec();
    for m in &task_models[1..] {
        for (a, v) in acc.iter_mut().zip(m.encoder.iter()) {
            *a += v;
        }
    }
    let k = task_models.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect::<Vec<_>>().into())
}

/// Weighted mean of the task encoders; weights are normalized to sum to 1.
pub fn aggregate_encoder_weighted(task_models: &[&ModelParams], weights: &[f64]) -> Result<ParamVector> {
    check_encoders(task_models)?;
    if weights.len() != task_models.len() {
        return Err(Error::LengthMismatch {
            what: "encoder weights",
            expected: task_models.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("encoder weights must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("encoder weights sum to zero"));
    }
    let mut acc = vec![0.0; task_models[0].encoder.len()];
    for (m, w) in task_models.iter().zip(weights) {
        let w = w / total;
        for (a, v) in acc.iter_mut().zip(m.encoder.iter()) {
            *a += w * v;
        }
    }
    Ok(acc.into())
}

fn check_encoders<'a>(task_models: &[&'a ModelParams]) -> Result<&'a ModelParams> {
    let first = *task_models
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero task encoders"))?;
    if task_models.iter().any(|m| m.encoder_layout != first.encoder_layout) {
        return Err(Error::invalid("task encoders have different layouts"));
    }
    Ok(first)
}

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub task_models: BTreeMap<u32, ModelParams>,
    pub global_encoder: ParamVector,
    pub round: usize,
    pub schedule: ScheduleConfig,
}

impl ServerState {
    /// Starts from the given task models with `g` set to the aggregate of
    /// their encoders.
    pub fn new(
        task_models: BTreeMap<u32, ModelParams>,
        schedule: ScheduleConfig,
        weighting: EncoderWeighting,
        task_weights: &BTreeMap<u32, f64>,
    ) -> Result<Self> {
        schedule.validate()?;
        let global_encoder = combine_encoders(&task_models, weighting, task_weights)?;
        Ok(Self {
            task_models,
            global_encoder,
            round: 0,
            schedule,
        })
    }
}

fn combine_encoders(
    task_models: &BTreeMap<u32, ModelParams>,
    weighting: EncoderWeighting,
    task_weights: &BTreeMap<u32, f64>,
) -> Result<ParamVector> {
    let models: Vec<&ModelParams> = task_models.values().collect();
    match weighting {
        EncoderWeighting::Uniform => aggregate_encoder(&models),
        EncoderWeighting::DataWeighted => {
            let weights = task_models
                .keys()
                .map(|id| {
                    task_weights
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("no weight for task {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_encoder_weighted(&models, &weights)
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda: f64,
    /// Validation metric per task, keyed by task id.
    pub task_metrics: BTreeMap<String, f64>,
    /// Final local task loss per client, ascending client id.
    pub per_client_loss: Vec<f64>,
    /// `‖w_enc − g‖` per client after local training, against the `g`
    /// distributed in this round.
    pub per_client_drift: Vec<f64>,
}

/// Everything a round needs besides the mutable state.
pub struct RoundContext<'a> {
    pub mode: Mode,
    pub arch: &'a Architecture,
    pub tasks: &'a BTreeMap<u32, TaskSpec>,
    pub validation: &'a BTreeMap<u32, TaskDataset>,
    pub train: LocalTrainConfig,
    pub weighting: EncoderWeighting,
    /// Training samples per task, used by data-weighted encoder aggregation.
    pub task_weights: BTreeMap<u32, f64>,
    pub seed: u64,
}

/// Runs one round over all clients. On error neither `server` nor
/// `clients` is modified.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState], ctx: &RoundContext<'_>) -> Result<RoundRecord> {
    let t = server.round;
    let lambda = match ctx.mode {
        Mode::Mfed => lambda_at(&server.schedule, t),
        Mode::Fedavg | Mode::Local => 0.0,
    };
    let cfg = LocalTrainConfig { lambda, ..ctx.train };
    if let Some(c) = clients.iter().find(|c| !server.task_models.contains_key(&c.task_id)) {
        return Err(Error::invalid(format!(
            "client {} belongs to unknown task {}",
            c.client_id, c.task_id
        )));
    }

    let g = &server.global_encoder;
    let outcomes: Vec<(ModelParams, LocalReport)> = clients
        .par_iter()
        .map(|c| {
            let head = &ctx.tasks[&c.task_id].head;
            let received = match ctx.mode {
                Mode::Local => &c.params,
                Mode::Fedavg | Mode::Mfed => &server.task_models[&c.task_id],
            };
            c.local_train(ctx.arch, head, received, g, &cfg, ctx.seed, t)
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].client_id);
    let per_client_loss = order.iter().map(|&i| outcomes[i].1.final_loss).collect();
    let per_client_drift = order.iter().map(|&i| outcomes[i].1.drift_after).collect();

    let (task_models, global_encoder, task_metrics) = match ctx.mode {
        Mode::Local => {
            let mut metrics = BTreeMap::new();
            for (&task_id, spec) in ctx.tasks {
                let mut sum = 0.0;
                let mut count = 0usize;
                for (c, (params, _)) in clients.iter().zip(&outcomes) {
                    if c.task_id == task_id {
                        sum += evaluate(params, ctx.arch, spec, &ctx.validation[&task_id])?;
                        count += 1;
                    }
                }
                if count > 0 {
                    metrics.insert(task_id.to_string(), sum / count as f64);
                }
            }
            (server.task_models.clone(), server.global_encoder.clone(), metrics)
        }
        Mode::Fedavg | Mode::Mfed => {
            let mut models = BTreeMap::new();
            let mut metrics = BTreeMap::new();
            for (&task_id, base) in &server.task_models {
                let reports: Vec<LocalReport> = outcomes
                    .iter()
                    .filter(|(_, r)| r.task_id == task_id)
                    .map(|(_, r)| r.clone())
                    .collect();
                let merged = if reports.is_empty() {
                    base.clone()
                } else {
                    aggregate_task(base, &reports)?
                };
                let value = evaluate(&merged, ctx.arch, &ctx.tasks[&task_id], &ctx.validation[&task_id])?;
                metrics.insert(task_id.to_string(), value);
                models.insert(task_id, merged);
            }
            let g = combine_encoders(&models, ctx.weighting, &ctx.task_weights)?;
            (models, g, metrics)
        }
    };

    for (c, (params, _)) in clients.iter_mut().zip(outcomes) {
        c.params = params;
    }
    server.task_models = task_models;
    server.global_encoder = global_encoder;
    server.round += 1;
    Ok(RoundRecord {
        round: t,
        lambda,
        task_metrics,
        per_client_loss,
        per_client_drift,
    })
}
