//! Synthetic related tasks and client data partitioning.
//!
//! Every task reads the same latent representation `z = tanh(W x)` of a
//! standard-normal input `x`; only the head applied to `z` differs between
//! tasks. A good encoder for one task is therefore useful for the others.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::HeadKind;
use crate::rng;

/// The latent map shared by all tasks of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub head: HeadKind,
    pub metric: MetricKind,
    pub latent: LatentSpec,
    pub head_seed: u64,
    /// Multiplies the task head; 0 gives constant targets.
    pub head_scale: f64,
    /// Standard deviation of additive noise on the head output.
    pub noise: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.latent.input_dim == 0 || self.latent.latent_dim == 0 {
            return Err(Error::invalid("latent dimensions must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!(
                "noise must be finite and >= 0, got {}",
                self.noise
            )));
        }
        if !self.head_scale.is_finite() {
            return Err(Error::invalid("head scale must be finite"));
        }
        let ok = matches!(
            (self.head, self.metric),
            (HeadKind::Regression { .. }, MetricKind::Mse)
                | (
                    HeadKind::Binary,
                    MetricKind::Accuracy | MetricKind::Ap | MetricKind::Odsf
                )
                | (HeadKind::Classification { .. }, MetricKind::Accuracy | MetricKind::Miou)
                | (
                    HeadKind::PerPosition { .. },
                    MetricKind::Accuracy | MetricKind::Miou | MetricKind::Pq
                )
        );
        if !ok {
            return Err(Error::invalid(format!(
                "metric {} does not apply to head {:?}",
                self.metric.name(),
                self.head
            )));
        }
        Ok(())
    }

    /// Class id per sample, for heads that have one.
    pub fn has_sample_labels(&self) -> bool {
        matches!(self.head, HeadKind::Binary | HeadKind::Classification { .. })
    }
}

/// Inputs and targets of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample class ids for binary and categorical targets.
    pub fn sample_labels(&self, head: &HeadKind) -> Result<Vec<usize>> {
        let width = self.targets.len() / self.len();
        let rows = self.targets.data().chunks(width);
        match head {
            HeadKind::Binary => Ok(rows.map(|r| r[0] as usize).collect()),
            HeadKind::Classification { .. } => Ok(rows.map(argmax).collect()),
            _ => Err(Error::invalid("task has no per-sample class label")),
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws `n` samples of a task. Inputs are standard normal; targets are the
/// task head applied to the shared latent plus Gaussian noise of std `noise`.
/// Deterministic in `(spec, n, seed)`.
pub fn generate_task_data(spec: &TaskSpec, n: usize, seed: u64) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    spec.validate()?;
    let (d, l) = (spec.latent.input_dim, spec.latent.latent_dim);
    let latent_map = gaussian_matrix(
        l,
        d,
        1.0 / (d as f64).sqrt(),
        &mut rng::stream(spec.latent.seed, &[rng::tag::LATENT_MAP]),
    );
    let out = spec.head.output_width();
    let head = gaussian_matrix(
        out,
        l,
        spec.head_scale / (l as f64).sqrt(),
        &mut rng::stream(spec.head_seed, &[rng::tag::TASK_HEAD]),
    );

    let mut input_rng = rng::stream(seed, &[rng::tag::TRAIN_DATA]);
    let mut noise_rng = rng::stream(seed, &[rng::tag::NOISE]);
    let inputs: Vec<f64> = (0..n * d).map(|_| input_rng.sample(StandardNormal)).collect();

    let width = spec.head.output_width();
    let mut targets = Vec::with_capacity(n * width);
    let mut z = vec![0.0; l];
    let mut raw = vec![0.0; out];
    for s in 0..n {
        let x = &inputs[s * d..(s + 1) * d];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (w, xv) in latent_map[r * d..(r + 1) * d].iter().zip(x) {
                acc += w * xv;
            }
            *zr = acc.tanh();
        }
        for (o, ro) in raw.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (w, zv) in head[o * l..(o + 1) * l].iter().zip(&z) {
                acc += w * zv;
            }
            let eps: f64 = noise_rng.sample(StandardNormal);
            *ro = acc + spec.noise * eps;
        }
        match spec.head {
            HeadKind::Regression { .. } => targets.extend_from_slice(&raw),
            HeadKind::Binary => targets.push(if raw[0] > 0.0 { 1.0 } else { 0.0 }),
            HeadKind::Classification { classes } => push_one_hot(&mut targets, argmax(&raw), classes),
            HeadKind::PerPosition { positions, classes } => {
                for p in 0..positions {
                    let c = argmax(&raw[p * classes..(p + 1) * classes]);
                    push_one_hot(&mut targets, c, classes);
                }
            }
        }
    }
    Ok(TaskDataset {
        task_id: spec.task_id,
        inputs: Tensor::matrix(n, d, inputs)?,
        targets: Tensor::matrix(n, width, targets)?,
    })
}

fn push_one_hot(out: &mut Vec<f64>, hot: usize, classes: usize) {
    out.extend((0..classes).map(|c| if c == hot { 1.0 } else { 0.0 }));
}

/// One client's slice of a task dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub task_id: u32,
    /// Row indices into the task dataset, ascending.
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    fn from_indices(data: &TaskDataset, client_id: u32, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::invalid(format!("client {client_id} would receive no samples")));
        }
        Ok(Self {
            client_id,
            task_id: data.task_id,
            inputs: data.inputs.select_rows(&indices)?,
            targets: data.targets.select_rows(&indices)?,
            indices,
        })
    }
}

/// Contiguous equal shards; any remainder goes to the last client.
/// Client ids are `first_client_id..first_client_id + clients`.
pub fn partition(data: &TaskDataset, clients: usize, first_client_id: u32) -> Result<Vec<ClientShard>> {
    if clients < 1 {
        return Err(Error::invalid("clients_per_task must be at least 1"));
    }
    let n = data.len();
    if n < clients {
        return Err(Error::invalid(format!("{n} samples cannot cover {clients} clients")));
    }
    let base = n / clients;
    (0..clients)
        .map(|c| {
            let start = c * base;
            let end = if c + 1 == clients { n } else { start + base };
            ClientShard::from_indices(data, first_client_id + c as u32, (start..end).collect())
        })
        .collect()
}

const DIRICHLET_ATTEMPTS: usize = 100;

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Label-skewed split. For every class, the share going to each client is
/// drawn from a symmetric Dirichlet(`alpha`). Draws leaving some client
/// empty are redrawn (bounded number of attempts).
pub fn partition_noniid(
    data: &TaskDataset,
    head: &HeadKind,
    clients: usize,
    alpha: f64,
    first_client_id: u32,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if clients < 1 {
        return Err(Error::invalid("clients_per_task must be at least 1"));
    }
    let labels = data.sample_labels(head)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = rng::stream(seed, &[rng::tag::PARTITION, u64::from(data.task_id)]);
    for _ in 0..DIRICHLET_ATTEMPTS {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(alpha, clients, &mut rng)?;
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).floor() as usize).clamp(start, members.len())
                };
                assigned[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return assigned
                .into_iter()
                .enumerate()
                .map(|(c, idx)| ClientShard::from_indices(data, first_client_id + c as u32, idx))
                .collect();
        }
    }
    Err(Error::invalid(format!(
        "could not draw a dirichlet({alpha}) split without empty clients"
    )))
}

/// Writes a dataset as CSV: `x0..x{d-1}` feature columns then `y0..` target columns.
pub fn write_csv(path: &Path, data: &TaskDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = data.inputs.len() / data.len();
    let m = data.targets.len() / data.len();
    let header: Vec<String> = (0..d)
        .map(|i| format!("x{i}"))
        .chain((0..m).map(|i| format!("y{i}")))
        .collect();
    w.write_record(&header)?;
    for s in 0..data.len() {
        let row: Vec<String> = data.inputs.data()[s * d..(s + 1) * d]
            .iter()
            .chain(&data.targets.data()[s * m..(s + 1) * m])
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path, task_id: u32) -> Result<TaskDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.iter().filter(|h| h.starts_with('y')).count();
    if d + m != header.len() || d == 0 || m == 0 {
        return Err(Error::invalid("dataset CSV header must be x* columns then y* columns"));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {field:?}")))?;
            if i < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = xs.len() / d;
    Ok(TaskDataset {
        task_id,
        inputs: Tensor::matrix(n, d, xs)?,
        targets: Tensor::matrix(n, m, ys)?,
    })
}
