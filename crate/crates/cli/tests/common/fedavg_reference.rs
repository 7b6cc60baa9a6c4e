//! Plain FedAvg written directly against the model and data primitives.
//!
//! Only data generation, initialization and evaluation are shared with the
//! library; local SGD, batching, delta upload and weighted averaging are
//! spelled out here so that the library's round logic can be compared
//! against them.

use std::collections::BTreeMap;

use mfed_core::model::{self, ModelParams};
use mfed_core::rng;
use mfed_core::server::{evaluate, Experiment, ExperimentConfig, RoundRecord};
use rand::seq::SliceRandom;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Runs `config.rounds` FedAvg rounds and returns one record per round.
pub fn run(config: ExperimentConfig) -> Vec<RoundRecord> {
    let exp = Experiment::build(config).expect("build experiment");
    let cfg = &exp.config;
    let mut models: BTreeMap<u32, ModelParams> = exp.server.task_models.clone();
    let mut clients: Vec<_> = exp.clients.iter().collect();
    clients.sort_by_key(|c| c.client_id);

    let mut records = Vec::new();
    for t in 0..cfg.rounds {
        // The global encoder only enters through the drift column.
        let k = models.len() as f64;
        let mut g: Vec<f64> = models.values().next().unwrap().encoder.to_vec();
        for m in models.values().skip(1) {
            for (a, v) in g.iter_mut().zip(m.encoder.iter()) {
                *a += v;
            }
        }
        for a in &mut g {
            *a /= k;
        }

        let mut uploads: BTreeMap<u32, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
        let mut losses = Vec::new();
        let mut drifts = Vec::new();
        for c in &clients {
            let head = &exp.tasks[&c.task_id].head;
            let received = &models[&c.task_id];
            let received_flat = received.flat();
            let mut w = received_flat.clone();
            let n = c.shard.size();
            let mut stream = rng::stream(cfg.seed, &[rng::tag::CLIENT_ROUND, u64::from(c.client_id), t as u64]);
            for _ in 0..cfg.local_epochs {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut stream);
                for batch in order.chunks(cfg.batch_size) {
                    let x = c.shard.inputs.select_rows(batch).unwrap();
                    let y = c.shard.targets.select_rows(batch).unwrap();
                    let current = received.with_flat(&w).unwrap();
                    let (_, grad) = model::loss_and_grad(&current, &exp.arch, head, &x, &y).unwrap();
                    for (p, gv) in w.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * gv;
                    }
                }
            }
            let delta: Vec<f64> = w.iter().zip(&received_flat).map(|(a, b)| a - b).collect();
            let local: Vec<f64> = received_flat.iter().zip(&delta).map(|(b, d)| b + d).collect();
            let local = received.with_flat(&local).unwrap();
            let all: Vec<usize> = (0..n).collect();
            let x = c.shard.inputs.select_rows(&all).unwrap();
            let y = c.shard.targets.select_rows(&all).unwrap();
            losses.push(model::task_loss(&local, &exp.arch, head, &x, &y).unwrap());
            drifts.push(distance(&local.encoder, &g));
            uploads.entry(c.task_id).or_default().push((n, delta));
        }

        let mut metrics = BTreeMap::new();
        for (task_id, ups) in uploads {
            let total: usize = ups.iter().map(|(n, _)| n).sum();
            let total = total as f64;
            let mut acc: Vec<f64> = ups[0].1.iter().map(|d| ups[0].0 as f64 / total * d).collect();
            for (n, delta) in &ups[1..] {
                let weight = *n as f64 / total;
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += weight * d;
                }
            }
            let base = &models[&task_id];
            let merged: Vec<f64> = base.flat().iter().zip(&acc).map(|(b, a)| b + a).collect();
            let merged = base.with_flat(&merged).unwrap();
            let value = evaluate(&merged, &exp.arch, &exp.tasks[&task_id], &exp.validation[&task_id]).unwrap();
            metrics.insert(task_id.to_string(), value);
            models.insert(task_id, merged);
        }
        records.push(RoundRecord {
            round: t,
            lambda: 0.0,
            task_metrics: metrics,
            per_client_loss: losses,
            per_client_drift: drifts,
        });
    }
    records
}
