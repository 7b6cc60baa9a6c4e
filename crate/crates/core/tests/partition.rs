use std::collections::BTreeSet;

use mfed_core::server::{ExperimentConfig, Mode};
use mfed_core::taskgen::{generate_task_data, partition_noniid, ClientShard, TaskDataset};

const CLIENTS: usize = 5;

fn classification_data(seed: u64, n: usize) -> (TaskDataset, mfed_core::model::HeadKind) {
    let spec = ExperimentConfig::default_benchmark(0, Mode::Mfed).task_specs()[&2].clone();
    (generate_task_data(&spec, n, seed).unwrap(), spec.head)
}

fn class_counts(labels: &[usize], shard: &ClientShard, classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &i in &shard.indices {
        counts[labels[i]] += 1;
    }
    counts
}

#[test]
fn shards_are_disjoint_and_cover() {
    let (data, head) = classification_data(1, 300);
    for alpha in [0.1, 1.0, 100.0] {
        let shards = partition_noniid(&data, &head, CLIENTS, alpha, 10, 3).unwrap();
        let mut seen = BTreeSet::new();
        for (c, s) in shards.iter().enumerate() {
            assert_eq!(s.client_id, 10 + c as u32);
            for &i in &s.indices {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), data.len());
    }
}

#[test]
fn huge_alpha_gives_near_global_proportions() {
    for seed in 0..20 {
        let (data, head) = classification_data(seed, 2000);
        let labels = data.sample_labels(&head).unwrap();
        let classes = labels.iter().max().unwrap() + 1;
        let mut global = vec![0usize; classes];
        for &l in &labels {
            global[l] += 1;
        }
        let shards = partition_noniid(&data, &head, CLIENTS, 1e6, 0, seed).unwrap();
        for s in &shards {
            let counts = class_counts(&labels, s, classes);
            for (c, (&have, &all)) in counts.iter().zip(&global).enumerate() {
                let share = have as f64 / s.size() as f64;
                let want = all as f64 / labels.len() as f64;
                assert!(
                    (share - want).abs() < 0.05,
                    "seed {seed} client {} class {c}: {share} vs {want}",
                    s.client_id
                );
            }
        }
    }
}

#[test]
fn small_alpha_concentrates_mass() {
    let mut dominant: Vec<f64> = (0..20)
        .map(|seed| {
            let (data, head) = classification_data(seed, 400);
            let labels = data.sample_labels(&head).unwrap();
            let classes = labels.iter().max().unwrap() + 1;
            partition_noniid(&data, &head, CLIENTS, 0.1, 0, seed)
                .unwrap()
                .iter()
                .map(|s| *class_counts(&labels, s, classes).iter().max().unwrap() as f64 / s.size() as f64)
                .fold(0.0, f64::max)
        })
        .collect();
    dominant.sort_by(f64::total_cmp);
    let median = (dominant[9] + dominant[10]) / 2.0;
    assert!(median > 0.6, "median dominant share {median}");
}

#[test]
fn non_positive_alpha_is_rejected() {
    let (data, head) = classification_data(0, 50);
    assert!(partition_noniid(&data, &head, CLIENTS, 0.0, 0, 0).is_err());
    assert!(partition_noniid(&data, &head, CLIENTS, -1.0, 0, 0).is_err());
}
