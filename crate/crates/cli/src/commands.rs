//! `run`, `compare`, `rate-check` and `plot-data`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use mfed_core::convergence::{self, RateCheck, RateFn};
use mfed_core::metrics::MetricKind;
use mfed_core::server::{self, ExperimentConfig, Mode, RunSummary};

use crate::config::{self, RateCheckConfig};
use crate::{exit, CliError};

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

const DEFAULT_RUN_DIR: &str = "mfed-run";

/// Runs an experiment and returns its summary. The run directory comes from
/// `--out`, then the config's `output_dir`, then `./mfed-run`.
pub fn cmd_run(config_path: &Path, opts: &GlobalOpts) -> Result<(PathBuf, RunSummary), CliError> {
    let cfg = config::load_experiment(config_path)?;
    run_config(cfg, opts)
}

pub fn run_config(mut cfg: ExperimentConfig, opts: &GlobalOpts) -> Result<(PathBuf, RunSummary), CliError> {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::config(e.into()))?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    let summary = server::run_experiment(cfg, &out, opts.threads)?;
    Ok((out, summary))
}

fn metric_names(dir: &Path) -> BTreeMap<u32, MetricKind> {
    match server::read_manifest(dir) {
        Ok(cfg) => cfg.tasks.iter().map(|t| (t.task_id, t.metric)).collect(),
        Err(e) => {
            log::warn!("{}: {e}; assuming higher-is-better metrics", dir.display());
            BTreeMap::new()
        }
    }
}

fn fmt_delta(d: Option<f64>) -> String {
    d.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}"))
}

pub fn render_summary(dir: &Path, summary: &RunSummary) -> String {
    let metrics = metric_names(dir);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8}{:<10}{:>12}{:>12}{:>12}",
        "task", "metric", "best", "final", "delta_m%"
    );
    for t in &summary.tasks {
        let name = metrics.get(&t.task_id).map_or("?", |m| m.name());
        let _ = writeln!(
            s,
            "{:<8}{:<10}{:>12.4}{:>12.4}{:>12}",
            t.task_id,
            name,
            t.best_metric,
            t.final_metric,
            fmt_delta(t.delta_m_percent)
        );
    }
    let _ = writeln!(s, "mean delta_m%: {}", fmt_delta(summary.delta_m));
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub mode: Mode,
    /// Final metric per task, in the order of [`Comparison::tasks`].
    pub finals: Vec<f64>,
    /// Mean relative improvement over the first run, in percent.
    pub delta_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub tasks: Vec<(u32, Option<MetricKind>)>,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    /// Index of the best row for each task.
    pub fn best(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(j, (_, metric))| {
                let higher = metric.is_none_or(|m| m.higher_is_better());
                let mut best = 0;
                for (i, row) in self.rows.iter().enumerate() {
                    let (v, b) = (row.finals[j], self.rows[best].finals[j]);
                    if (higher && v > b) || (!higher && v < b) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let best = self.best();
        let mut s = String::new();
        let _ = write!(s, "{:<24}{:<8}", "run", "mode");
        for (id, metric) in &self.tasks {
            let head = format!("t{id}:{}", metric.map_or("?", |m| m.name()));
            let _ = write!(s, "{head:>14}");
        }
        let _ = writeln!(s, "{:>12}", "delta_m%");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<24}{:<8}", row.label, row.mode.name());
            for (j, v) in row.finals.iter().enumerate() {
                let mark = if best[j] == i { "*" } else { " " };
                let _ = write!(s, "{:>13.4}{mark}", v);
            }
            let _ = writeln!(s, "{:>12}", fmt_delta(row.delta_m));
        }
        s
    }
}

/// Side-by-side final metrics of several runs with Δ_m against the first.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::config(anyhow!("compare needs at least two run directories")));
    }
    let mut summaries = Vec::new();
    for d in dirs {
        let rows = server::read_summary(d).map_err(|e| CliError::from(e).context(d.display().to_string()))?;
        summaries.push(rows);
    }
    let ids = |rows: &[server::TaskSummary]| rows.iter().map(|r| r.task_id).collect::<Vec<_>>();
    let first_ids = ids(&summaries[0]);
    for (d, rows) in dirs.iter().zip(&summaries).skip(1) {
        if ids(rows) != first_ids {
            return Err(CliError::config(anyhow!(
                "{} has tasks {:?}, expected {:?}",
                d.display(),
                ids(rows),
                first_ids
            )));
        }
    }
    let metrics = metric_names(&dirs[0]);
    let tasks: Vec<(u32, Option<MetricKind>)> = first_ids.iter().map(|id| (*id, metrics.get(id).copied())).collect();
    let baseline: Vec<f64> = summaries[0].iter().map(|r| r.final_metric).collect();
    let rows = dirs
        .iter()
        .zip(&summaries)
        .map(|(d, rows)| {
            let finals: Vec<f64> = rows.iter().map(|r| r.final_metric).collect();
            let deltas: Option<Vec<f64>> = tasks
                .iter()
                .zip(finals.iter().zip(&baseline))
                .map(|((_, metric), (&v, &b))| {
                    server::relative_improvement(metric.unwrap_or(MetricKind::Accuracy), v, b)
                })
                .collect();
            CompareRow {
                label: d
                    .file_name()
                    .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
                mode: rows[0].mode,
                delta_m: deltas.map(|v| v.iter().sum::<f64>() / v.len() as f64),
                finals,
            }
        })
        .collect();
    Ok(Comparison { tasks, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub a: f64,
    pub stochastic: RateCheck,
    pub deterministic: RateCheck,
    pub gradient_bound: f64,
    pub displacement: f64,
    pub csv: PathBuf,
}

impl RateReport {
    pub fn pass(&self) -> bool {
        self.stochastic.pass && self.deterministic.pass
    }

    pub fn render(&self) -> String {
        let line = |name: &str, c: &RateCheck| {
            format!(
                "{name:<14} C_fit={:.4e} early={:.4e} late={:.4e} {}\n",
                c.c_fit,
                c.c_early,
                c.c_late,
                if c.pass { "PASS" } else { "FAIL" }
            )
        };
        let mut s = format!(
            "A={:.6} G(measured)={:.4} M(measured)={:.4}\n",
            self.a, self.gradient_bound, self.displacement
        );
        s.push_str(&line("stochastic", &self.stochastic));
        s.push_str(&line("deterministic", &self.deterministic));
        let _ = writeln!(s, "rate report: {}", self.csv.display());
        s
    }
}

/// Runs the convex harness twice (noisy Monte-Carlo and noise-free) and
/// writes `rate.csv` and `rate_deterministic.csv` to the output directory.
pub fn cmd_rate_check(config_path: Option<&Path>, opts: &GlobalOpts) -> Result<RateReport, CliError> {
    let mut cfg = match config_path {
        Some(p) => config::load_rate_check(p)?,
        None => RateCheckConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    rate_check(&cfg, opts.out.as_deref().unwrap_or(Path::new(".")))
}

pub fn rate_check(cfg: &RateCheckConfig, out: &Path) -> Result<RateReport, CliError> {
    cfg.validate()?;
    let rate = cfg.rate_spec();
    let (tasks, harness) = cfg.suite()?;
    let noisy = convergence::run_convex_mfed(&tasks, &rate, &harness)?;
    let exact = convergence::run_convex_mfed(&tasks, &rate, &convergence::HarnessConfig { noise: 0.0, ..harness })?;
    fs::create_dir_all(out)?;
    let csv = out.join("rate.csv");
    convergence::write_rate_csv(&csv, &noisy, RateFn::InverseLinear)?;
    convergence::write_rate_csv(&out.join("rate_deterministic.csv"), &exact, RateFn::InverseLinear)?;
    Ok(RateReport {
        a: rate.a,
        stochastic: convergence::check_rate_all(&noisy, RateFn::InverseLinear)?,
        deterministic: convergence::check_rate_all(&exact, RateFn::InverseLinear)?,
        gradient_bound: noisy.gradient_bound.max(exact.gradient_bound),
        displacement: noisy.displacement.max(exact.displacement),
        csv,
    })
}

/// Writes `task_<id>.dat` (round, metric) and `drift.dat` (round, lambda,
/// mean drift, max drift) for gnuplot. Returns the written paths.
pub fn cmd_plot_data(run_dir: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let records = server::read_rounds(run_dir)?;
    let metrics = metric_names(run_dir);
    let out = out.map_or_else(|| run_dir.join("plot"), Path::to_path_buf);
    fs::create_dir_all(&out)?;

    let mut per_task: BTreeMap<u32, String> = BTreeMap::new();
    let mut drift = String::from("# round lambda mean_drift max_drift\n");
    for r in &records {
        for (key, v) in &r.task_metrics {
            let id: u32 = key
                .parse()
                .map_err(|_| CliError::new(exit::FAILURE, anyhow!("bad task key {key:?} in rounds.jsonl")))?;
            let text = per_task.entry(id).or_insert_with(|| {
                let name = metrics.get(&id).map_or("metric", |m| m.name());
                format!("# round {name}\n")
            });
            let _ = writeln!(text, "{} {v:e}", r.round);
        }
        let n = r.per_client_drift.len().max(1) as f64;
        let mean = r.per_client_drift.iter().sum::<f64>() / n;
        let max = r.per_client_drift.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(drift, "{} {:e} {mean:e} {max:e}", r.round, r.lambda);
    }
    let mut written = Vec::new();
    for (id, text) in per_task {
        let path = out.join(format!("task_{id}.dat"));
        fs::write(&path, text)?;
        written.push(path);
    }
    let path = out.join("drift.dat");
    fs::write(&path, drift)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfed_core::server::TaskSummary;

    fn write_summary(dir: &Path, values: &[(u32, f64)]) {
        let mut text = String::from("task_id,mode,best_metric,final_metric,delta_m_percent\n");
        for (id, v) in values {
            text.push_str(&format!("{id},local,{v},{v},\n"));
        }
        fs::write(dir.join("summary.csv"), text).unwrap();
    }

    #[test]
    fn compare_hand_built_summaries() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_summary(a.path(), &[(0, 10.0)]);
        write_summary(b.path(), &[(0, 11.0)]);
        let c = compare_runs(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
        assert_eq!(c.rows[0].delta_m, Some(0.0));
        let d = c.rows[1].delta_m.unwrap();
        assert!((d - 10.0).abs() < 1e-12);
        assert_eq!(c.best(), vec![1]);
        assert!(c.render().contains("+10.00"));
    }

    #[test]
    fn compare_rejects_mismatched_tasks() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_summary(a.path(), &[(0, 1.0), (1, 1.0)]);
        write_summary(b.path(), &[(0, 1.0)]);
        let err = compare_runs(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap_err();
        assert_eq!(err.code, exit::CONFIG);
        assert!(compare_runs(&[a.path().to_path_buf()]).is_err());
    }

    #[test]
    fn plot_data_requires_rounds_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_plot_data(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("rounds.jsonl"), "{err}");
    }

    #[test]
    fn summary_round_trips_through_csv() {
        let row = TaskSummary {
            task_id: 3,
            mode: Mode::Mfed,
            best_metric: 0.1 + 0.2,
            final_metric: 1.0 / 3.0,
            delta_m_percent: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "task_id,mode,best_metric,final_metric,delta_m_percent\n{},mfed,{:?},{:?},\n",
            row.task_id, row.best_metric, row.final_metric
        );
        fs::write(dir.path().join("summary.csv"), text).unwrap();
        assert_eq!(server::read_summary(dir.path()).unwrap(), vec![row]);
    }
}
