//! Convergence harness on strongly convex quadratic tasks.
//!
//! Each task is `F_k(v) = ½ (v − v_k*)ᵀ H_k (v − v_k*)` with `H_k` symmetric
//! positive definite, so `μ_k = λ_min(H_k)` and the optimum is known. The
//! harness runs the federated loop with one client per task (local gradient
//! steps on `F_k + λ/2 ‖v − g‖²`, then `g` = mean of the task models) under
//! the step size `η_t = 2 rate_g(t) / (A μ)` and measures `‖v_k^t − v_k*‖²`.
//!
//! The rate function is called `rate_g` throughout to keep it apart from the
//! global encoder `g`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Distances above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexTask {
    pub curvature: DMatrix<f64>,
    pub optimum: DVector<f64>,
    /// Smallest eigenvalue of the curvature.
    pub mu: f64,
    /// Largest eigenvalue of the curvature.
    pub l: f64,
}

impl ConvexTask {
    pub fn new(curvature: DMatrix<f64>, optimum: DVector<f64>) -> Result<Self> {
        let d = optimum.len();
        if d == 0 || curvature.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                op: "convex_task",
                left: vec![curvature.nrows(), curvature.ncols()],
                right: vec![d],
            });
        }
        let asym = (&curvature - curvature.transpose()).abs().max();
        if asym > 1e-12 * curvature.abs().max().max(1.0) {
            return Err(Error::invalid("curvature matrix is not symmetric"));
        }
        let eig = curvature.clone().symmetric_eigenvalues();
        let mu = eig.min();
        if mu.is_nan() || mu <= 0.0 {
            return Err(Error::invalid(format!(
                "curvature matrix is not positive definite (smallest eigenvalue {mu})"
            )));
        }
        Ok(Self {
            curvature,
            optimum,
            mu,
            l: eig.max(),
        })
    }

    /// `H = μ I`.
    pub fn isotropic(mu: f64, optimum: DVector<f64>) -> Result<Self> {
        let d = optimum.len();
        Self::new(DMatrix::identity(d, d) * mu, optimum)
    }

    /// Random rotation of a diagonal spectrum drawn uniformly from
    /// `[eig_lo, eig_hi]`.
    pub fn random(optimum: DVector<f64>, eig_lo: f64, eig_hi: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0 < eig_lo && eig_lo <= eig_hi) {
            return Err(Error::invalid("eigenvalue range must satisfy 0 < lo <= hi"));
        }
        let d = optimum.len();
        let q = random_rotation(d, rng);
        let spectrum = DVector::from_fn(d, |_, _| rng.random_range(eig_lo..=eig_hi));
        let h = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
        Self::new((&h + h.transpose()) * 0.5, optimum)
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn loss(&self, v: &DVector<f64>) -> f64 {
        let d = v - &self.optimum;
        0.5 * d.dot(&(&self.curvature * &d))
    }

    pub fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.curvature * (v - &self.optimum)
    }
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

/// Decreasing rate function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateFn {
    /// `1 / (t + 1)`
    #[default]
    InverseLinear,
}

impl RateFn {
    pub fn value(self, t: usize) -> f64 {
        match self {
            RateFn::InverseLinear => 1.0 / (t as f64 + 1.0),
        }
    }

    /// Largest `A` with `rate_g(t+1)/rate_g(t) ≥ 1 − rate_g(t)/A` for all
    /// `t < horizon`. The condition is `A ≤ rate_g(t)² / (rate_g(t) − rate_g(t+1))`.
    pub fn largest_admissible_a(self, horizon: usize) -> f64 {
        (0..horizon)
            .map(|t| {
                let (a, b) = (self.value(t), self.value(t + 1));
                if a > b {
                    a * a / (a - b)
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `η_t = 2 rate_g(t) / (A μ)`.
    Theorem,
    /// `η = c / μ` in every round.
    Constant { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub rate: RateFn,
    pub a: f64,
    pub step: StepRule,
}

impl RateSpec {
    /// Theorem schedule with the largest admissible `A` on `[0, horizon)`.
    pub fn theorem(rate: RateFn, horizon: usize) -> Self {
        Self {
            rate,
            a: rate.largest_admissible_a(horizon),
            step: StepRule::Theorem,
        }
    }

    pub fn rate_g(&self, t: usize) -> f64 {
        self.rate.value(t)
    }

    pub fn step_size(&self, t: usize, mu: f64) -> f64 {
        match self.step {
            StepRule::Theorem => 2.0 * self.rate_g(t) / (self.a * mu),
            StepRule::Constant { c } => c / mu,
        }
    }

    /// Checks the ratio condition on `[0, horizon)`, naming the first `t`
    /// where it fails.
    pub fn check_ratio(&self, horizon: usize) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::invalid(format!("A must be positive and finite, got {}", self.a)));
        }
        for t in 0..horizon {
            let (now, next) = (self.rate_g(t), self.rate_g(t + 1));
            // A relative slack of a few ulps absorbs rounding in the boundary case.
            if next / now < 1.0 - now / self.a - 4.0 * f64::EPSILON {
                return Err(Error::invalid(format!(
                    "ratio condition fails at t={t}: rate_g(t+1)/rate_g(t) = {} < 1 - rate_g(t)/A = {}",
                    next / now,
                    1.0 - now / self.a
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub lambda: f64,
    /// Gradient steps per task per round.
    pub local_steps: usize,
    /// Half-width of the uniform noise added to every gradient coordinate.
    pub noise: f64,
    /// Monte-Carlo repetitions; ignored (one run) when `noise` is 0.
    pub draws: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Starting point of each task.
    pub start: Vec<DVector<f64>>,
    /// Holds `g` fixed instead of re-aggregating it every round.
    pub fixed_global: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRun {
    /// `distances[k][t]` = mean over draws of `‖v_k^t − v_k*‖²`, `t ∈ [0, T)`.
    pub distances: Vec<Vec<f64>>,
    /// Largest gradient norm `‖∇F_k(v)‖` seen on the trajectory.
    pub gradient_bound: f64,
    /// Largest `‖v_k^t − w^t‖` seen, with `w` the global encoder.
    pub displacement: f64,
}

/// Runs the federated loop for `cfg.rounds` rounds. `distances[k][0]` is
/// the starting distance; round `t` maps `v^t` to `v^{t+1}`.
#[allow(clippy::needless_range_loop)]
pub fn run_convex_mfed(tasks: &[ConvexTask], rate: &RateSpec, cfg: &HarnessConfig) -> Result<ConvexRun> {
    if tasks.is_empty() {
        return Err(Error::invalid("need at least one convex task"));
    }
    if cfg.start.len() != tasks.len() {
        return Err(Error::LengthMismatch {
            what: "start points",
            expected: tasks.len(),
            actual: cfg.start.len(),
        });
    }
    let d = tasks[0].dim();
    if tasks.iter().any(|t| t.dim() != d) || cfg.start.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("all tasks and start points must share one dimension"));
    }
    if cfg.fixed_global.as_ref().is_some_and(|g| g.len() != d) {
        return Err(Error::invalid("fixed global encoder has the wrong dimension"));
    }
    if cfg.local_steps < 1 {
        return Err(Error::invalid("local_steps must be at least 1"));
    }
    if !(cfg.lambda >= 0.0 && cfg.noise >= 0.0) {
        return Err(Error::invalid("lambda and noise must be >= 0"));
    }
    if let StepRule::Theorem = rate.step {
        rate.check_ratio(cfg.rounds)?;
    }
    let draws = if cfg.noise > 0.0 { cfg.draws.max(1) } else { 1 };
    let k = tasks.len();
    let mut sums = vec![vec![0.0; cfg.rounds]; k];
    let mut gradient_bound = 0.0f64;
    let mut displacement = 0.0f64;

    for draw in 0..draws {
        let mut rng = rng::stream(cfg.seed, &[rng::tag::CONVEX, draw as u64]);
        let mut v = cfg.start.clone();
        let mut g = cfg.fixed_global.clone().unwrap_or_else(|| mean(&v));
        for t in 0..cfg.rounds {
            for (kk, (task, vk)) in tasks.iter().zip(&v).enumerate() {
                let dist = (vk - &task.optimum).norm_squared();
                if !dist.is_finite() || dist > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence {
                        step: t,
                        detail: format!("task {kk} distance reached {dist:e}"),
                    });
                }
                sums[kk][t] += dist;
            }
            if t + 1 == cfg.rounds {
                break;
            }
            for (task, vk) in tasks.iter().zip(v.iter_mut()) {
                let eta = rate.step_size(t, task.mu);
                for _ in 0..cfg.local_steps {
                    let grad_f = task.gradient(vk);
                    gradient_bound = gradient_bound.max(grad_f.norm());
                    displacement = displacement.max((&*vk - &g).norm());
                    let mut step = grad_f + (&*vk - &g) * cfg.lambda;
                    if cfg.noise > 0.0 {
                        step += DVector::from_fn(d, |_, _| rng.random_range(-cfg.noise..=cfg.noise));
                    }
                    *vk -= step * eta;
                }
            }
            if cfg.fixed_global.is_none() {
                g = mean(&v);
            }
        }
    }
    let distances = sums
        .into_iter()
        .map(|row| row.into_iter().map(|s| s / draws as f64).collect())
        .collect();
    Ok(ConvexRun {
        distances,
        gradient_bound,
        displacement,
    })
}

fn mean(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc += v;
    }
    acc / vs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCheck {
    /// `max_{t ∈ [10, T)} distance(t) / rate_g(t)`.
    pub c_fit: f64,
    pub c_early: f64,
    pub c_late: f64,
    pub pass: bool,
}

/// First index of the fitting window.
pub const FIT_START: usize = 10;
/// Shortest series `check_rate` accepts.
pub const MIN_HORIZON: usize = 50;

/// Fits `C` in `distance(t) ≤ C rate_g(t)` and checks that it stabilizes:
/// the maximum over `[T/2, T)` may exceed the maximum over `[10, T/2)` by at
/// most 10%.
pub fn check_rate(distances: &[f64], rate: RateFn) -> Result<RateCheck> {
    let t_max = distances.len();
    if t_max < MIN_HORIZON {
        return Err(Error::invalid(format!(
            "rate check needs T >= {MIN_HORIZON}, got {t_max}"
        )));
    }
    let ratio = |t: usize| distances[t] / rate.value(t);
    let window_max = |lo: usize, hi: usize| (lo..hi).map(ratio).fold(f64::NEG_INFINITY, f64::max);
    let c_early = window_max(FIT_START, t_max / 2);
    let c_late = window_max(t_max / 2, t_max);
    let c_fit = c_early.max(c_late);
    Ok(RateCheck {
        c_fit,
        c_early,
        c_late,
        pass: c_fit.is_finite() && c_late <= 1.1 * c_early,
    })
}

/// Checks every task's series; passes only if all do. `c_fit` and the
/// window maxima are the largest over tasks.
pub fn check_rate_all(run: &ConvexRun, rate: RateFn) -> Result<RateCheck> {
    let mut out: Option<RateCheck> = None;
    for series in &run.distances {
        let c = check_rate(series, rate)?;
        out = Some(match out {
            None => c,
            Some(o) => RateCheck {
                c_fit: o.c_fit.max(c.c_fit),
                c_early: o.c_early.max(c.c_early),
                c_late: o.c_late.max(c.c_late),
                pass: o.pass && c.pass,
            },
        });
    }
    out.ok_or_else(|| Error::invalid("no distance series"))
}

/// Writes `t, rate_g, dist_0.., ratio` where `ratio` is the largest
/// `dist_k / rate_g` over tasks.
pub fn write_rate_csv(path: &Path, run: &ConvexRun, rate: RateFn) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "rate_g".to_string()];
    header.extend((0..run.distances.len()).map(|k| format!("dist_{k}")));
    header.push("ratio".into());
    w.write_record(&header)?;
    let horizon = run.distances.first().map_or(0, Vec::len);
    for t in 0..horizon {
        let g = rate.value(t);
        let mut row = vec![t.to_string(), format!("{g:e}")];
        let mut worst = f64::NEG_INFINITY;
        for series in &run.distances {
            row.push(format!("{:e}", series[t]));
            worst = worst.max(series[t] / g);
        }
        row.push(format!("{worst:e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step ratios `‖v_{t+1} − v*‖ / ‖v_t − v*‖` of plain gradient descent
/// with step `eta`.
pub fn contraction_factors(task: &ConvexTask, start: &DVector<f64>, eta: f64, steps: usize) -> Vec<f64> {
    let mut v = start.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let before = (&v - &task.optimum).norm();
        v -= task.gradient(&v) * eta;
        out.push((&v - &task.optimum).norm() / before);
    }
    out
}

/// One deterministic step of the regularized local update and the two sides
/// of the one-step bound on `‖v^{t+1} − v*‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Step<'a> {
    pub task: &'a ConvexTask,
    /// Current task model `v_k^t`.
    pub v: DVector<f64>,
    /// Global encoder `w^t`.
    pub w: DVector<f64>,
    /// Limit `w*` of the global encoder.
    pub w_star: DVector<f64>,
    pub lambda: f64,
    pub eta: f64,
    /// Gradient bound `G`; defaults to `‖∇F(v)‖`.
    pub gradient_bound: Option<f64>,
    /// Displacement bound `M`; defaults to the measured `‖v − w*‖`.
    pub displacement_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Evaluation {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; the bound holds when this is `≥ 0`.
    pub residual: f64,
}

/// Evaluates both sides with exact (noise-free) quantities.
///
/// `lhs = ‖v − η(∇F(v) + λ(v − w)) − v*‖²` and, with `D = ‖v − v*‖²`,
/// `e = ‖w − w*‖` and `K = G + λ(G/μ + M)`,
///
/// ```text
/// rhs = (1 − ημ) D + η² (K² + λ² e² − 2λ K e)
///       − 2η (G²/(2μ) + λ √D (G/μ + M − e))
/// ```
pub fn verify_lemma1_step(s: &Lemma1Step<'_>) -> Result<Lemma1Evaluation> {
    let task = s.task;
    let d = task.dim();
    if s.v.len() != d || s.w.len() != d || s.w_star.len() != d {
        return Err(Error::invalid("lemma step vectors must match the task dimension"));
    }
    let grad = task.gradient(&s.v);
    let step = &grad + (&s.v - &s.w) * s.lambda;
    let next = &s.v - step * s.eta;
    let lhs = (next - &task.optimum).norm_squared();

    let mu = task.mu;
    let big_g = s.gradient_bound.unwrap_or_else(|| grad.norm());
    let big_m = s.displacement_bound.unwrap_or_else(|| (&s.v - &s.w_star).norm());
    let dist2 = (&s.v - &task.optimum).norm_squared();
    let e = (&s.w - &s.w_star).norm();
    let k = big_g + s.lambda * (big_g / mu + big_m);
    let (eta, lam) = (s.eta, s.lambda);
    let rhs = (1.0 - eta * mu) * dist2 + eta * eta * (k * k + lam * lam * e * e - 2.0 * lam * k * e)
        - 2.0 * eta * (big_g * big_g / (2.0 * mu) + lam * dist2.sqrt() * (big_g / mu + big_m - e));
    Ok(Lemma1Evaluation {
        lhs,
        rhs,
        residual: rhs - lhs,
    })
}

/// Randomized instances: dimension alternating 1 and 4, spectrum in
/// `[0.5, 2]`, all points uniform in `[−2, 2]^d`, `λ ~ U[0, 1]`, `η`
/// alternating `1e-3` and `1e-2`.
pub fn lemma1_sweep(instances: usize, seed: u64) -> Result<Vec<Lemma1Evaluation>> {
    let mut rng = rng::stream(seed, &[rng::tag::CONVEX, u64::MAX]);
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let d = if i % 2 == 0 { 1 } else { 4 };
        let eta = if (i / 2) % 2 == 0 { 1e-3 } else { 1e-2 };
        let point = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| rng.random_range(-2.0..=2.0));
        let optimum = point(&mut rng);
        let task = ConvexTask::random(optimum, 0.5, 2.0, &mut rng)?;
        let (v, w, w_star) = (point(&mut rng), point(&mut rng), point(&mut rng));
        let lambda = rng.random_range(0.0..=1.0);
        out.push(verify_lemma1_step(&Lemma1Step {
            task: &task,
            v,
            w,
            w_star,
            lambda,
            eta,
            gradient_bound: None,
            displacement_bound: None,
        })?);
    }
    Ok(out)
}

/// `tasks` random `dim`-dimensional tasks with spectra in `[eig_lo, eig_hi]`
/// sharing one optimum drawn from `[−1, 1]^dim`, started from independent
/// points in `[−3, 3]^dim`.
pub fn random_suite(
    tasks: usize,
    dim: usize,
    eig_lo: f64,
    eig_hi: f64,
    seed: u64,
) -> Result<(Vec<ConvexTask>, Vec<DVector<f64>>)> {
    if tasks == 0 || dim == 0 {
        return Err(Error::invalid("convex suite needs at least one task and one dimension"));
    }
    let mut rng = rng::stream(seed, &[rng::tag::CONVEX, u64::MAX - 1]);
    let optimum = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..=1.0));
    let mut out = Vec::with_capacity(tasks);
    let mut start = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        out.push(ConvexTask::random(optimum.clone(), eig_lo, eig_hi, &mut rng)?);
        start.push(DVector::from_fn(dim, |_, _| rng.random_range(-3.0..=3.0)));
    }
    Ok((out, start))
}

/// Three 4-dimensional tasks with spectra in `[1, 4]`; see [`random_suite`].
pub fn default_suite(seed: u64) -> Result<(Vec<ConvexTask>, Vec<DVector<f64>>)> {
    random_suite(3, 4, 1.0, 4.0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn cfg(start: Vec<DVector<f64>>, lambda: f64, rounds: usize) -> HarnessConfig {
        HarnessConfig {
            lambda,
            local_steps: 1,
            noise: 0.0,
            draws: 1,
            rounds,
            seed: 1,
            start,
            fixed_global: None,
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(ConvexTask::new(bad, vec(&[0.0, 0.0])).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ConvexTask::new(asym, vec(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn random_task_spectrum_in_range() {
        let mut rng = rng::stream(3, &[0]);
        for _ in 0..20 {
            let t = ConvexTask::random(vec(&[0.0; 5]), 1.0, 4.0, &mut rng).unwrap();
            assert!(t.mu >= 1.0 - 1e-9 && t.l <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn isotropic_closed_form_distance() {
        let task = ConvexTask::isotropic(1.0, vec(&[1.0, -1.0])).unwrap();
        let eta = 0.1;
        let rate = RateSpec {
            rate: RateFn::InverseLinear,
            a: 1.0,
            step: StepRule::Constant { c: eta },
        };
        let start = vec(&[4.0, 3.0]);
        let d0 = (&start - &task.optimum).norm_squared();
        let run = run_convex_mfed(&[task], &rate, &cfg(vec![start], 0.0, 30)).unwrap();
        for (t, &d) in run.distances[0].iter().enumerate() {
            let expected = (1.0f64 - eta).powi(2 * t as i32) * d0;
            assert!((d - expected).abs() <= 1e-12 * d0, "t={t}");
        }
    }

    #[test]
    fn start_at_optimum_stays() {
        let task = ConvexTask::isotropic(2.0, vec(&[0.5])).unwrap();
        let rate = RateSpec::theorem(RateFn::InverseLinear, 60);
        let run = run_convex_mfed(&[task], &rate, &cfg(vec![vec(&[0.5])], 0.0, 60)).unwrap();
        assert!(run.distances[0].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fixed_global_at_shared_optimum_converges() {
        let mut rng = rng::stream(5, &[0]);
        let opt = vec(&[0.3, -0.2, 1.0]);
        let tasks: Vec<_> = (0..2)
            .map(|_| ConvexTask::random(opt.clone(), 1.0, 3.0, &mut rng).unwrap())
            .collect();
        let rate = RateSpec {
            rate: RateFn::InverseLinear,
            a: 1.0,
            step: StepRule::Constant { c: 0.2 },
        };
        let mut c = cfg(vec![vec(&[2.0, 2.0, 2.0]), vec(&[-2.0, 0.0, 1.0])], 0.7, 300);
        c.fixed_global = Some(opt);
        let run = run_convex_mfed(&tasks, &rate, &c).unwrap();
        for series in &run.distances {
            assert!(*series.last().unwrap() < 1e-12);
        }
    }

    #[test]
    fn ratio_condition_bound() {
        let a = RateFn::InverseLinear.largest_admissible_a(100);
        assert!((a - 101.0 / 100.0).abs() < 1e-12);
        assert!(RateSpec::theorem(RateFn::InverseLinear, 100).check_ratio(100).is_ok());
        let too_big = RateSpec {
            a: 1.5,
            ..RateSpec::theorem(RateFn::InverseLinear, 100)
        };
        let err = too_big.check_ratio(100).unwrap_err().to_string();
        assert!(err.contains("t=2"), "{err}");
    }

    #[test]
    fn constant_step_too_large_diverges() {
        let task = ConvexTask::isotropic(1.0, vec(&[0.0, 0.0])).unwrap();
        let rate = RateSpec {
            rate: RateFn::InverseLinear,
            a: 1.0,
            step: StepRule::Constant { c: 10.0 },
        };
        let err = run_convex_mfed(&[task], &rate, &cfg(vec![vec(&[1.0, 1.0])], 0.0, 500)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn contraction_matches_one_minus_eta_mu() {
        let task = ConvexTask::isotropic(0.8, vec(&[1.0, 2.0, 3.0])).unwrap();
        for f in contraction_factors(&task, &vec(&[-1.0, 0.0, 5.0]), 0.3, 20) {
            assert!((f - (1.0 - 0.3 * 0.8)).abs() < 1e-12);
        }
    }

    #[test]
    fn check_rate_synthetic_series() {
        let g = |t: usize| RateFn::InverseLinear.value(t);
        let exact: Vec<f64> = (0..200).map(g).collect();
        let c = check_rate(&exact, RateFn::InverseLinear).unwrap();
        assert!((c.c_fit - 1.0).abs() < 1e-12 && c.pass);

        let jitter: Vec<f64> = (0..200)
            .map(|t| 5.0 * g(t) * (1.0 + 0.01 * if t % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let c = check_rate(&jitter, RateFn::InverseLinear).unwrap();
        assert!((c.c_fit - 5.05).abs() < 1e-9 && c.pass);

        let flat = vec![1.0; 200];
        let c = check_rate(&flat, RateFn::InverseLinear).unwrap();
        assert!(!c.pass);
        assert!((c.c_fit - 200.0).abs() < 1e-9);

        assert!(check_rate(&exact[..49], RateFn::InverseLinear).is_err());
    }

    #[test]
    fn lemma1_holds_at_optimum() {
        let task = ConvexTask::isotropic(1.0, vec(&[0.5, -0.5])).unwrap();
        let ws = vec(&[0.5, -0.5]);
        let ev = verify_lemma1_step(&Lemma1Step {
            task: &task,
            v: task.optimum.clone(),
            w: ws.clone(),
            w_star: ws,
            lambda: 0.3,
            eta: 0.01,
            gradient_bound: None,
            displacement_bound: None,
        })
        .unwrap();
        assert_eq!(ev.lhs, 0.0);
        assert!(ev.residual >= 0.0);
    }

    #[test]
    fn lemma1_unregularized_residual_closed_form() {
        // With λ = 0 and G = ‖H d‖ the residual reduces to
        // −(η/μ) ‖(H − μI) d‖², d = v − v*.
        let mut rng = rng::stream(9, &[0]);
        for _ in 0..50 {
            let task = ConvexTask::random(vec(&[0.1, 0.2, -0.3, 0.4]), 0.5, 2.0, &mut rng).unwrap();
            let v = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let eta = 1e-2;
            let ev = verify_lemma1_step(&Lemma1Step {
                task: &task,
                v: v.clone(),
                w: v.clone(),
                w_star: v.clone(),
                lambda: 0.0,
                eta,
                gradient_bound: None,
                displacement_bound: None,
            })
            .unwrap();
            let d = &v - &task.optimum;
            let shifted = (&task.curvature - DMatrix::identity(4, 4) * task.mu) * d;
            let expected = -(eta / task.mu) * shifted.norm_squared();
            assert!((ev.residual - expected).abs() < 1e-12, "{} vs {expected}", ev.residual);
        }
    }

    #[test]
    fn lemma1_scalar_unregularized_is_tight() {
        let task = ConvexTask::isotropic(1.3, vec(&[0.7])).unwrap();
        for eta in [1e-3, 1e-2] {
            let ev = verify_lemma1_step(&Lemma1Step {
                task: &task,
                v: vec(&[-1.1]),
                w: vec(&[0.0]),
                w_star: vec(&[0.0]),
                lambda: 0.0,
                eta,
                gradient_bound: None,
                displacement_bound: None,
            })
            .unwrap();
            assert!(ev.residual.abs() < 1e-12);
        }
    }

    #[test]
    fn default_suite_passes_rate_check() {
        let (tasks, start) = default_suite(1).unwrap();
        let rate = RateSpec::theorem(RateFn::InverseLinear, 1000);
        let mut c = cfg(start, 0.1, 1000);
        c.noise = 0.5;
        c.draws = 20;
        let run = run_convex_mfed(&tasks, &rate, &c).unwrap();
        let check = check_rate_all(&run, RateFn::InverseLinear).unwrap();
        assert!(check.pass, "{check:?}");
    }

    #[test]
    fn rate_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (tasks, start) = default_suite(2).unwrap();
        let rate = RateSpec::theorem(RateFn::InverseLinear, 60);
        let run = run_convex_mfed(&tasks, &rate, &cfg(start, 0.1, 60)).unwrap();
        let path = dir.path().join("rate.csv");
        write_rate_csv(&path, &run, RateFn::InverseLinear).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,rate_g,dist_0,dist_1,dist_2,ratio");
        assert_eq!(lines.count(), 60);
    }
}
