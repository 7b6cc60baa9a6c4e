//! Local training on one client.
//!
//! A client receives its task's global model and the global encoder `g`,
//! replaces its local model with the task model, then runs `m` epochs of
//! mini-batch gradient descent on
//!
//! ```text
//! h(w) = L(w) + penalty(λ, ‖w_enc − g‖)
//! ```
//!
//! where the penalty is `λ/2 ‖w_enc − g‖²` (squared form) or
//! `λ ‖w_enc − g‖` (norm form). `g` stays fixed for the whole local run.
//! The client reports the parameter delta relative to the model it received.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, HeadKind, ModelParams, ParamVector};
use crate::rng;
use crate::taskgen::ClientShard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    /// `λ/2 ‖w_enc − g‖²`, gradient `λ (w_enc − g)`.
    #[default]
    Squared,
    /// `λ ‖w_enc − g‖`, with the zero subgradient at `w_enc = g`.
    Norm,
}

/// A differentiable task loss over a client's samples.
pub trait LocalObjective: Sync {
    fn sample_count(&self) -> usize;

    /// Mean loss over `batch` and its gradient as a flat
    /// encoder-then-decoder vector.
    fn loss_and_grad(&self, params: &ModelParams, batch: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, params: &ModelParams, batch: &[usize]) -> Result<f64> {
        Ok(self.loss_and_grad(params, batch)?.0)
    }
}

/// Task loss of the encoder-decoder network on a client's shard.
pub struct NetObjective<'a> {
    pub arch: &'a Architecture,
    pub head: &'a HeadKind,
    pub shard: &'a ClientShard,
}

impl NetObjective<'_> {
    fn batch(&self, batch: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            self.shard.inputs.select_rows(batch)?,
            self.shard.targets.select_rows(batch)?,
        ))
    }
}

impl LocalObjective for NetObjective<'_> {
    fn sample_count(&self) -> usize {
        self.shard.size()
    }

    fn loss_and_grad(&self, params: &ModelParams, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (x, y) = self.batch(batch)?;
        model::loss_and_grad(params, self.arch, self.head, &x, &y)
    }

    fn loss(&self, params: &ModelParams, batch: &[usize]) -> Result<f64> {
        let (x, y) = self.batch(batch)?;
        model::task_loss(params, self.arch, self.head, &x, &y)
    }
}

/// Value and encoder gradient of the proximity penalty, computed on an
/// autodiff graph.
pub fn proximal_penalty(encoder: &[f64], g: &[f64], lambda: f64, form: PenaltyForm) -> Result<(f64, Vec<f64>)> {
    if encoder.len() != g.len() {
        return Err(Error::LengthMismatch {
            what: "global encoder",
            expected: encoder.len(),
            actual: g.len(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut graph = Graph::new();
    let w = graph.param(Tensor::vector(encoder.to_vec())?)?;
    let target = graph.input(Tensor::vector(g.to_vec())?)?;
    let diff = graph.sub(w, target)?;
    let sq = graph.sum_squares(diff)?;
    let penalty = match form {
        PenaltyForm::Squared => graph.scale(sq, lambda / 2.0)?,
        PenaltyForm::Norm => {
            let norm = graph.sqrt(sq)?;
            graph.scale(norm, lambda)?
        }
    };
    let grads = graph.backward(penalty)?;
    let value = graph.value(penalty).item().expect("scalar penalty");
    Ok((value, grads.get(w).data().to_vec()))
}

/// `L(batch; params) + penalty(λ, ‖w_enc − g‖)`.
pub fn regularized_loss(
    objective: &dyn LocalObjective,
    params: &ModelParams,
    batch: &[usize],
    g: &[f64],
    lambda: f64,
    form: PenaltyForm,
) -> Result<f64> {
    let (penalty, _) = proximal_penalty(&params.encoder, g, lambda, form)?;
    Ok(objective.loss(params, batch)? + penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub penalty: PenaltyForm,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("local epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        Ok(())
    }
}

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub client_id: u32,
    pub task_id: u32,
    /// `w_final − w_received`, encoder then decoder.
    pub delta: ParamVector,
    pub sample_count: usize,
    /// Task loss over the whole shard at the final parameters.
    pub final_loss: f64,
    pub drift_before: f64,
    pub drift_after: f64,
}

/// Shuffled mini-batches covering `0..n` exactly once.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("cannot batch an empty shard"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn as_divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs local training from `received` and returns the client's final
/// parameters together with its report.
///
/// The returned parameters are `received + delta`, so applying the reported
/// delta to the received model reproduces them exactly.
pub fn train_local(
    objective: &dyn LocalObjective,
    client_id: u32,
    task_id: u32,
    received: &ModelParams,
    g: &[f64],
    cfg: &LocalTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, LocalReport)> {
    cfg.validate()?;
    if g.len() != received.encoder.len() {
        return Err(Error::LengthMismatch {
            what: "global encoder",
            expected: received.encoder.len(),
            actual: g.len(),
        });
    }
    let n_enc = received.encoder.len();
    let drift_before = received.encoder.distance(g)?;
    let mut params = received.clone();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        for batch in make_batches(objective.sample_count(), cfg.batch_size, rng)? {
            let (loss, mut grad) = objective.loss_and_grad(&params, &batch).map_err(as_divergence(step))?;
            let mut total = loss;
            if cfg.lambda > 0.0 {
                let (penalty, pgrad) =
                    proximal_penalty(&params.encoder, g, cfg.lambda, cfg.penalty).map_err(as_divergence(step))?;
                total += penalty;
                for (gv, pv) in grad[..n_enc].iter_mut().zip(&pgrad) {
                    *gv += pv;
                }
            }
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss became {total}"),
                });
            }
            for (p, gv) in params.encoder.iter_mut().zip(&grad[..n_enc]) {
                *p -= cfg.learning_rate * gv;
            }
            for (p, gv) in params.decoder.iter_mut().zip(&grad[n_enc..]) {
                *p -= cfg.learning_rate * gv;
            }
            step += 1;
        }
    }

    let received_flat = received.flat();
    let delta = ParamVector::new(params.flat().iter().zip(&received_flat).map(|(a, b)| a - b).collect());
    let rebased: Vec<f64> = received_flat.iter().zip(delta.iter()).map(|(b, d)| b + d).collect();
    let params = received.with_flat(&rebased)?;
    if params.flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: "parameters became non-finite".into(),
        });
    }
    let all: Vec<usize> = (0..objective.sample_count()).collect();
    let final_loss = objective.loss(&params, &all).map_err(as_divergence(step))?;
    let drift_after = params.encoder.distance(g)?;
    let report = LocalReport {
        client_id,
        task_id,
        delta,
        sample_count: objective.sample_count(),
        final_loss,
        drift_before,
        drift_after,
    };
    Ok((params, report))
}

/// The random stream a client uses in one round.
pub fn round_stream(experiment_seed: u64, client_id: u32, round: usize) -> ChaCha8Rng {
    rng::stream(
        experiment_seed,
        &[rng::tag::CLIENT_ROUND, u64::from(client_id), round as u64],
    )
}

/// A client's persistent state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: u32,
    pub task_id: u32,
    pub shard: ClientShard,
    pub params: ModelParams,
}

impl ClientState {
    /// Replaces the local model with `task_global` and trains on the shard.
    /// The state itself is not modified; the caller commits the returned
    /// parameters once the whole round has succeeded.
    #[allow(clippy::too_many_arguments)]
    pub fn local_train(
        &self,
        arch: &Architecture,
        head: &HeadKind,
        task_global: &ModelParams,
        g: &[f64],
        cfg: &LocalTrainConfig,
        experiment_seed: u64,
        round: usize,
    ) -> Result<(ModelParams, LocalReport)> {
        if !task_global.conforms_to(arch, head) {
            return Err(Error::invalid(format!(
                "client {}: task model does not match the architecture",
                self.client_id
            )));
        }
        let objective = NetObjective {
            arch,
            head,
            shard: &self.shard,
        };
        let mut rng = round_stream(experiment_seed, self.client_id, round);
        train_local(&objective, self.client_id, self.task_id, task_global, g, cfg, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;
    use crate::model::{init_params, Layout};
    use crate::taskgen::{generate_task_data, partition, LatentSpec, TaskSpec};

    /// `½ Σ_j c_j (v_j − t_j)²` over an encoder-only parameter vector.
    struct Quadratic {
        curvature: Vec<f64>,
        target: Vec<f64>,
    }

    impl LocalObjective for Quadratic {
        fn sample_count(&self) -> usize {
            1
        }

        fn loss_and_grad(&self, params: &ModelParams, _batch: &[usize]) -> Result<(f64, Vec<f64>)> {
            let mut loss = 0.0;
            let mut grad = Vec::new();
            for ((v, c), t) in params.encoder.iter().zip(&self.curvature).zip(&self.target) {
                loss += 0.5 * c * (v - t) * (v - t);
                grad.push(c * (v - t));
            }
            Ok((loss, grad))
        }
    }

    /// Zero task loss.
    struct Flat;

    impl LocalObjective for Flat {
        fn sample_count(&self) -> usize {
            1
        }

        fn loss_and_grad(&self, params: &ModelParams, _batch: &[usize]) -> Result<(f64, Vec<f64>)> {
            Ok((0.0, vec![0.0; params.total_len()]))
        }
    }

    fn encoder_only(values: Vec<f64>) -> ModelParams {
        let mut layout = Layout::new();
        layout.push("v", vec![values.len()]);
        ModelParams::encoder_only(values.into(), layout).unwrap()
    }

    fn cfg(lambda: f64, lr: f64, epochs: usize) -> LocalTrainConfig {
        LocalTrainConfig {
            lambda,
            learning_rate: lr,
            epochs,
            batch_size: 1,
            penalty: PenaltyForm::Squared,
        }
    }

    fn rng() -> ChaCha8Rng {
        round_stream(1, 0, 0)
    }

    #[test]
    fn penalty_vanishes_at_global_encoder() {
        let (p, g) = proximal_penalty(&[1.0, -2.0], &[1.0, -2.0], 3.0, PenaltyForm::Squared).unwrap();
        assert_eq!((p, g), (0.0, vec![0.0, 0.0]));
        let (p, g) = proximal_penalty(&[1.0, -2.0], &[1.0, -2.0], 3.0, PenaltyForm::Norm).unwrap();
        assert_eq!((p, g), (0.0, vec![0.0, 0.0]));
    }

    #[test]
    fn penalty_hand_values() {
        let (sq, grad) = proximal_penalty(&[3.0, 0.0], &[0.0, 4.0], 2.0, PenaltyForm::Squared).unwrap();
        assert_eq!(sq, 25.0);
        assert_eq!(grad, vec![6.0, -8.0]);
        let (norm, grad) = proximal_penalty(&[3.0, 0.0], &[0.0, 4.0], 2.0, PenaltyForm::Norm).unwrap();
        assert_eq!(norm, 10.0);
        assert!((grad[0] - 1.2).abs() < 1e-15 && (grad[1] + 1.6).abs() < 1e-15);
    }

    #[test]
    fn regularized_loss_adds_penalty() {
        let obj = Quadratic {
            curvature: vec![1.0, 1.0],
            target: vec![3.0, 0.0],
        };
        let p = encoder_only(vec![3.0, 0.0]);
        assert_eq!(
            regularized_loss(&obj, &p, &[0], &[3.0, 0.0], 5.0, PenaltyForm::Squared).unwrap(),
            0.0
        );
        assert_eq!(
            regularized_loss(&obj, &p, &[0], &[0.0, 4.0], 2.0, PenaltyForm::Squared).unwrap(),
            25.0
        );
        assert_eq!(
            regularized_loss(&obj, &p, &[0], &[0.0, 4.0], 2.0, PenaltyForm::Norm).unwrap(),
            10.0
        );
        assert!(regularized_loss(&obj, &p, &[0], &[0.0], 2.0, PenaltyForm::Norm).is_err());
    }

    #[test]
    fn one_step_plain_gradient() {
        let obj = Quadratic {
            curvature: vec![1.0],
            target: vec![3.0],
        };
        let (p, _) = train_local(
            &obj,
            0,
            1,
            &encoder_only(vec![0.0]),
            &[0.0],
            &cfg(0.0, 0.1, 1),
            &mut rng(),
        )
        .unwrap();
        assert!((p.encoder[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn one_step_with_proximal_term() {
        // grad = (0 − 3) + 1·(0 − 1) = −4
        let obj = Quadratic {
            curvature: vec![1.0],
            target: vec![3.0],
        };
        let (p, _) = train_local(
            &obj,
            0,
            1,
            &encoder_only(vec![0.0]),
            &[1.0],
            &cfg(1.0, 0.1, 1),
            &mut rng(),
        )
        .unwrap();
        assert!((p.encoder[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pure_penalty_contracts_geometrically() {
        let (alpha, lambda) = (0.1, 2.0);
        let g = [1.0, -1.0, 0.5];
        let mut p = encoder_only(vec![4.0, 2.0, -3.0]);
        let mut prev = p.encoder.distance(&g).unwrap();
        for _ in 0..20 {
            p = train_local(&Flat, 0, 1, &p, &g, &cfg(lambda, alpha, 1), &mut rng())
                .unwrap()
                .0;
            let d = p.encoder.distance(&g).unwrap();
            assert!(d < prev);
            assert!((d / prev - (1.0 - alpha * lambda)).abs() < 1e-12);
            prev = d;
        }
    }

    #[test]
    fn regularized_loss_nonincreasing_for_small_steps() {
        let obj = Quadratic {
            curvature: vec![1.0, 2.5, 0.5],
            target: vec![1.0, -2.0, 0.3],
        };
        let g = [0.0, 1.0, -1.0];
        let c = cfg(0.7, 1e-3, 1);
        let mut p = encoder_only(vec![2.0, 2.0, 2.0]);
        let mut prev = regularized_loss(&obj, &p, &[0], &g, c.lambda, c.penalty).unwrap();
        for _ in 0..200 {
            p = train_local(&obj, 0, 1, &p, &g, &c, &mut rng()).unwrap().0;
            let h = regularized_loss(&obj, &p, &[0], &g, c.lambda, c.penalty).unwrap();
            assert!(h <= prev);
            prev = h;
        }
    }

    #[test]
    fn divergence_reports_step() {
        let obj = Quadratic {
            curvature: vec![1.0],
            target: vec![0.0],
        };
        let err = train_local(
            &obj,
            0,
            1,
            &encoder_only(vec![1.0]),
            &[0.0],
            &cfg(0.0, 1e150, 3),
            &mut rng(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    fn net_setup() -> (Architecture, HeadKind, ClientShard, ModelParams) {
        let arch = Architecture::default_for(5);
        let head = HeadKind::Classification { classes: 3 };
        let spec = TaskSpec {
            task_id: 1,
            head,
            metric: MetricKind::Accuracy,
            latent: LatentSpec {
                input_dim: 5,
                latent_dim: 3,
                seed: 1,
            },
            head_seed: 2,
            head_scale: 1.0,
            noise: 0.1,
        };
        let data = generate_task_data(&spec, 24, 3).unwrap();
        let shard = partition(&data, 2, 0).unwrap().remove(0);
        let params = init_params(&arch, &head, 1, 4).unwrap();
        (arch, head, shard, params)
    }

    #[test]
    fn decoder_gradient_ignores_penalty() {
        let (arch, head, shard, params) = net_setup();
        let obj = NetObjective {
            arch: &arch,
            head: &head,
            shard: &shard,
        };
        let g: Vec<f64> = params.encoder.iter().map(|v| v + 0.3).collect();
        let (_, base) = obj.loss_and_grad(&params, &[0, 1, 2]).unwrap();
        let (_, pen) = proximal_penalty(&params.encoder, &g, 0.8, PenaltyForm::Squared).unwrap();
        let n_enc = params.encoder.len();
        // The penalty contributes only to encoder coordinates.
        assert_eq!(pen.len(), n_enc);
        for (a, b) in pen.iter().zip(params.encoder.iter().zip(&g)) {
            assert!((a - 0.8 * (b.0 - b.1)).abs() < 1e-15);
        }
        let (_, again) = obj.loss_and_grad(&params, &[0, 1, 2]).unwrap();
        assert_eq!(base[n_enc..], again[n_enc..]);
    }

    #[test]
    fn zero_lambda_matches_plain_sgd() {
        let (arch, head, shard, params) = net_setup();
        let state = ClientState {
            client_id: 0,
            task_id: 1,
            shard: shard.clone(),
            params: params.clone(),
        };
        let c = LocalTrainConfig {
            lambda: 0.0,
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 4,
            penalty: PenaltyForm::Squared,
        };
        let g = vec![0.25; params.encoder.len()];
        let (trained, report) = state.local_train(&arch, &head, &params, &g, &c, 9, 3).unwrap();

        let mut rng = round_stream(9, 0, 3);
        let mut p = params.flat();
        for _ in 0..2 {
            for batch in make_batches(shard.size(), 4, &mut rng).unwrap() {
                let x = shard.inputs.select_rows(&batch).unwrap();
                let y = shard.targets.select_rows(&batch).unwrap();
                let cur = params.with_flat(&p).unwrap();
                let (_, grad) = model::loss_and_grad(&cur, &arch, &head, &x, &y).unwrap();
                for (pv, gv) in p.iter_mut().zip(&grad) {
                    *pv -= 0.05 * gv;
                }
            }
        }
        let expected_delta: Vec<f64> = p.iter().zip(params.flat()).map(|(a, b)| a - b).collect();
        assert_eq!(&*report.delta, &expected_delta[..]);
        let applied: Vec<f64> = params
            .flat()
            .iter()
            .zip(report.delta.iter())
            .map(|(a, d)| a + d)
            .collect();
        assert_eq!(trained.flat(), applied);
    }

    #[test]
    fn batches_cover_shard() {
        let mut r = rng();
        let batches = make_batches(10, 3, &mut r).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let single = make_batches(5, 8, &mut r).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 5);

        assert!(make_batches(0, 2, &mut r).is_err());
        assert!(make_batches(3, 0, &mut r).is_err());
    }

    #[test]
    fn batches_reproducible_per_round_seed() {
        let mut a = round_stream(4, 7, 2);
        let mut b = round_stream(4, 7, 2);
        for _ in 0..2 {
            assert_eq!(
                make_batches(20, 6, &mut a).unwrap(),
                make_batches(20, 6, &mut b).unwrap()
            );
        }
        let mut c = round_stream(4, 7, 3);
        assert_ne!(
            make_batches(20, 20, &mut round_stream(4, 7, 2)).unwrap(),
            make_batches(20, 20, &mut c).unwrap()
        );
    }
}
