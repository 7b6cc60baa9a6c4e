//! Encoder-decoder models with a flat, partitioned parameter layout.
//!
//! Every client in an experiment shares one encoder architecture; each task
//! adds its own linear decoder head on top of the encoder output. Parameters
//! live in two flat vectors (encoder, decoder) described by layout tables, so
//! aggregation and proximity norms are plain vector arithmetic.

pub mod checkpoint;

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Flat real-valued parameter storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn check_len(&self, other: &[f64], what: &'static str) -> Result<()> {
        if self.0.len() != other.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: self.0.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &[f64]) -> Result<ParamVector> {
        self.check_len(other, "vector subtraction")?;
        Ok(Self(self.0.iter().zip(other).map(|(a, b)| a - b).collect()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &[f64]) -> Result<()> {
        self.check_len(other, "scaled addition")?;
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.0 {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &[f64]) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Ordered description of one flat segment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        let len = shape.iter().product();
        let offset = self.total_len();
        self.entries.push(LayoutEntry {
            name: name.into(),
            offset,
            len,
            shape,
        });
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len)
    }

    /// Builds a layout from explicit entries, checking they tile `[0, total)`.
    pub fn from_entries(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut next = 0;
        for e in &entries {
            if e.offset != next || e.len != e.shape.iter().product::<usize>() {
                return Err(Error::invalid(format!(
                    "layout entry {} is not contiguous with its shape",
                    e.name
                )));
            }
            next += e.len;
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub width: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn tanh(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Tanh,
        }
    }
}

/// Decoder head of a task. The head is a single linear map from the encoder
/// output to the task's logits or predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Regression {
        outputs: usize,
    },
    Binary,
    Classification {
        classes: usize,
    },
    /// Independent `classes`-way labels at each of `positions` sites.
    PerPosition {
        positions: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Binary,
    Categorical,
    PerPosition,
}

impl HeadKind {
    pub fn output_width(&self) -> usize {
        match *self {
            HeadKind::Regression { outputs } => outputs,
            HeadKind::Binary => 1,
            HeadKind::Classification { classes } => classes,
            HeadKind::PerPosition { positions, classes } => positions * classes,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            HeadKind::Regression { .. } => LossKind::Mse,
            HeadKind::Binary => LossKind::Binary,
            HeadKind::Classification { .. } => LossKind::Categorical,
            HeadKind::PerPosition { .. } => LossKind::PerPosition,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            HeadKind::Regression { outputs } => outputs >= 1,
            HeadKind::Binary => true,
            HeadKind::Classification { classes } => classes >= 2,
            HeadKind::PerPosition { positions, classes } => positions >= 1 && classes >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate decoder head {self:?}")))
        }
    }
}

/// Shared encoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder: Vec<DenseLayer>,
}

impl Architecture {
    /// input → 32 → 16 with tanh.
    pub fn default_for(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder: vec![DenseLayer::tanh(32), DenseLayer::tanh(16)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder.iter().any(|l| l.width == 0) {
            return Err(Error::invalid("architecture widths must be positive"));
        }
        Ok(())
    }

    /// Width of the encoder output, which is every decoder's input width.
    pub fn feature_width(&self) -> usize {
        self.encoder.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn encoder_layout(&self) -> Layout {
        let mut layout = Layout::new();
        let mut fan_in = self.input_dim;
        for (i, layer) in self.encoder.iter().enumerate() {
            layout.push(format!("encoder.{i}.weight"), vec![fan_in, layer.width]);
            layout.push(format!("encoder.{i}.bias"), vec![layer.width]);
            fan_in = layer.width;
        }
        layout
    }

    pub fn decoder_layout(&self, head: &HeadKind) -> Layout {
        let mut layout = Layout::new();
        let out = head.output_width();
        layout.push("decoder.weight", vec![self.feature_width(), out]);
        layout.push("decoder.bias", vec![out]);
        layout
    }
}

/// Parameters of one encoder-decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: ParamVector,
    pub decoder: ParamVector,
    pub encoder_layout: Layout,
    pub decoder_layout: Layout,
}

impl ModelParams {
    pub fn new(
        encoder: ParamVector,
        decoder: ParamVector,
        encoder_layout: Layout,
        decoder_layout: Layout,
    ) -> Result<Self> {
        if encoder.len() != encoder_layout.total_len() {
            return Err(Error::LengthMismatch {
                what: "encoder segment",
                expected: encoder_layout.total_len(),
                actual: encoder.len(),
            });
        }
        if decoder.len() != decoder_layout.total_len() {
            return Err(Error::LengthMismatch {
                what: "decoder segment",
                expected: decoder_layout.total_len(),
                actual: decoder.len(),
            });
        }
        Ok(Self {
            encoder,
            decoder,
            encoder_layout,
            decoder_layout,
        })
    }

    /// An encoder-only model, as used for the global encoder.
    pub fn encoder_only(encoder: ParamVector, layout: Layout) -> Result<Self> {
        Self::new(encoder, ParamVector::default(), layout, Layout::new())
    }

    pub fn total_len(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    /// Encoder values followed by decoder values.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.total_len());
        v.extend_from_slice(&self.encoder);
        v.extend_from_slice(&self.decoder);
        v
    }

    /// Replaces all values from a flat encoder-then-decoder vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.total_len() {
            return Err(Error::LengthMismatch {
                what: "flat parameters",
                expected: self.total_len(),
                actual: flat.len(),
            });
        }
        let (e, d) = flat.split_at(self.encoder.len());
        Ok(ModelParams {
            encoder: ParamVector::new(e.to_vec()),
            decoder: ParamVector::new(d.to_vec()),
            encoder_layout: self.encoder_layout.clone(),
            decoder_layout: self.decoder_layout.clone(),
        })
    }

    /// Whether this model matches the architecture and head exactly.
    pub fn conforms_to(&self, arch: &Architecture, head: &HeadKind) -> bool {
        self.encoder_layout == arch.encoder_layout() && self.decoder_layout == arch.decoder_layout(head)
    }
}

/// A copy of the encoder segment.
pub fn encoder_slice(params: &ModelParams) -> ParamVector {
    params.encoder.clone()
}

/// Overwrites the encoder segment, leaving the decoder untouched.
pub fn replace_encoder(params: &mut ModelParams, encoder: &[f64]) -> Result<()> {
    if encoder.len() != params.encoder.len() {
        return Err(Error::LengthMismatch {
            what: "encoder replacement",
            expected: params.encoder.len(),
            actual: encoder.len(),
        });
    }
    params.encoder.copy_from_slice(encoder);
    Ok(())
}

fn glorot_fill(layout: &Layout, rng: &mut impl Rng) -> ParamVector {
    let mut values = vec![0.0; layout.total_len()];
    for e in layout.entries() {
        if e.shape.len() == 2 {
            let bound = (6.0 / (e.shape[0] + e.shape[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in &mut values[e.offset..e.offset + e.len] {
                *v = dist.sample(rng);
            }
        }
    }
    ParamVector::new(values)
}

/// Deterministic initialization.
///
/// The encoder stream depends only on `seed`, so every task initialized
/// with the same seed starts from the same encoder; the decoder stream also
/// mixes in `task_id`. Weight matrices are drawn uniformly in
/// `±sqrt(6 / (fan_in + fan_out))`, biases are zero.
pub fn init_params(arch: &Architecture, head: &HeadKind, task_id: u32, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    head.validate()?;
    let enc_layout = arch.encoder_layout();
    let dec_layout = arch.decoder_layout(head);
    let encoder = glorot_fill(&enc_layout, &mut rng::stream(seed, &[rng::tag::ENCODER_INIT]));
    let decoder = glorot_fill(
        &dec_layout,
        &mut rng::stream(seed, &[rng::tag::DECODER_INIT, u64::from(task_id)]),
    );
    ModelParams::new(encoder, decoder, enc_layout, dec_layout)
}

/// Node handles produced by [`build_forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: NodeId,
    /// Parameter leaves in layout order: encoder entries, then decoder.
    pub leaves: Vec<NodeId>,
}

fn push_leaves(graph: &mut Graph, values: &[f64], layout: &Layout, out: &mut Vec<NodeId>) -> Result<()> {
    for e in layout.entries() {
        let t = Tensor::new(e.shape.clone(), values[e.offset..e.offset + e.len].to_vec())?;
        out.push(graph.param(t)?);
    }
    Ok(())
}

/// Records the forward pass of `params` on input node `x` into `graph`.
pub fn build_forward(
    graph: &mut Graph,
    arch: &Architecture,
    head: &HeadKind,
    params: &ModelParams,
    x: NodeId,
) -> Result<ForwardPass> {
    if !params.conforms_to(arch, head) {
        return Err(Error::invalid("parameters do not match the architecture"));
    }
    let xs = graph.value(x).shape();
    if xs.len() != 2 || xs[1] != arch.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: xs.to_vec(),
            right: vec![xs.first().copied().unwrap_or(1), arch.input_dim],
        });
    }
    let mut leaves = Vec::new();
    push_leaves(graph, &params.encoder, &params.encoder_layout, &mut leaves)?;
    push_leaves(graph, &params.decoder, &params.decoder_layout, &mut leaves)?;

    let mut h = x;
    for (i, layer) in arch.encoder.iter().enumerate() {
        let pre = graph.matmul(h, leaves[2 * i])?;
        let pre = graph.add(pre, leaves[2 * i + 1])?;
        h = match layer.activation {
            Activation::Tanh => graph.tanh(pre)?,
            Activation::Relu => graph.relu(pre)?,
            Activation::Identity => pre,
        };
    }
    let n_enc = leaves.len() - 2;
    let out = graph.matmul(h, leaves[n_enc])?;
    let output = graph.add(out, leaves[n_enc + 1])?;
    Ok(ForwardPass { output, leaves })
}

/// Appends the task loss for `output` against `targets`.
pub fn build_task_loss(graph: &mut Graph, head: &HeadKind, output: NodeId, targets: NodeId) -> Result<NodeId> {
    match *head {
        HeadKind::Regression { .. } => graph.mse(output, targets),
        HeadKind::Binary => graph.sigmoid_bce(output, targets),
        HeadKind::Classification { .. } => graph.softmax_cross_entropy(output, targets),
        HeadKind::PerPosition { classes, .. } => {
            let rows = graph.value(output).len() / classes;
            let o = graph.reshape(output, &[rows, classes])?;
            let t = graph.reshape(targets, &[rows, classes])?;
            graph.softmax_cross_entropy(o, t)
        }
    }
}

/// Model output for a batch `x` of shape `(n, input_dim)`.
pub fn forward(params: &ModelParams, arch: &Architecture, head: &HeadKind, x: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let xi = graph.input(x.clone())?;
    let pass = build_forward(&mut graph, arch, head, params, xi)?;
    Ok(graph.value(pass.output).clone())
}

/// Mean task loss of `params` on `(x, y)` and its gradient as a flat
/// encoder-then-decoder vector.
pub fn loss_and_grad(
    params: &ModelParams,
    arch: &Architecture,
    head: &HeadKind,
    x: &Tensor,
    y: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let mut graph = Graph::new();
    let xi = graph.input(x.clone())?;
    let yi = graph.input(y.clone())?;
    let pass = build_forward(&mut graph, arch, head, params, xi)?;
    let loss = build_task_loss(&mut graph, head, pass.output, yi)?;
    let grads = graph.backward(loss)?;
    let mut flat = Vec::with_capacity(params.total_len());
    for &leaf in &pass.leaves {
        flat.extend_from_slice(grads.get(leaf).data());
    }
    let value = graph.value(loss).item().expect("scalar loss");
    Ok((value, flat))
}

/// Mean task loss without gradients.
pub fn task_loss(params: &ModelParams, arch: &Architecture, head: &HeadKind, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut graph = Graph::new();
    let xi = graph.input(x.clone())?;
    let yi = graph.input(y.clone())?;
    let pass = build_forward(&mut graph, arch, head, params, xi)?;
    let loss = build_task_loss(&mut graph, head, pass.output, yi)?;
    Ok(graph.value(loss).item().expect("scalar loss"))
}
