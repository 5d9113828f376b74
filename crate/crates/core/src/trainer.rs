//! Dense feature network with a sigmoid multi-label head, hand-written
//! backpropagation, Adam with cosine warm restarts and the joint objective.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouptriplet::{
    gtt_loss, mine_triplets, pair_distance, DistanceMeasure, Embedding, Triplet, TripletError,
    DEFAULT_M_EPS,
};
use crate::hierarchy::{random_tree, LabelTree, NodeId, TreeError, WeightScheme};
use crate::hkloss::{
    bce_loss, fht_loss, ht_loss, Aggregation, LossError, ScoreVector, GAMMA_MAX, PROB_EPS,
};
use crate::inference::{compute_metrics, infer_path, InferenceError, MetricsReport, PathPrediction};
use crate::signal::{FeatureSpec, WindowFn};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DHKM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ALPHA_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter and gradient lengths differ ({params} vs {grads})")]
    ShapeMismatch { params: usize, grads: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {0} is not a leaf of the tree")]
    LabelNotInTree(NodeId),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Fully connected network stored as one flat parameter vector. Layer `l`
/// maps `widths[l]` to `widths[l + 1]` with a row-major weight block followed
/// by its bias. Hidden layers use tanh; the head is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    widths: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Network {
    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self, TrainError> {
        if widths.len() < 3 {
            return Err(TrainError::InvalidShape("need input, at least one hidden layer and a head".into()));
        }
        if widths.contains(&0) || widths[1..widths.len() - 1].iter().any(|&w| w < 2) {
            return Err(TrainError::InvalidShape(format!("widths {widths:?}")));
        }
        if params.len() != param_count(&widths) {
            return Err(TrainError::InvalidShape(format!(
                "{} parameters for widths {widths:?}, expected {}",
                params.len(),
                param_count(&widths)
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::InvalidShape("non-finite parameter".into()));
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn out_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }
}

pub fn init_network(input: usize, hidden: &[usize], out: usize, seed: u64) -> Result<Network, TrainError> {
    if hidden.is_empty() {
        return Err(TrainError::InvalidShape("at least one hidden layer is required".into()));
    }
    if input == 0 || out == 0 || hidden.iter().any(|&w| w < 2) {
        return Err(TrainError::InvalidShape(format!(
            "input {input}, hidden {hidden:?}, out {out}: hidden widths must be at least 2"
        )));
    }
    let widths: Vec<usize> = std::iter::once(input).chain(hidden.iter().copied()).chain([out]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(&widths));
    for w in widths.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..=bound)));
        params.extend(std::iter::repeat_n(0.0, w[1]));
    }
    Network::from_parts(widths, params)
}

/// Activations kept for backpropagation: the input and every hidden output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub scores: ScoreVector,
    pub cache: ForwardCache,
}

fn affine(params: &[f64], input: &[f64], out: usize) -> Vec<f64> {
    let n = input.len();
    let (w, b) = params.split_at(n * out);
    (0..out)
        .map(|r| b[r] + w[r * n..(r + 1) * n].iter().zip(input).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}

pub fn forward(net: &Network, features: &[f64]) -> Result<ForwardOutput, TrainError> {
    if features.len() != net.input_dim() {
        return Err(TrainError::DimensionMismatch { expected: net.input_dim(), got: features.len() });
    }
    let mut activations = vec![features.to_vec()];
    let last = net.layers() - 1;
    for l in 0..last {
        let z = affine(&net.params[net.offset(l)..], &activations[l], net.widths[l + 1]);
        activations.push(z.into_iter().map(f64::tanh).collect());
    }
    let logits = affine(&net.params[net.offset(last)..], &activations[last], net.widths[last + 1]);
    Ok(ForwardOutput {
        embedding: activations[last].clone(),
        scores: ScoreVector::from_logits(&logits),
        logits,
        cache: ForwardCache { activations },
    })
}

/// Accumulates into `grad` the parameter gradient given the loss gradient
/// with respect to the logits and, optionally, to the embedding.
pub fn backward(
    net: &Network,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_embedding: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<(), TrainError> {
    if grad.len() != net.num_params() {
        return Err(TrainError::ShapeMismatch { params: net.num_params(), grads: grad.len() });
    }
    if d_logits.len() != net.out_dim() {
        return Err(TrainError::DimensionMismatch { expected: net.out_dim(), got: d_logits.len() });
    }
    let mut delta = d_logits.to_vec();
    for l in (0..net.layers()).rev() {
        let input = &cache.activations[l];
        let (n, m) = (net.widths[l], net.widths[l + 1]);
        let off = net.offset(l);
        for r in 0..m {
            let row = &mut grad[off + r * n..off + (r + 1) * n];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += delta[r] * x;
            }
            grad[off + n * m + r] += delta[r];
        }
        if l == 0 {
            break;
        }
        let w = &net.params[off..off + n * m];
        let mut d_input: Vec<f64> = (0..n).map(|c| (0..m).map(|r| w[r * n + c] * delta[r]).sum()).collect();
        if l == net.layers() - 1 {
            if let Some(de) = d_embedding {
                for (d, &e) in d_input.iter_mut().zip(de) {
                    *d += e;
                }
            }
        }
        delta = d_input.iter().zip(input).map(|(d, a)| d * (1.0 - a * a)).collect();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Flat binary cross-entropy on every node.
    Bce,
    /// Hierarchical tree loss, no focal term, no triplets.
    Ht,
    /// Focal hierarchical tree loss, no triplets.
    Fht,
    /// Focal hierarchical tree loss plus `alpha` times the group tree triplet loss.
    Dhk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub gamma: f64,
    pub m_eps: f64,
    pub alpha: f64,
    pub weights: WeightScheme,
    pub aggregation: Aggregation,
    pub distance: DistanceMeasure,
    pub lr0: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub restart_period: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dhk,
            gamma: 2.0,
            m_eps: DEFAULT_M_EPS,
            alpha: 0.1,
            weights: WeightScheme::Phw,
            aggregation: Aggregation::Hard,
            distance: DistanceMeasure::Cosine,
            lr0: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 64,
            restart_period: 20,
            hidden: vec![32, 16],
            seed: 0,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig { field, reason: reason.into() }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=GAMMA_MAX).contains(&self.gamma) {
            return Err(bad("gamma", format!("{} is outside [0, {GAMMA_MAX}]", self.gamma)));
        }
        if !(0.0..=ALPHA_MAX).contains(&self.alpha) {
            return Err(bad("alpha", format!("{} is outside [0, {ALPHA_MAX}]", self.alpha)));
        }
        if !(self.m_eps >= 0.0 && self.m_eps.is_finite()) {
            return Err(bad("m_eps", format!("{} must be finite and non-negative", self.m_eps)));
        }
        if let Aggregation::Smooth { beta } = self.aggregation {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(bad("beta", format!("{beta} must be positive")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(bad("lr0", format!("{} must be positive", self.lr0)));
        }
        for (field, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(field, format!("{b} is outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(bad("adam_eps", format!("{} must be positive", self.adam_eps)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.restart_period == 0 {
            return Err(bad("restart_period", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w < 2) {
            return Err(bad("hidden", format!("{:?}: need at least one layer, widths at least 2", self.hidden)));
        }
        Ok(())
    }

    fn uses_triplets(&self) -> bool {
        self.objective == Objective::Dhk && self.alpha > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub leaf: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub value: f64,
    /// Batch mean of the per-sample classification loss.
    pub classification: f64,
    pub triplet: f64,
    pub grad: Vec<f64>,
}

fn sample_loss(
    tree: &LabelTree,
    scores: &ScoreVector,
    leaf: NodeId,
    config: &TrainConfig,
) -> Result<crate::hkloss::LossResult, TrainError> {
    let label = tree.expand_leaf_label(leaf)?;
    Ok(match config.objective {
        Objective::Bce => bce_loss(scores, &label)?,
        Objective::Ht => ht_loss(tree, scores, &label, config.weights, config.aggregation)?,
        Objective::Fht | Objective::Dhk => {
            fht_loss(tree, scores, &label, config.gamma, config.weights, config.aggregation)?
        }
    })
}

fn check_batch(tree: &LabelTree, net: &Network, batch: &[&Sample]) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if net.out_dim() != tree.num_scored() {
        return Err(TrainError::InvalidShape(format!(
            "head has {} outputs, tree has {} scored nodes",
            net.out_dim(),
            tree.num_scored()
        )));
    }
    for s in batch {
        if !tree.is_leaf(s.leaf) {
            return Err(TrainError::LabelNotInTree(s.leaf));
        }
    }
    Ok(())
}

/// Batch objective and its gradient with respect to every network parameter.
/// Triplets are mined from the batch labels with `mining_seed`.
pub fn joint_loss(
    tree: &LabelTree,
    net: &Network,
    batch: &[&Sample],
    config: &TrainConfig,
    mining_seed: u64,
) -> Result<JointLoss, TrainError> {
    check_batch(tree, net, batch)?;
    let outputs = batch
        .iter()
        .map(|s| forward(net, &s.features))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut classification = 0.0;
    let mut d_logits = Vec::with_capacity(batch.len());
    for (s, out) in batch.iter().zip(&outputs) {
        let r = sample_loss(tree, &out.scores, s.leaf, config)?;
        classification += r.value * scale;
        d_logits.push(r.grad_logits.into_iter().map(|g| g * scale).collect::<Vec<_>>());
    }

    let mut triplet = 0.0;
    let mut d_embed: Option<Vec<Vec<f64>>> = None;
    if config.uses_triplets() {
        let leaves: Vec<NodeId> = batch.iter().map(|s| s.leaf).collect();
        let triplets = mine_triplets(tree, &leaves, config.m_eps, mining_seed)?;
        if !triplets.is_empty() {
            let embeddings = outputs
                .iter()
                .map(|o| Embedding::new(o.embedding.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let r = gtt_loss(&embeddings, &triplets, config.distance)?;
            triplet = r.value;
            d_embed = Some(
                r.grad
                    .into_iter()
                    .map(|g| g.into_iter().map(|x| x * config.alpha).collect())
                    .collect(),
            );
        }
    }

    let mut grad = vec![0.0; net.num_params()];
    for (i, out) in outputs.iter().enumerate() {
        let de = d_embed.as_ref().map(|d| d[i].as_slice());
        backward(net, &out.cache, &d_logits[i], de, &mut grad)?;
    }
    let alpha = if config.uses_triplets() { config.alpha } else { 0.0 };
    Ok(JointLoss { value: classification + alpha * triplet, classification, triplet, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch { params: params.len(), grads: grads.len() });
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine annealing with warm restarts every `period` epochs.
pub fn cosine_lr(epoch: usize, lr0: f64, period: usize) -> f64 {
    let period = period.max(1);
    let phase = (epoch % period) as f64 / period as f64;
    lr0 * 0.5 * (1.0 + (PI * phase).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub classification: f64,
    pub triplet: f64,
    pub joint: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,fht,gtt,joint,train_accuracy,eval_accuracy\n");
        for r in &self.records {
            let eval = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.classification, r.triplet, r.joint, r.train_accuracy, eval
            );
        }
        out
    }
}

pub fn predict(net: &Network, tree: &LabelTree, features: &[f64]) -> Result<(PathPrediction, ScoreVector), TrainError> {
    let out = forward(net, features)?;
    let p = infer_path(tree, &out.scores)?;
    Ok((p, out.scores))
}

pub fn evaluate(net: &Network, tree: &LabelTree, samples: &[Sample]) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut pred = Vec::with_capacity(samples.len());
    for s in samples {
        pred.push(predict(net, tree, &s.features)?.0.leaf);
    }
    let truth: Vec<NodeId> = samples.iter().map(|s| s.leaf).collect();
    Ok(compute_metrics(tree, &pred, &truth)?)
}

fn accuracy(net: &Network, tree: &LabelTree, samples: &[Sample]) -> Result<f64, TrainError> {
    Ok(evaluate(net, tree, samples)?.accuracy)
}

/// Whether every non-root node on `path` scores no higher than its parent
/// (the first scored node is unconstrained).
pub fn path_is_consistent(scores: &ScoreVector, path: &[NodeId]) -> bool {
    path.windows(2).skip(1).all(|w| scores.get(w[1]) <= scores.get(w[0]))
}

pub fn train(
    tree: &LabelTree,
    samples: &[Sample],
    eval: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory), TrainError> {
    config.validate()?;
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    for s in samples.iter().chain(eval.unwrap_or(&[])) {
        if !tree.is_leaf(s.leaf) {
            return Err(TrainError::LabelNotInTree(s.leaf));
        }
    }
    let mut net = init_network(first.features.len(), &config.hidden, tree.num_scored(), config.seed)?;
    let mut adam = AdamState::new(net.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.lr0, config.restart_period);
        order.shuffle(&mut rng);
        let (mut cls, mut trip, mut joint) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = joint_loss(tree, &net, &batch, config, rng.next_u64())?;
            let w = batch.len() as f64 / samples.len() as f64;
            cls += loss.classification * w;
            trip += loss.triplet * w;
            joint += loss.value * w;
            adam_step(net.params_mut(), &loss.grad, &mut adam, lr, config.betas, config.adam_eps)?;
        }
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            classification: cls,
            triplet: trip,
            joint,
            train_accuracy: accuracy(&net, tree, samples)?,
            eval_accuracy: match eval {
                Some(e) if !e.is_empty() => Some(accuracy(&net, tree, e)?),
                _ => None,
            },
        });
    }
    Ok((net, history))
}

fn window_fn_code(w: WindowFn) -> u32 {
    match w {
        WindowFn::Hann => 0,
        WindowFn::Rect => 1,
    }
}

/// `DHKM`, version, layer count, widths, feature pipeline, then the
/// parameters as little-endian f64.
pub fn encode_checkpoint(net: &Network, features: &FeatureSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * net.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let mut word = |v: u32| out.extend_from_slice(&v.to_le_bytes());
    word(CHECKPOINT_VERSION);
    word(net.widths.len() as u32);
    for &w in &net.widths {
        word(w as u32);
    }
    for v in [features.window, features.step, features.stft_window, features.stft_hop] {
        word(v as u32);
    }
    word(window_fn_code(features.window_fn));
    word(features.bands as u32);
    for p in &net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, FeatureSpec), TrainError> {
    let corrupt = |m: &str| TrainError::CheckpointCorrupt(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut pos = 4;
    let mut word = || -> Result<usize, TrainError> {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| corrupt("truncated header"))?;
        pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    if word()? != CHECKPOINT_VERSION as usize {
        return Err(corrupt("unsupported version"));
    }
    let n = word()?;
    if !(3..=64).contains(&n) {
        return Err(corrupt("implausible layer count"));
    }
    let widths = (0..n).map(|_| word()).collect::<Result<Vec<_>, _>>()?;
    let (window, step, stft_window, stft_hop) = (word()?, word()?, word()?, word()?);
    let window_fn = match word()? {
        0 => WindowFn::Hann,
        1 => WindowFn::Rect,
        _ => return Err(corrupt("unknown window function")),
    };
    let bands = word()?;
    let features = FeatureSpec { window, step, stft_window, stft_hop, window_fn, bands };
    let start = 4 * (n + 9);
    let body = &bytes[start.min(bytes.len())..];
    if !body.len().is_multiple_of(8) || body.len() / 8 != param_count(&widths) {
        return Err(corrupt("parameter block does not match the layer widths"));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let net = Network::from_parts(widths, params).map_err(|e| TrainError::CheckpointCorrupt(e.to_string()))?;
    Ok((net, features))
}

pub const FD_STEP: f64 = 1e-6;
const TIE_GAP: f64 = 1e-5;
const KINK_GAP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseOutcome {
    Checked,
    SkippedTie,
    SkippedKink,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked: usize,
    pub skipped_ties: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_params: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, outcome: CaseOutcome, err: f64, params: usize) {
        self.trials += 1;
        self.max_params = self.max_params.max(params);
        match outcome {
            CaseOutcome::Checked => {
                self.checked += 1;
                self.max_rel_error = self.max_rel_error.max(err);
            }
            CaseOutcome::SkippedTie => self.skipped_ties += 1,
            CaseOutcome::SkippedKink => self.skipped_kinks += 1,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "trials: {}\nchecked: {}\nskipped_tie: {}\nskipped_kink: {}\nmax_params: {}\nmax_rel_error: {:.3e}\n",
            self.trials, self.checked, self.skipped_ties, self.skipped_kinks, self.max_params, self.max_rel_error
        )
    }
}

fn near_tie(values: impl Iterator<Item = f64>, minimum: bool) -> bool {
    let mut v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return false;
    }
    v.sort_by(f64::total_cmp);
    let gap = if minimum { v[1] - v[0] } else { v[v.len() - 1] - v[v.len() - 2] };
    gap < TIE_GAP
}

/// Whether a tiny parameter perturbation could switch the extremum that
/// receives the gradient in hard mode.
fn has_hard_tie(tree: &LabelTree, scores: &ScoreVector, leaf: NodeId) -> Result<bool, TrainError> {
    let label = tree.expand_leaf_label(leaf)?;
    for v in tree.scored_nodes() {
        let tie = if label.is_positive(v) {
            near_tie(tree.ancestors(v)?.iter().map(|&u| scores.get(u)), true)
        } else {
            near_tie(tree.descendants(v)?.iter().map(|&u| scores.get(u)), false)
        };
        if tie {
            return Ok(true);
        }
    }
    Ok(false)
}

fn has_kink(
    outputs: &[ForwardOutput],
    triplets: &[Triplet],
    measure: DistanceMeasure,
) -> Result<bool, TrainError> {
    let near_clamp = |s: f64| (s - PROB_EPS).abs() < KINK_GAP || (s - (1.0 - PROB_EPS)).abs() < KINK_GAP;
    if outputs.iter().any(|o| o.scores.as_slice().iter().any(|&s| near_clamp(s))) {
        return Ok(true);
    }
    for t in triplets {
        let e = |i: usize| Embedding::new(outputs[i].embedding.clone());
        let a = e(t.anchor_idx)?;
        let hinge = pair_distance(&a, &e(t.pos_idx)?, measure)? - pair_distance(&a, &e(t.neg_idx)?, measure)?
            + t.margin;
        if hinge.abs() < KINK_GAP {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Compares the analytic joint gradient with central finite differences on
/// one batch. Returns the outcome and the worst relative error.
pub fn check_case(
    tree: &LabelTree,
    net: &Network,
    batch: &[Sample],
    config: &TrainConfig,
    mining_seed: u64,
) -> Result<(CaseOutcome, f64), TrainError> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let outputs = batch.iter().map(|s| forward(net, &s.features)).collect::<Result<Vec<_>, _>>()?;
    if config.aggregation == Aggregation::Hard {
        for (s, o) in batch.iter().zip(&outputs) {
            if has_hard_tie(tree, &o.scores, s.leaf)? {
                return Ok((CaseOutcome::SkippedTie, 0.0));
            }
        }
    }
    if config.uses_triplets() {
        let leaves: Vec<NodeId> = batch.iter().map(|s| s.leaf).collect();
        let triplets = mine_triplets(tree, &leaves, config.m_eps, mining_seed)?;
        if has_kink(&outputs, &triplets, config.distance)? {
            return Ok((CaseOutcome::SkippedKink, 0.0));
        }
    } else if has_kink(&outputs, &[], config.distance)? {
        return Ok((CaseOutcome::SkippedKink, 0.0));
    }

    let analytic = joint_loss(tree, net, &refs, config, mining_seed)?.grad;
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for i in 0..net.num_params() {
        let p0 = net.params[i];
        probe.params[i] = p0 + FD_STEP;
        let up = joint_loss(tree, &probe, &refs, config, mining_seed)?.value;
        probe.params[i] = p0 - FD_STEP;
        let down = joint_loss(tree, &probe, &refs, config, mining_seed)?.value;
        probe.params[i] = p0;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok((CaseOutcome::Checked, worst))
}

fn random_batch<R: Rng>(rng: &mut R, tree: &LabelTree, input: usize, size: usize) -> Vec<Sample> {
    let leaves = tree.leaves();
    (0..size)
        .map(|_| Sample {
            features: (0..input).map(|_| rng.random_range(-1.5..1.5)).collect(),
            leaf: leaves[rng.random_range(0..leaves.len())],
        })
        .collect()
}

const CHECK_INPUT: usize = 3;
const CHECK_HIDDEN: [usize; 2] = [4, 3];
const CHECK_BATCH: usize = 6;

/// Gradient check on a fixed tree and objective over `trials` random tiny
/// networks and batches.
pub fn gradient_check(
    tree: &LabelTree,
    config: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..trials {
        let net = init_network(CHECK_INPUT, &CHECK_HIDDEN, tree.num_scored(), rng.next_u64())?;
        let batch = random_batch(&mut rng, tree, CHECK_INPUT, CHECK_BATCH);
        let (outcome, err) = check_case(tree, &net, &batch, config, rng.next_u64())?;
        report.absorb(outcome, err, net.num_params());
    }
    Ok(report)
}

/// Gradient check over `trials` randomized cases: random trees of at most 16
/// nodes and height 1 to 4, random objective settings, tiny networks. Cases
/// that land on a hinge or clamp kink are counted and redrawn.
pub fn randomized_gradient_check(
    trials: usize,
    seed: u64,
    aggregation: Aggregation,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut done = 0;
    let mut attempts = 0;
    while done < trials && attempts < trials * 20 {
        attempts += 1;
        let height = rng.random_range(1..=4);
        let tree = random_tree(&mut rng, 16, height);
        if tree.leaves().len() < 2 {
            continue;
        }
        let config = TrainConfig {
            objective: [Objective::Bce, Objective::Ht, Objective::Fht, Objective::Dhk][rng.random_range(0..4)],
            gamma: rng.random_range(0.0..=GAMMA_MAX),
            alpha: rng.random_range(0.0..=ALPHA_MAX),
            weights: [WeightScheme::None, WeightScheme::Nhw, WeightScheme::Phw][rng.random_range(0..3)],
            distance: if rng.random_bool(0.5) { DistanceMeasure::Cosine } else { DistanceMeasure::Euclidean },
            aggregation,
            ..TrainConfig::default()
        };
        let net = init_network(CHECK_INPUT, &CHECK_HIDDEN, tree.num_scored(), rng.next_u64())?;
        let batch = random_batch(&mut rng, &tree, CHECK_INPUT, CHECK_BATCH);
        let (outcome, err) = check_case(&tree, &net, &batch, &config, rng.next_u64())?;
        report.absorb(outcome, err, net.num_params());
        if outcome != CaseOutcome::SkippedKink {
            done += 1;
        }
    }
    Ok(report)
}
