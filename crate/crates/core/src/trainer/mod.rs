//! The bilevel training loop.
//!
//! Each iteration samples a training batch and a group-balanced meta batch,
//! takes a differentiable virtual SGD step `ŵ(m) = w − α∇_w L^T(w, m)`,
//! updates the learnable margins with the gradient of the meta skewness loss
//! evaluated at `ŵ(m)`, and finally takes the real model step with the new
//! margins held fixed.

mod model;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, NodeId, ParameterSet};
use crate::datagen::GroupedDataset;
use crate::losses::{
    adaptive_margin_loss, meta_skewness_loss, Batch, LossError, MarginSchedule, MarginVariant,
    MetaLossConfig,
};

pub use model::{Layer, ModelParams, HEAD_WEIGHT};
pub use optim::{LrSchedule, MarginOptimizer, MomentumSgd};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("numerical abort at iteration {iteration}: {message}")]
    NumericAbort {
        iteration: usize,
        message: String,
        /// Records of the iterations completed before the abort.
        trace: Box<TrainTrace>,
    },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TrainError {
    fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient(_)
                | TrainError::Autodiff(AutodiffError::NonFinite { .. })
                | TrainError::Loss(LossError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training method: the three meta-learned variants and the fixed-margin baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MbnArc,
    MbnCos,
    MbnSoft,
    Arcface,
    Cosface,
    Softmax,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::MbnArc, Mode::MbnCos, Mode::MbnSoft, Mode::Arcface, Mode::Cosface, Mode::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Mode::MbnArc => "mbn-arc",
            Mode::MbnCos => "mbn-cos",
            Mode::MbnSoft => "mbn-soft",
            Mode::Arcface => "arcface",
            Mode::Cosface => "cosface",
            Mode::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether margins are meta-learned.
    pub fn is_meta(self) -> bool {
        matches!(self, Mode::MbnArc | Mode::MbnCos | Mode::MbnSoft)
    }

    pub fn variant(self) -> MarginVariant {
        match self {
            Mode::MbnArc | Mode::MbnSoft | Mode::Arcface => MarginVariant::Arc,
            Mode::MbnCos | Mode::Cosface => MarginVariant::Cos,
            Mode::Softmax => MarginVariant::None,
        }
    }

    /// `(anchor margin, initial non-anchor margin)`.
    pub fn margins(self) -> (f64, f64) {
        match self {
            Mode::MbnArc | Mode::Arcface => (0.3, 0.3),
            Mode::MbnCos => (0.15, 0.15),
            Mode::Cosface => (0.2, 0.2),
            Mode::MbnSoft => (0.0, 0.3),
            Mode::Softmax => (0.0, 0.0),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub iterations: usize,
    /// Training batch size `n`; the meta batch also has `n` samples, `n/k` per group.
    pub batch_size: usize,
    /// Samples drawn per identity when composing a meta batch.
    pub meta_samples_per_identity: usize,
    /// Model learning rate `α`, used by both the virtual and the actual step.
    pub lr_model: LrSchedule,
    /// Margin learning rate `β`.
    pub lr_margin: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin_momentum: f64,
    pub variant: MarginVariant,
    pub anchors: Vec<usize>,
    pub anchor_margin: f64,
    pub initial_margin: f64,
    /// Clamp interval for learnable margins; the variant default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_bounds: Option<(f64, f64)>,
    pub scale: f64,
    pub meta: MetaLossConfig,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

pub const MODEL_DECAY_FRACTIONS: [f64; 3] = [0.45, 0.67, 0.86];
pub const MARGIN_DECAY_FRACTIONS: [f64; 2] = [0.55, 0.8];

impl TrainerConfig {
    /// Defaults for `mode` with decay milestones placed relative to `iterations`.
    pub fn for_mode(mode: Mode, iterations: usize, seed: u64) -> Self {
        let (anchor_margin, initial_margin) = mode.margins();
        Self {
            iterations,
            batch_size: 64,
            meta_samples_per_identity: 4,
            lr_model: LrSchedule::at_fractions(0.1, iterations, &MODEL_DECAY_FRACTIONS, 0.1),
            lr_margin: LrSchedule::at_fractions(1e-3, iterations, &MARGIN_DECAY_FRACTIONS, 0.1),
            momentum: 0.9,
            weight_decay: 5e-4,
            margin_momentum: 0.9,
            variant: mode.variant(),
            anchors: vec![0],
            anchor_margin,
            initial_margin,
            margin_bounds: None,
            scale: 60.0,
            meta: MetaLossConfig::default(),
            hidden: vec![32],
            embed_dim: 16,
            seed,
        }
    }

    /// Replaces the mode-dependent fields, keeping everything else.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        let (anchor_margin, initial_margin) = mode.margins();
        self.variant = mode.variant();
        self.anchor_margin = anchor_margin;
        self.initial_margin = initial_margin;
        self
    }

    pub fn validate(&self, group_count: usize) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size % group_count != 0 {
            return bad(format!(
                "batch size {} must be a positive multiple of the group count {group_count}",
                self.batch_size
            ));
        }
        if self.meta_samples_per_identity < 2 {
            return bad("meta batches need at least 2 samples per identity".into());
        }
        if !(self.lr_model.base > 0.0) {
            return bad("model learning rate must be positive".into());
        }
        if !(self.lr_margin.base >= 0.0) {
            return bad("margin learning rate must be non-negative".into());
        }
        for (name, v) in [("momentum", self.momentum), ("margin_momentum", self.margin_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if !(self.scale > 0.0) {
            return bad("scale must be positive".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        self.meta.validate()?;
        Ok(())
    }

    pub fn schedule(&self, group_count: usize) -> Result<MarginSchedule> {
        let s = MarginSchedule::new(
            group_count,
            self.anchors.iter().copied(),
            self.anchor_margin,
            self.initial_margin,
            self.variant,
        )?;
        Ok(match self.margin_bounds {
            Some((lo, hi)) => s.with_bounds(lo, hi)?,
            None => s,
        })
    }
}

/// Owned copy of a sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchData {
    pub features: Array,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl BatchData {
    pub fn from_indices(data: &GroupedDataset, indices: &[usize]) -> Self {
        Self {
            features: data.gather(indices),
            labels: indices.iter().map(|&i| data.identities[i]).collect(),
            groups: indices.iter().map(|&i| data.groups[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn in_graph<'a>(&'a self, embeddings: NodeId) -> Batch<'a> {
        Batch { embeddings, labels: &self.labels, groups: &self.groups }
    }
}

/// Uniform sample without replacement from the (biased) training set.
pub fn sample_train_batch(data: &GroupedDataset, size: usize, rng: &mut ChaCha8Rng) -> BatchData {
    let mut idx = index::sample(rng, data.len(), size.min(data.len())).into_vec();
    idx.sort_unstable();
    BatchData::from_indices(data, &idx)
}

/// Group-balanced meta batch: `size / k` samples per group, built from
/// randomly chosen identities with up to `per_identity` samples each.
pub fn sample_meta_batch(
    data: &GroupedDataset,
    group_count: usize,
    size: usize,
    per_identity: usize,
    rng: &mut ChaCha8Rng,
) -> BatchData {
    let by_group = data.identities_by_group();
    let by_identity = data.samples_by_identity();
    let quota = size / group_count;
    let mut idx = Vec::with_capacity(size);
    for g in 0..group_count {
        let Some(ids) = by_group.get(&g) else { continue };
        // At least two identities so every group has negatives.
        let wanted = quota.div_ceil(per_identity).max(2).min(ids.len());
        let take = quota.div_ceil(wanted).min(per_identity);
        let mut picked = Vec::new();
        for i in index::sample(rng, ids.len(), wanted) {
            let samples = &by_identity[ids[i]];
            for j in index::sample(rng, samples.len(), take.min(samples.len())) {
                picked.push(samples[j]);
            }
        }
        picked.truncate(quota);
        idx.extend(picked);
    }
    BatchData::from_indices(data, &idx)
}

fn leaf_map(params: &ParameterSet) -> BTreeMap<String, NodeId> {
    params.iter().map(|(n, id)| (n.to_string(), id)).collect()
}

/// `ŵ = w − α∇_w loss` with differentiable gradients, so `ŵ` stays a function
/// of every other parameter `loss` depends on.
pub fn virtual_step(
    graph: &mut Graph,
    loss: NodeId,
    weights: &ParameterSet,
    alpha: f64,
) -> Result<BTreeMap<String, NodeId>> {
    let grads = graph.gradient(loss, weights, true)?;
    let mut out = BTreeMap::new();
    for (name, w) in weights.iter() {
        let step = graph.scale(grads[name], alpha)?;
        out.insert(name.to_string(), graph.sub(w, step)?);
    }
    Ok(out)
}

/// Result of one meta evaluation at the current margins.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub train_loss: f64,
    pub meta_loss: f64,
    /// `∂L^M(ŵ(m))/∂m_g` per learnable group.
    pub grads: BTreeMap<usize, f64>,
    pub skewness: BTreeMap<usize, f64>,
    pub triplet_counts: BTreeMap<usize, usize>,
}

/// Builds `L^T`, the virtual step, and `L^M` at `ŵ(m)` in one graph and
/// returns the meta-gradient with respect to the learnable margins.
pub fn meta_gradient(
    model: &ModelParams,
    schedule: &MarginSchedule,
    train: &BatchData,
    meta: &BatchData,
    alpha: f64,
    config: &MetaLossConfig,
) -> Result<MetaStep> {
    let mut g = Graph::new();
    let params = model.register(&mut g)?;
    let margins = schedule.register(&mut g)?;
    let weights = leaf_map(&params);

    let x = g.constant(train.features.clone());
    let emb = model.forward(&mut g, &weights, x)?;
    let head = model.head_node(&weights)?;
    let lt = adaptive_margin_loss(&mut g, &train.in_graph(emb), head, schedule, &margins)?;
    let train_loss = g.evaluate_scalar(lt)?;

    // The meta loss only sees the encoder, so the head is left out of ŵ.
    let names = model.encoder_names();
    let encoder = params.select(names.iter().map(String::as_str))?;
    let virtual_weights = virtual_step(&mut g, lt, &encoder, alpha)?;

    let xm = g.constant(meta.features.clone());
    let emb_meta = model.forward(&mut g, &virtual_weights, xm)?;
    let ml = meta_skewness_loss(
        &mut g,
        emb_meta,
        &meta.labels,
        &meta.groups,
        schedule.anchors(),
        schedule.group_count(),
        config,
    )?;
    let meta_loss = g.evaluate_scalar(ml.loss)?;
    let grads = g
        .gradient_values(ml.loss, &margins)?
        .into_iter()
        .map(|(name, v)| {
            let group = name["margin.".len()..].parse().expect("margin parameter name");
            (group, v[[0, 0]])
        })
        .collect();
    Ok(MetaStep {
        train_loss,
        meta_loss,
        grads,
        skewness: ml.skewness,
        triplet_counts: ml.triplet_counts,
    })
}

/// Meta-gradient followed by a momentum step on the margins.
#[allow(clippy::too_many_arguments)]
pub fn margin_step(
    model: &ModelParams,
    schedule: &mut MarginSchedule,
    optimizer: &mut MarginOptimizer,
    train: &BatchData,
    meta: &BatchData,
    alpha: f64,
    beta: f64,
    config: &MetaLossConfig,
) -> Result<MetaStep> {
    let step = meta_gradient(model, schedule, train, meta, alpha, config)?;
    optimizer.step(schedule, &step.grads, beta)?;
    Ok(step)
}

/// One actual SGD step with the margins detached. Returns the loss before the step.
pub fn model_step(
    model: &mut ModelParams,
    optimizer: &mut MomentumSgd,
    schedule: &MarginSchedule,
    train: &BatchData,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.register(&mut g)?;
    let weights = leaf_map(&params);
    let x = g.constant(train.features.clone());
    let emb = model.forward(&mut g, &weights, x)?;
    let head = model.head_node(&weights)?;
    let loss = adaptive_margin_loss(&mut g, &train.in_graph(emb), head, schedule, &ParameterSet::new())?;
    let value = g.evaluate_scalar(loss)?;
    let grads = g.gradient_values(loss, &params)?;
    optimizer.step(model, &grads, lr)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Margins of all groups after this iteration's margin update.
    pub margins: Vec<f64>,
    pub train_loss: f64,
    pub meta_loss: Option<f64>,
    /// Signed skewness per non-anchor group (empty when no meta step ran).
    pub skewness: BTreeMap<usize, f64>,
    pub lr_model: f64,
    pub lr_margin: f64,
    pub margin_update_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub group_count: usize,
    pub anchors: Vec<usize>,
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    fn non_anchor_groups(&self) -> Vec<usize> {
        (0..self.group_count).filter(|g| !self.anchors.contains(g)).collect()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["iteration".to_string()];
        h.extend((0..self.group_count).map(|g| format!("m_{g}")));
        h.push("L_T".into());
        h.push("L_M".into());
        h.extend(self.non_anchor_groups().iter().map(|g| format!("B_{g}")));
        h.extend(["lr_model", "lr_margin", "margin_update_skipped"].map(String::from));
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.csv_header())?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![r.iteration.to_string()];
            row.extend(r.margins.iter().map(f64::to_string));
            row.push(r.train_loss.to_string());
            row.push(opt(r.meta_loss));
            row.extend(self.non_anchor_groups().iter().map(|g| opt(r.skewness.get(g).copied())));
            row.push(r.lr_model.to_string());
            row.push(r.lr_margin.to_string());
            row.push(u8::from(r.margin_update_skipped).to_string());
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Train and meta splits for one run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a GroupedDataset,
    pub meta: &'a GroupedDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub schedule: MarginSchedule,
    pub trace: TrainTrace,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
// Meta sampling has its own stream so the training batches do not depend on
// whether meta steps run.
const META_STREAM: u64 = 3;

/// Meta-learned margins: virtual step, margin step, model step per iteration.
pub fn train(data: TrainData<'_>, config: &TrainerConfig) -> Result<TrainOutput> {
    run(data, config, true)
}

/// Fixed margins at their initial values; no meta step.
pub fn train_baseline(data: TrainData<'_>, config: &TrainerConfig) -> Result<TrainOutput> {
    run(data, config, false)
}

/// Dispatches on the mode: meta training for MBN variants, baseline otherwise.
pub fn train_mode(data: TrainData<'_>, config: &TrainerConfig, mode: Mode) -> Result<TrainOutput> {
    let config = config.clone().with_mode(mode);
    run(data, &config, mode.is_meta())
}

fn run(data: TrainData<'_>, config: &TrainerConfig, meta_enabled: bool) -> Result<TrainOutput> {
    let k = data.train.group_count();
    config.validate(k)?;
    if data.meta.dim() != data.train.dim() {
        return Err(TrainError::Config("train and meta dimensions differ".into()));
    }
    if config.batch_size > data.train.len() {
        return Err(TrainError::Config(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            data.train.len()
        )));
    }
    let mut schedule = config.schedule(k)?;
    let meta_enabled = meta_enabled
        && config.variant != MarginVariant::None
        && !schedule.learnable().is_empty();

    let mut model = ModelParams::random(
        data.train.dim(),
        &config.hidden,
        config.embed_dim,
        data.train.class_count(),
        config.scale,
        &mut rng(config.seed, INIT_STREAM),
    )?;
    let mut train_rng = rng(config.seed, TRAIN_STREAM);
    let mut meta_rng = rng(config.seed, META_STREAM);
    let mut model_opt = MomentumSgd::new(config.momentum, config.weight_decay);
    let mut margin_opt = MarginOptimizer::new(config.margin_momentum);
    let mut trace = TrainTrace {
        group_count: k,
        anchors: schedule.anchors().iter().copied().collect(),
        records: Vec::with_capacity(config.iterations),
    };

    for t in 0..config.iterations {
        let lr_model = config.lr_model.at(t);
        let lr_margin = config.lr_margin.at(t);
        let batch = sample_train_batch(data.train, config.batch_size, &mut train_rng);

        let mut meta_loss = None;
        let mut skewness = BTreeMap::new();
        let mut skipped = false;
        if meta_enabled {
            let mut attempt = 0;
            loop {
                let meta = sample_meta_batch(
                    data.meta,
                    k,
                    config.batch_size,
                    config.meta_samples_per_identity,
                    &mut meta_rng,
                );
                let step = margin_step(
                    &model,
                    &mut schedule,
                    &mut margin_opt,
                    &batch,
                    &meta,
                    lr_model,
                    lr_margin,
                    &config.meta,
                );
                match step {
                    Ok(s) => {
                        meta_loss = Some(s.meta_loss);
                        skewness = s.skewness;
                        break;
                    }
                    Err(TrainError::Loss(LossError::InsufficientTriplets(_))) if attempt == 0 => {
                        attempt += 1;
                    }
                    Err(TrainError::Loss(LossError::InsufficientTriplets(_))) => {
                        skipped = true;
                        break;
                    }
                    Err(e) => return Err(abort(e, t, trace)),
                }
            }
        }

        let train_loss = match model_step(&mut model, &mut model_opt, &schedule, &batch, lr_model) {
            Ok(v) => v,
            Err(e) => return Err(abort(e, t, trace)),
        };
        trace.records.push(TraceRecord {
            iteration: t,
            margins: schedule.all_margins(),
            train_loss,
            meta_loss,
            skewness,
            lr_model,
            lr_margin,
            margin_update_skipped: skipped,
        });
    }
    Ok(TrainOutput { model, schedule, trace })
}

fn abort(err: TrainError, iteration: usize, trace: TrainTrace) -> TrainError {
    if err.is_numeric() {
        TrainError::NumericAbort { iteration, message: err.to_string(), trace: Box::new(trace) }
    } else {
        err
    }
}
