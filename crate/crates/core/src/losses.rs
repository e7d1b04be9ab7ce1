//! Adaptive-margin softmax losses and the meta skewness loss.
//!
//! Both margin variants operate on cosine logits between L2-normalized
//! embeddings and L2-normalized classifier columns:
//!
//! - arc: the true-class angle is widened, `cos(θ_y + λ_g)`;
//! - cos: the true-class cosine is shifted, `cos θ_y − λ_g`.
//!
//! `λ_g` is the fixed anchor margin for anchor groups and a learnable margin
//! for every other group. Learnable margins enter the graph as `1×1`
//! parameters so the loss is differentiable in them.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, NodeId, ParameterSet};

/// Row norms of embeddings must be within this distance of 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} of sample {index} outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("group {0} is not covered by the margin schedule")]
    UnknownGroup(usize),
    #[error("embedding row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("insufficient meta triplets for group {0}")]
    InsufficientTriplets(usize),
    #[error("invalid margin schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("batch has {embeddings} embeddings but {labels} labels and {groups} groups")]
    LengthMismatch { embeddings: usize, labels: usize, groups: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginVariant {
    Arc,
    Cos,
    /// Plain normalized softmax; margins have no effect.
    None,
}

impl MarginVariant {
    /// Clamp interval applied to learnable margins after every update.
    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            MarginVariant::Arc => (0.0, 1.0),
            MarginVariant::Cos => (0.0, 0.8),
            MarginVariant::None => (0.0, 0.0),
        }
    }
}

/// Per-group margins: a fixed margin for anchor groups, learnable otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    group_count: usize,
    anchors: BTreeSet<usize>,
    anchor_margin: f64,
    margins: BTreeMap<usize, f64>,
    variant: MarginVariant,
    bounds: (f64, f64),
}

impl MarginSchedule {
    pub fn new(
        group_count: usize,
        anchors: impl IntoIterator<Item = usize>,
        anchor_margin: f64,
        initial_margin: f64,
        variant: MarginVariant,
    ) -> Result<Self> {
        let anchors: BTreeSet<usize> = anchors.into_iter().collect();
        if group_count == 0 {
            return Err(LossError::InvalidSchedule("group count must be positive".into()));
        }
        if anchors.is_empty() {
            return Err(LossError::InvalidSchedule("anchor set is empty".into()));
        }
        if let Some(&g) = anchors.iter().find(|&&g| g >= group_count) {
            return Err(LossError::InvalidSchedule(format!(
                "anchor group {g} outside [0, {group_count})"
            )));
        }
        if group_count > 1 && anchors.len() == group_count {
            return Err(LossError::InvalidSchedule(
                "anchors must be a strict subset of the groups".into(),
            ));
        }
        if !anchor_margin.is_finite() || !initial_margin.is_finite() {
            return Err(LossError::InvalidSchedule("margins must be finite".into()));
        }
        let bounds = variant.default_bounds();
        let margins = (0..group_count)
            .filter(|g| !anchors.contains(g))
            .map(|g| (g, initial_margin.clamp(bounds.0, bounds.1)))
            .collect();
        Ok(Self {
            group_count,
            anchors,
            anchor_margin,
            margins,
            variant,
            bounds,
        })
    }

    /// Overrides the clamp interval and re-clamps current margins.
    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(LossError::InvalidSchedule(format!("empty bounds [{lo}, {hi}]")));
        }
        self.bounds = (lo, hi);
        for m in self.margins.values_mut() {
            *m = m.clamp(lo, hi);
        }
        Ok(self)
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn anchors(&self) -> &BTreeSet<usize> {
        &self.anchors
    }

    pub fn is_anchor(&self, group: usize) -> bool {
        self.anchors.contains(&group)
    }

    pub fn anchor_margin(&self) -> f64 {
        self.anchor_margin
    }

    pub fn variant(&self) -> MarginVariant {
        self.variant
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// Learnable margins keyed by non-anchor group id.
    pub fn learnable(&self) -> &BTreeMap<usize, f64> {
        &self.margins
    }

    /// `λ_g`: the anchor margin for anchors, the learned margin otherwise.
    pub fn margin(&self, group: usize) -> Result<f64> {
        if self.anchors.contains(&group) {
            Ok(self.anchor_margin)
        } else {
            self.margins
                .get(&group)
                .copied()
                .ok_or(LossError::UnknownGroup(group))
        }
    }

    /// Margin of every group, anchors included.
    pub fn all_margins(&self) -> Vec<f64> {
        (0..self.group_count)
            .map(|g| self.margin(g).expect("every group has a margin"))
            .collect()
    }

    /// Sets a learnable margin, clamped into bounds.
    pub fn set_margin(&mut self, group: usize, value: f64) -> Result<()> {
        if self.anchors.contains(&group) {
            return Err(LossError::InvalidSchedule(format!("group {group} is an anchor")));
        }
        let slot = self
            .margins
            .get_mut(&group)
            .ok_or(LossError::UnknownGroup(group))?;
        *slot = value.clamp(self.bounds.0, self.bounds.1);
        Ok(())
    }

    pub fn parameter_name(group: usize) -> String {
        format!("margin.{group}")
    }

    /// Registers every learnable margin as a graph parameter.
    pub fn register(&self, graph: &mut Graph) -> Result<ParameterSet> {
        let mut set = ParameterSet::new();
        for (&g, &m) in &self.margins {
            let name = Self::parameter_name(g);
            let id = graph.parameter(name.clone(), Array2::from_elem((1, 1), m))?;
            set.insert(name, id)?;
        }
        Ok(set)
    }
}

/// Classifier matrix `W` (`d×c`, one column per class) and logit scale `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn new(weight: Array, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(LossError::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        let mut head = Self { weight, scale };
        head.normalize_columns();
        Ok(head)
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let weight = Array2::from_shape_simple_fn((dim, classes), || rng.sample(StandardNormal));
        Self::new(weight, scale)
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn normalize_columns(&mut self) {
        for mut col in self.weight.columns_mut() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col.mapv_inplace(|v| v / norm);
            }
        }
    }
}

/// Handle to a classifier head inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadNode {
    pub weight: NodeId,
    pub scale: f64,
}

/// A labelled batch of embeddings inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub embeddings: NodeId,
    pub labels: &'a [usize],
    pub groups: &'a [usize],
}

fn check_batch(graph: &mut Graph, batch: &Batch<'_>, head: HeadNode) -> Result<usize> {
    let shape = graph.shape(batch.embeddings);
    if batch.labels.len() != shape.rows || batch.groups.len() != shape.rows {
        return Err(LossError::LengthMismatch {
            embeddings: shape.rows,
            labels: batch.labels.len(),
            groups: batch.groups.len(),
        });
    }
    let classes = graph.shape(head.weight).cols;
    if let Some((index, &label)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { index, label, classes });
    }
    let values = graph.evaluate(batch.embeddings)?;
    for (row, r) in values.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotUnitNorm { row, norm });
        }
    }
    Ok(classes)
}

/// `n×c` cosine similarities between embeddings and normalized classifier columns.
fn cosine_logits(graph: &mut Graph, embeddings: NodeId, weight: NodeId) -> Result<NodeId> {
    let wt = graph.transpose(weight)?;
    let wt = graph.l2_normalize_rows(wt)?;
    let w = graph.transpose(wt)?;
    Ok(graph.matmul(embeddings, w)?)
}

fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lse = graph.log_sum_exp_rows(logits)?;
    let target = graph.select_by_index(logits, labels.to_vec())?;
    let per_sample = graph.sub(lse, target)?;
    Ok(graph.mean(per_sample)?)
}

/// Mean adaptive-margin loss over the batch.
///
/// Learnable margins found in `margin_params` (by [`MarginSchedule::parameter_name`])
/// enter as graph parameters; any missing ones enter as constants with the
/// schedule's current value.
pub fn adaptive_margin_loss(
    graph: &mut Graph,
    batch: &Batch<'_>,
    head: HeadNode,
    schedule: &MarginSchedule,
    margin_params: &ParameterSet,
) -> Result<NodeId> {
    let classes = check_batch(graph, batch, head)?;
    let n = batch.labels.len();
    for &g in batch.groups {
        schedule.margin(g)?;
    }

    let cos_all = cosine_logits(graph, batch.embeddings, head.weight)?;
    let target_cos = graph.select_by_index(cos_all, batch.labels.to_vec())?;

    let modified = match schedule.variant() {
        MarginVariant::None => None,
        variant => {
            let lambda = margin_vector(graph, batch.groups, schedule, margin_params)?;
            let m = match variant {
                MarginVariant::Arc => {
                    let theta = graph.arccos(target_cos)?;
                    let widened = graph.add(theta, lambda)?;
                    // Keeps cos(θ+λ) monotone in λ once θ+λ passes π.
                    let widened = graph.clamp(widened, 0.0, PI)?;
                    graph.cos(widened)?
                }
                MarginVariant::Cos => graph.sub(target_cos, lambda)?,
                MarginVariant::None => unreachable!(),
            };
            Some(m)
        }
    };

    let logits = match modified {
        Some(m) => {
            let delta = graph.sub(m, target_cos)?;
            let delta = graph.scatter_by_index(delta, batch.labels.to_vec(), classes)?;
            graph.add(cos_all, delta)?
        }
        None => cos_all,
    };
    debug_assert_eq!(graph.shape(logits).rows, n);
    let logits = graph.scale(logits, head.scale)?;
    cross_entropy(graph, logits, batch.labels)
}

/// `n×1` per-sample margins `λ_{g_j}`.
fn margin_vector(
    graph: &mut Graph,
    groups: &[usize],
    schedule: &MarginSchedule,
    margin_params: &ParameterSet,
) -> Result<NodeId> {
    let n = groups.len();
    let mut fixed = Array2::zeros((n, 1));
    let mut learned: BTreeMap<usize, Array> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        let name = MarginSchedule::parameter_name(g);
        if !schedule.is_anchor(g) && margin_params.get(&name).is_some() {
            learned.entry(g).or_insert_with(|| Array2::zeros((n, 1)))[[i, 0]] = 1.0;
        } else {
            fixed[[i, 0]] = schedule.margin(g)?;
        }
    }
    let mut lambda = graph.constant(fixed);
    for (g, mask) in learned {
        let param = margin_params
            .get(&MarginSchedule::parameter_name(g))
            .expect("checked above");
        let mask = graph.constant(mask);
        let term = graph.mul(mask, param)?;
        lambda = graph.add(lambda, term)?;
    }
    Ok(lambda)
}

/// Normalized-softmax cross-entropy (no margin).
pub fn norm_softmax_loss(graph: &mut Graph, batch: &Batch<'_>, head: HeadNode) -> Result<NodeId> {
    check_batch(graph, batch, head)?;
    let cos_all = cosine_logits(graph, batch.embeddings, head.weight)?;
    let logits = graph.scale(cos_all, head.scale)?;
    cross_entropy(graph, logits, batch.labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLossConfig {
    /// Trade-off between positive and negative distances.
    pub gamma: f64,
    /// Keep a mined triplet only if `d_n² − d_p² ≤ tau`.
    pub tau: f64,
}

impl Default for MetaLossConfig {
    fn default() -> Self {
        Self { gamma: 0.5, tau: 0.2 }
    }
}

impl MetaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.tau >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "gamma and tau must be non-negative (gamma={}, tau={})",
                self.gamma, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_dist2: f64,
    pub negative_dist2: f64,
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hardest-positive / hardest-negative mining on detached embeddings.
///
/// Rows are L2-normalized before distances are taken. Ties go to the lowest
/// index. Triplets with `d_n² − d_p² > tau` are dropped.
pub fn mine_triplets(embeddings: &Array, identities: &[usize], tau: f64) -> Vec<Triplet> {
    let mut unit = embeddings.clone();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let n = identities.len().min(unit.nrows());
    let mut out = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for b in 0..n {
            if a == b {
                continue;
            }
            let d = squared_distance(unit.row(a), unit.row(b));
            if identities[a] == identities[b] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((b, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((b, d));
            }
        }
        if let (Some((p, dp)), Some((q, dn))) = (hardest_pos, hardest_neg) {
            if dn - dp <= tau {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: q,
                    positive_dist2: dp,
                    negative_dist2: dn,
                });
            }
        }
    }
    out
}

/// Per-triplet generalization score `exp(‖f−f_p‖² − γ‖f−f_n‖²)` as an `m×1` node.
pub fn sample_generalization(
    graph: &mut Graph,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    let dp = graph.sub(anchor, positive)?;
    let dp = graph.dot_rows(dp, dp)?;
    let dn = graph.sub(anchor, negative)?;
    let dn = graph.dot_rows(dn, dn)?;
    let dn = graph.scale(dn, gamma)?;
    let z = graph.sub(dp, dn)?;
    Ok(graph.exp(z)?)
}

/// Meta skewness loss plus its signed per-group diagnostics.
#[derive(Debug, Clone)]
pub struct MetaLoss {
    /// `Σ_g |mean l^g − mean l^anchor|` over non-anchor groups.
    pub loss: NodeId,
    /// Signed `mean l^g − mean l^anchor` per non-anchor group.
    pub skewness: BTreeMap<usize, f64>,
    /// Surviving triplets per group.
    pub triplet_counts: BTreeMap<usize, usize>,
}

/// Builds the meta skewness loss on a group-balanced meta batch.
///
/// Mining runs per group on detached values; gradients flow only through the
/// selected triplets' distances. All anchor groups pool into one anchor mean.
pub fn meta_skewness_loss(
    graph: &mut Graph,
    embeddings: NodeId,
    identities: &[usize],
    groups: &[usize],
    anchors: &BTreeSet<usize>,
    group_count: usize,
    config: &MetaLossConfig,
) -> Result<MetaLoss> {
    config.validate()?;
    let rows = graph.shape(embeddings).rows;
    if identities.len() != rows || groups.len() != rows {
        return Err(LossError::LengthMismatch {
            embeddings: rows,
            labels: identities.len(),
            groups: groups.len(),
        });
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= group_count) {
        return Err(LossError::UnknownGroup(g));
    }
    if (0..group_count).all(|g| anchors.contains(&g)) {
        return Ok(MetaLoss {
            loss: graph.scalar(0.0),
            skewness: BTreeMap::new(),
            triplet_counts: BTreeMap::new(),
        });
    }

    let unit = graph.l2_normalize_rows(embeddings)?;
    let values = graph.evaluate(unit)?.clone();

    // Global row indices of surviving triplets, per group.
    let mut mined: BTreeMap<usize, Vec<Triplet>> = BTreeMap::new();
    for g in 0..group_count {
        let members: Vec<usize> = (0..rows).filter(|&i| groups[i] == g).collect();
        let sub = values.select(ndarray::Axis(0), &members);
        let ids: Vec<usize> = members.iter().map(|&i| identities[i]).collect();
        let triplets = mine_triplets(&sub, &ids, config.tau)
            .into_iter()
            .map(|t| Triplet {
                anchor: members[t.anchor],
                positive: members[t.positive],
                negative: members[t.negative],
                ..t
            })
            .collect::<Vec<_>>();
        if triplets.is_empty() {
            return Err(LossError::InsufficientTriplets(g));
        }
        mined.insert(g, triplets);
    }

    let mean_of = |graph: &mut Graph, triplets: &[&Triplet]| -> Result<NodeId> {
        let a = graph.select_rows(unit, triplets.iter().map(|t| t.anchor).collect())?;
        let p = graph.select_rows(unit, triplets.iter().map(|t| t.positive).collect())?;
        let n = graph.select_rows(unit, triplets.iter().map(|t| t.negative).collect())?;
        let l = sample_generalization(graph, a, p, n, config.gamma)?;
        Ok(graph.mean(l)?)
    };

    let anchor_triplets: Vec<&Triplet> = mined
        .iter()
        .filter(|(g, _)| anchors.contains(g))
        .flat_map(|(_, ts)| ts.iter())
        .collect();
    let anchor_mean = mean_of(graph, &anchor_triplets)?;

    let mut loss: Option<NodeId> = None;
    let mut skew_nodes = Vec::new();
    for (&g, triplets) in &mined {
        if anchors.contains(&g) {
            continue;
        }
        let refs: Vec<&Triplet> = triplets.iter().collect();
        let mean = mean_of(graph, &refs)?;
        let signed = graph.sub(mean, anchor_mean)?;
        let bias = graph.abs(signed)?;
        skew_nodes.push((g, signed));
        loss = Some(match loss {
            Some(acc) => graph.add(acc, bias)?,
            None => bias,
        });
    }
    let loss = loss.expect("at least one non-anchor group");

    let mut skewness = BTreeMap::new();
    for (g, node) in skew_nodes {
        skewness.insert(g, graph.evaluate_scalar(node)?);
    }
    let triplet_counts = mined.iter().map(|(&g, ts)| (g, ts.len())).collect();
    Ok(MetaLoss {
        loss,
        skewness,
        triplet_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_rows(mut a: Array) -> Array {
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        a
    }

    #[test]
    fn schedule_validation() {
        assert!(MarginSchedule::new(4, [], 0.3, 0.3, MarginVariant::Arc).is_err());
        assert!(MarginSchedule::new(2, [0, 1], 0.3, 0.3, MarginVariant::Arc).is_err());
        assert!(MarginSchedule::new(4, [4], 0.3, 0.3, MarginVariant::Arc).is_err());
        let s = MarginSchedule::new(4, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        assert_eq!(s.learnable().len(), 3);
        assert_eq!(s.all_margins(), vec![0.3; 4]);
        let single = MarginSchedule::new(1, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        assert!(single.learnable().is_empty());
    }

    #[test]
    fn set_margin_clamps_and_protects_anchors() {
        let mut s = MarginSchedule::new(4, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        s.set_margin(2, 7.0).unwrap();
        assert_eq!(s.margin(2).unwrap(), 1.0);
        s.set_margin(2, -1.0).unwrap();
        assert_eq!(s.margin(2).unwrap(), 0.0);
        assert!(s.set_margin(0, 0.5).is_err());
        let mut c = MarginSchedule::new(4, [0], 0.15, 0.15, MarginVariant::Cos).unwrap();
        c.set_margin(1, 2.0).unwrap();
        assert_eq!(c.margin(1).unwrap(), 0.8);
    }

    /// Single sample, two classes, with embedding and columns chosen so that the
    /// true-class cosine is `t` and the other cosine is `o`.
    fn two_class_graph(t: f64, o: f64) -> (Graph, NodeId, HeadNode) {
        let mut g = Graph::new();
        let e = g.constant(array![[1.0, 0.0, 0.0]]);
        let w = array![
            [t, o],
            [(1.0 - t * t).sqrt(), 0.0],
            [0.0, (1.0 - o * o).sqrt()]
        ];
        let w = g.constant(w);
        (g, e, HeadNode { weight: w, scale: 1.0 })
    }

    #[test]
    fn cos_margin_closed_form() {
        let (mut g, e, head) = two_class_graph(0.8, 0.1);
        let s = MarginSchedule::new(2, [0], 0.0, 0.15, MarginVariant::Cos).unwrap();
        let batch = Batch { embeddings: e, labels: &[0], groups: &[1] };
        let loss = adaptive_margin_loss(&mut g, &batch, head, &s, &ParameterSet::new()).unwrap();
        let v = g.evaluate_scalar(loss).unwrap();
        let expected = -((0.65f64).exp() / ((0.65f64).exp() + (0.1f64).exp())).ln();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn arc_margin_increases_loss() {
        let t = (PI / 3.0).cos();
        let eval = |m: f64| {
            let (mut g, e, head) = two_class_graph(t, 0.2);
            let s = MarginSchedule::new(2, [0], 0.0, m, MarginVariant::Arc).unwrap();
            let batch = Batch { embeddings: e, labels: &[0], groups: &[1] };
            let loss = adaptive_margin_loss(&mut g, &batch, head, &s, &ParameterSet::new()).unwrap();
            g.evaluate_scalar(loss).unwrap()
        };
        assert!(eval(0.3) > eval(0.0));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut g = Graph::new();
        // Embedding orthogonal to every class column: all cosines zero.
        let e = g.constant(array![[0.0, 0.0, 0.0, 1.0]]);
        let w = g.constant(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        let head = HeadNode { weight: w, scale: 60.0 };
        let batch = Batch { embeddings: e, labels: &[1], groups: &[0] };
        let loss = norm_softmax_loss(&mut g, &batch, head).unwrap();
        assert!((g.evaluate_scalar(loss).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn norm_softmax_matches_direct_softmax() {
        let emb = unit_rows(array![[0.3, -0.2, 0.9], [0.1, 0.5, -0.4]]);
        let w: Array = array![[0.2, -0.7, 0.4], [0.9, 0.1, -0.3], [-0.1, 0.6, 0.8]];
        let labels = [2usize, 0];
        let s = 4.0;
        // Direct oracle.
        let mut wn = w.clone();
        for mut c in wn.columns_mut() {
            let n: f64 = c.dot(&c).sqrt();
            c.mapv_inplace(|v| v / n);
        }
        let cos = emb.dot(&wn);
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = cos.row(i);
            let denom: f64 = row.iter().map(|&c| (s * c).exp()).sum();
            expected += -((s * row[y]).exp() / denom).ln();
        }
        expected /= 2.0;

        let mut g = Graph::new();
        let e = g.constant(emb);
        let wn = g.constant(w);
        let batch = Batch { embeddings: e, labels: &labels, groups: &[0, 0] };
        let loss = norm_softmax_loss(&mut g, &batch, HeadNode { weight: wn, scale: s }).unwrap();
        assert!((g.evaluate_scalar(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_input_errors() {
        let mut g = Graph::new();
        let e = g.constant(array![[2.0, 0.0]]);
        let w = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let head = HeadNode { weight: w, scale: 1.0 };
        let s = MarginSchedule::new(2, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        let p = ParameterSet::new();
        let batch = Batch { embeddings: e, labels: &[0], groups: &[0] };
        assert!(matches!(
            adaptive_margin_loss(&mut g, &batch, head, &s, &p),
            Err(LossError::NotUnitNorm { row: 0, .. })
        ));
        let e = g.constant(array![[1.0, 0.0]]);
        let batch = Batch { embeddings: e, labels: &[5], groups: &[0] };
        assert!(matches!(
            adaptive_margin_loss(&mut g, &batch, head, &s, &p),
            Err(LossError::LabelOutOfRange { label: 5, .. })
        ));
        let batch = Batch { embeddings: e, labels: &[0], groups: &[9] };
        assert_eq!(
            adaptive_margin_loss(&mut g, &batch, head, &s, &p),
            Err(LossError::UnknownGroup(9))
        );
    }

    #[test]
    fn absent_group_margin_has_zero_gradient() {
        let mut g = Graph::new();
        let e = g.constant(unit_rows(array![[0.6, 0.8], [0.8, -0.6]]));
        let w = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let s = MarginSchedule::new(3, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        let params = s.register(&mut g).unwrap();
        let batch = Batch { embeddings: e, labels: &[0, 1], groups: &[0, 1] };
        let loss = adaptive_margin_loss(&mut g, &batch, HeadNode { weight: w, scale: 8.0 }, &s, &params)
            .unwrap();
        let grads = g.gradient_values(loss, &params).unwrap();
        assert_eq!(grads["margin.2"][[0, 0]], 0.0);
        assert!(grads["margin.1"][[0, 0]] > 0.0);
    }

    #[test]
    fn mining_skips_easy_triplets() {
        // Two tight, far-apart identities.
        let emb = array![[1.0, 0.0], [0.999, 0.04], [-1.0, 0.0], [-0.999, 0.04]];
        assert!(mine_triplets(&emb, &[0, 0, 1, 1], 0.2).is_empty());
    }

    #[test]
    fn mining_picks_hardest_pair() {
        // Points on the unit circle, angle chosen so that squared chord
        // distance from the anchor (angle 0) equals the requested value:
        // d² = 2 − 2cos φ.
        let at = |d2: f64| {
            let phi = (1.0 - d2 / 2.0).acos();
            [phi.cos(), phi.sin()]
        };
        let pts = [[1.0, 0.0], at(0.1), at(0.4), at(0.3), at(0.5)];
        let emb = Array2::from_shape_fn((5, 2), |(i, j)| pts[i][j]);
        let ids = [0, 0, 0, 1, 1];
        let ts = mine_triplets(&emb, &ids, 0.2);
        let t = ts.iter().find(|t| t.anchor == 0).expect("anchor 0 kept");
        assert_eq!((t.positive, t.negative), (2, 3));
        assert!((t.positive_dist2 - 0.4).abs() < 1e-12);
        assert!((t.negative_dist2 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_identity_group_has_no_triplets() {
        let emb = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        assert!(mine_triplets(&emb, &[3, 3, 3], 0.2).is_empty());
    }

    #[test]
    fn sample_generalization_values() {
        let mut g = Graph::new();
        let f = g.constant(array![[1.0, 0.0]]);
        let n = g.constant(array![[0.0, 1.0]]);
        let l = sample_generalization(&mut g, f, f, n, 0.0).unwrap();
        assert_eq!(g.evaluate(l).unwrap()[[0, 0]], 1.0);

        // d_p² = 0.5, d_n² = 0.2 via offsets along orthogonal axes.
        let a = g.constant(array![[0.0, 0.0]]);
        let p = g.constant(array![[0.5f64.sqrt(), 0.0]]);
        let n = g.constant(array![[0.0, 0.2f64.sqrt()]]);
        let l = sample_generalization(&mut g, a, p, n, 0.5).unwrap();
        assert!((g.evaluate(l).unwrap()[[0, 0]] - 0.4f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn single_group_meta_loss_is_zero() {
        let mut g = Graph::new();
        let e = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let anchors = BTreeSet::from([0]);
        let m = meta_skewness_loss(&mut g, e, &[0, 1], &[0, 0], &anchors, 1, &MetaLossConfig::default())
            .unwrap();
        assert_eq!(g.evaluate_scalar(m.loss).unwrap(), 0.0);
    }

    #[test]
    fn equal_groups_have_zero_skew() {
        // Group 1 is group 0 rotated by 90 degrees in the plane: identical distances.
        let base = [[1.0, 0.0], [0.96, 0.28], [0.0, 1.0], [0.28, 0.96]];
        let mut rows = Vec::new();
        for p in base {
            rows.push([p[0], p[1]]);
        }
        for p in base {
            rows.push([-p[1], p[0]]);
        }
        let emb = Array2::from_shape_fn((8, 2), |(i, j)| rows[i][j]);
        let mut g = Graph::new();
        let e = g.constant(emb);
        let ids = [0, 0, 1, 1, 2, 2, 3, 3];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        let anchors = BTreeSet::from([0]);
        let cfg = MetaLossConfig { gamma: 0.5, tau: 10.0 };
        let m = meta_skewness_loss(&mut g, e, &ids, &groups, &anchors, 2, &cfg).unwrap();
        assert!(m.skewness[&1].abs() < 1e-12);
        assert!(g.evaluate_scalar(m.loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn starved_group_is_named() {
        let mut g = Graph::new();
        let e = g.constant(array![[1.0, 0.0], [0.96, 0.28], [0.0, 1.0], [0.28, 0.96]]);
        let anchors = BTreeSet::from([0]);
        // Group 1 has one identity only.
        let err = meta_skewness_loss(
            &mut g,
            e,
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
            &anchors,
            2,
            &MetaLossConfig { gamma: 0.5, tau: 10.0 },
        )
        .unwrap_err();
        assert_eq!(err, LossError::InsufficientTriplets(0));
    }
}
