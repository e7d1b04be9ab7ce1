//! Randomized finite-difference checks of the autodiff engine, the losses and
//! the meta-gradient.
//!
//! First-order references use Richardson-extrapolated central differences.
//! Second-order references use nested central differences. Inputs are drawn
//! away from kinks (relu, abs, clamp, maximum) so the references are smooth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{finite_difference_gradient, relative_error, Array, AutodiffError, Graph, NodeId, Op, ParameterSet, Shape};
use crate::datagen::{generate, make_meta_split, DataError, DataParams, GroupSpec};
use crate::losses::{adaptive_margin_loss, norm_softmax_loss, Batch, HeadNode, LossError, MarginSchedule, MarginVariant, MetaLossConfig};
use crate::trainer::{meta_gradient, sample_meta_batch, sample_train_batch, ModelParams, TrainError};

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, GradcheckError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Randomized instances per first-order and mixed-second check.
    pub instances: usize,
    /// Random model states per meta-gradient check.
    pub meta_states: usize,
    pub first_order_tol: f64,
    pub second_order_tol: f64,
    /// Below this magnitude the absolute error is checked instead.
    pub magnitude_floor: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            meta_states: 20,
            first_order_tol: 1e-5,
            second_order_tol: 1e-3,
            magnitude_floor: 1e-6,
            abs_tol: 1e-8,
        }
    }
}

/// Scales the analytic derivative of one named check; used as a negative control.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub check: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub instances: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>10}  {:>10}  {:>8}  status\n",
            "check", "instances", "worst_rel", "worst_abs", "tol"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>9}  {:>10.3e}  {:>10.3e}  {:>8.0e}  {}",
                r.name,
                r.instances,
                r.worst_rel,
                r.worst_abs,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

struct Tally {
    name: String,
    instances: usize,
    worst_rel: f64,
    worst_abs: f64,
    tol: f64,
    floor: f64,
    abs_tol: f64,
    factor: f64,
}

impl Tally {
    fn new(name: impl Into<String>, tol: f64, config: &GradcheckConfig, fault: Option<&Fault>) -> Self {
        let name = name.into();
        let factor = fault.filter(|f| f.check == name).map_or(1.0, |f| f.factor);
        Self {
            name,
            instances: 0,
            worst_rel: 0.0,
            worst_abs: 0.0,
            tol,
            floor: config.magnitude_floor,
            abs_tol: config.abs_tol,
            factor,
        }
    }

    fn compare(&mut self, analytic: &Array, numeric: &Array) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.compare_scalar(a, n);
        }
    }

    fn compare_scalar(&mut self, a: f64, n: f64) {
        let a = a * self.factor;
        if a.abs() > self.floor {
            self.worst_rel = self.worst_rel.max(relative_error(a, n));
        } else {
            self.worst_abs = self.worst_abs.max((a - n).abs());
        }
    }

    fn finish(self) -> CheckRow {
        let passed = self.worst_rel < self.tol && self.worst_abs < self.abs_tol;
        CheckRow {
            name: self.name,
            instances: self.instances,
            worst_rel: self.worst_rel,
            worst_abs: self.worst_abs,
            tolerance: self.tol,
            passed,
        }
    }
}

type Inputs = Vec<(String, Array)>;
type Builder<'a> = dyn Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId> + 'a;

fn evaluate(inputs: &Inputs, build: &Builder<'_>) -> Result<(Graph, ParameterSet, NodeId)> {
    let mut g = Graph::new();
    let mut set = ParameterSet::new();
    let mut map = BTreeMap::new();
    for (name, v) in inputs {
        let id = g.parameter(name.clone(), v.clone())?;
        set.insert(name.clone(), id)?;
        map.insert(name.clone(), id);
    }
    let out = build(&mut g, &map)?;
    Ok((g, set, out))
}

fn value(inputs: &Inputs, build: &Builder<'_>) -> Result<f64> {
    let (mut g, _, out) = evaluate(inputs, build)?;
    Ok(g.evaluate_scalar(out)?)
}

const FD_STEP: f64 = 1e-3;

/// Fourth-order accurate numeric gradient of input `k`.
fn numeric_gradient(inputs: &Inputs, k: usize, build: &Builder<'_>) -> Result<Array> {
    let mut err = None;
    let mut f = |p: &Array| {
        let mut ins = inputs.clone();
        ins[k].1 = p.clone();
        value(&ins, build).map_err(|e| {
            err = Some(e);
            AutodiffError::NonFiniteProbe(0)
        })
    };
    let coarse = finite_difference_gradient(&mut f, &inputs[k].1, FD_STEP);
    let fine = finite_difference_gradient(&mut f, &inputs[k].1, FD_STEP / 2.0);
    if let Some(e) = err {
        return Err(e);
    }
    Ok((4.0 * fine? - coarse?) / 3.0)
}

fn first_order(inputs: &Inputs, build: &Builder<'_>, tally: &mut Tally) -> Result<()> {
    let (mut g, set, out) = evaluate(inputs, build)?;
    let analytic = g.gradient_values(out, &set)?;
    for (k, (name, _)) in inputs.iter().enumerate() {
        tally.compare(&analytic[name], &numeric_gradient(inputs, k, build)?);
    }
    tally.instances += 1;
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Uniform in `±[lo, hi]`, keeping `lo` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::from_shape_simple_fn((rows, cols), || {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Random inputs and op for one instance of the named op kind.
fn op_instance(kind: &str, rng: &mut ChaCha8Rng) -> (Vec<Array>, Op) {
    let (r, c) = dims(rng);
    let u = |rng: &mut ChaCha8Rng, r, c| uniform(rng, r, c, -1.0, 1.0);
    match kind {
        "add" | "sub" | "mul" => {
            let op = Op::from_name(kind).unwrap();
            let b_rows = if rng.random_bool(0.3) { 1 } else { r };
            (vec![u(rng, r, c), u(rng, b_rows, c)], op)
        }
        "div" => (vec![u(rng, r, c), away_from_zero(rng, r, c, 0.5, 2.0)], Op::Div),
        "maximum" => {
            let a = u(rng, r, c);
            let b = &a + &away_from_zero(rng, r, c, 0.05, 1.0);
            (vec![a, b], Op::Maximum)
        }
        "matmul" => {
            let k = rng.random_range(1..5);
            (vec![u(rng, r, k), u(rng, k, c)], Op::MatMul)
        }
        "transpose" => (vec![u(rng, r, c)], Op::Transpose),
        "neg" => (vec![u(rng, r, c)], Op::Neg),
        "exp" => (vec![uniform(rng, r, c, -2.0, 2.0)], Op::Exp),
        "log" => (vec![uniform(rng, r, c, 0.2, 3.0)], Op::Log),
        "power" => {
            let p = [2.0, 3.0, 0.5, -1.5][rng.random_range(0..4)];
            (vec![uniform(rng, r, c, 0.3, 2.0)], Op::Pow(p))
        }
        "sin" => (vec![uniform(rng, r, c, -3.0, 3.0)], Op::Sin),
        "cos" => (vec![uniform(rng, r, c, -3.0, 3.0)], Op::Cos),
        "arccos" => (vec![uniform(rng, r, c, -0.9, 0.9)], Op::Arccos { eps: crate::autodiff::ARCCOS_EPS }),
        "abs" => (vec![away_from_zero(rng, r, c, 0.05, 1.0)], Op::Abs),
        "relu" => (vec![away_from_zero(rng, r, c, 0.05, 1.0)], Op::Relu),
        "clamp" => {
            // Inside (−0.45, 0.45) or outside ±0.55 of the interval [−0.5, 0.5].
            let x = Array::from_shape_simple_fn((r, c), || {
                let inside = rng.random_bool(0.5);
                let v: f64 = if inside { rng.random_range(0.0..0.45) } else { rng.random_range(0.55..1.5) };
                if rng.random_bool(0.5) { v } else { -v }
            });
            (vec![x], Op::Clamp { lo: -0.5, hi: 0.5 })
        }
        "sum" => (vec![u(rng, r, c)], Op::Sum),
        "mean" => (vec![u(rng, r, c)], Op::Mean),
        "sum-rows" => (vec![u(rng, r, c)], Op::SumRows),
        "sum-cols" => (vec![u(rng, r, c)], Op::SumCols),
        "broadcast" => {
            let target = Shape::new(r + 1, c + 1);
            if rng.random_bool(0.5) {
                (vec![u(rng, 1, c + 1)], Op::BroadcastTo(target))
            } else {
                (vec![u(rng, r + 1, 1)], Op::BroadcastTo(target))
            }
        }
        "l2-normalize-rows" => (vec![away_from_zero(rng, r, c + 1, 0.3, 1.0)], Op::L2NormalizeRows),
        "dot-product-rows" => (vec![u(rng, r, c), u(rng, r, c)], Op::DotRows),
        "select-by-index" => {
            let idx = (0..r).map(|_| rng.random_range(0..c)).collect();
            (vec![u(rng, r, c)], Op::SelectByIndex(idx))
        }
        "scatter-by-index" => {
            let idx = (0..r).map(|_| rng.random_range(0..c)).collect();
            (vec![u(rng, r, 1)], Op::ScatterByIndex { index: idx, cols: c })
        }
        "select-rows" => {
            let m = rng.random_range(1..6);
            let idx = (0..m).map(|_| rng.random_range(0..r)).collect();
            (vec![u(rng, r, c)], Op::SelectRows(idx))
        }
        "scatter-rows" => {
            let m = rng.random_range(1..6);
            let idx = (0..m).map(|_| rng.random_range(0..r)).collect();
            (vec![u(rng, m, c)], Op::ScatterRows { index: idx, rows: r })
        }
        "log-sum-exp-rows" => (vec![uniform(rng, r, c, -3.0, 3.0)], Op::LogSumExpRows),
        other => unreachable!("unknown op kind {other}"),
    }
}

/// Every differentiable op kind.
pub const OP_KINDS: [&str; 29] = [
    "add", "sub", "mul", "div", "matmul", "transpose", "neg", "exp", "log", "power", "sin", "cos",
    "arccos", "abs", "relu", "clamp", "maximum", "sum", "mean", "sum-rows", "sum-cols", "broadcast",
    "l2-normalize-rows", "dot-product-rows", "select-by-index", "scatter-by-index", "select-rows",
    "scatter-rows", "log-sum-exp-rows",
];

fn check_op(kind: &str, config: &GradcheckConfig, fault: Option<&Fault>) -> Result<CheckRow> {
    let mut rng = stream(config.seed, 1, kind);
    let mut tally = Tally::new(format!("first-order/{kind}"), config.first_order_tol, config, fault);
    for _ in 0..config.instances {
        let (values, op) = op_instance(kind, &mut rng);
        let out_shape = {
            let shapes: Vec<Shape> = values.iter().map(Shape::of).collect();
            op.infer_shape(&shapes)?
        };
        // Random weights make the reduction sensitive to every output entry.
        let weights = uniform(&mut rng, out_shape.rows, out_shape.cols, -1.0, 1.0);
        let inputs: Inputs = values.into_iter().enumerate().map(|(i, v)| (format!("x{i}"), v)).collect();
        let build = |g: &mut Graph, p: &BTreeMap<String, NodeId>| -> Result<NodeId> {
            let ids: Vec<NodeId> = (0..p.len()).map(|i| p[&format!("x{i}")]).collect();
            let out = g.build(op.clone(), &ids)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod)?)
        };
        first_order(&inputs, &build, &mut tally)?;
    }
    Ok(tally.finish())
}

fn stream(seed: u64, purpose: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    rng.set_stream(purpose.wrapping_mul(0x1_0000_0000).wrapping_add(salt & 0xFFFF_FFFF));
    rng
}

/// A random loss instance: raw embeddings (normalized in the graph),
/// classifier weights and the non-anchor margins.
struct LossInstance {
    inputs: Inputs,
    labels: Vec<usize>,
    groups: Vec<usize>,
    schedule: MarginSchedule,
    scale: f64,
}

const LOSS_GROUPS: usize = 4;

fn loss_instance(variant: MarginVariant, rng: &mut ChaCha8Rng) -> LossInstance {
    loop {
        let n = rng.random_range(2..7);
        let d = rng.random_range(2..5);
        let c = rng.random_range(2..6);
        let e = away_from_zero(rng, n, d, 0.2, 1.0);
        let w = away_from_zero(rng, d, c, 0.2, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..LOSS_GROUPS)).collect();
        let (lo, hi) = variant.default_bounds();
        let span = hi - lo;
        let mut schedule = MarginSchedule::new(LOSS_GROUPS, [0], 0.0, 0.0, variant).unwrap();
        if span > 0.0 {
            schedule = MarginSchedule::new(LOSS_GROUPS, [0], rng.random_range(lo..hi), 0.0, variant).unwrap();
            for g in 1..LOSS_GROUPS {
                schedule.set_margin(g, rng.random_range(lo + 0.05 * span..hi - 0.05 * span)).unwrap();
            }
        }
        let scale = rng.random_range(1.0..10.0);

        // Reject instances near the arccos clamp or the θ+λ ≤ π clamp.
        let en = &e / &e.map_axis(ndarray::Axis(1), |r| r.dot(&r).sqrt()).insert_axis(ndarray::Axis(1));
        let wn = &w / &w.map_axis(ndarray::Axis(0), |col| col.dot(&col).sqrt()).insert_axis(ndarray::Axis(0));
        let cos = en.dot(&wn);
        let smooth = (0..n).all(|i| {
            let t = cos[[i, labels[i]]];
            let lam = schedule.margin(groups[i]).unwrap();
            t.abs() < 0.98 && t.acos() + lam < std::f64::consts::PI - 0.05
        });
        if variant != MarginVariant::Arc || smooth {
            let mut inputs = vec![("emb".to_string(), e), ("head".to_string(), w)];
            if variant != MarginVariant::None {
                for (&g, &m) in schedule.learnable() {
                    inputs.push((MarginSchedule::parameter_name(g), Array::from_elem((1, 1), m)));
                }
            }
            return LossInstance { inputs, labels, groups, schedule, scale };
        }
    }
}

impl LossInstance {
    fn build<'a>(&'a self, softmax: bool) -> impl Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId> + 'a {
        move |g: &mut Graph, p: &BTreeMap<String, NodeId>| {
            let emb = g.l2_normalize_rows(p["emb"])?;
            let batch = Batch { embeddings: emb, labels: &self.labels, groups: &self.groups };
            let head = HeadNode { weight: p["head"], scale: self.scale };
            if softmax {
                return Ok(norm_softmax_loss(g, &batch, head)?);
            }
            let mut margins = ParameterSet::new();
            for (name, &id) in p {
                if name.starts_with("margin.") {
                    margins.insert(name.clone(), id)?;
                }
            }
            Ok(adaptive_margin_loss(g, &batch, head, &self.schedule, &margins)?)
        }
    }
}

fn check_loss(name: &str, variant: MarginVariant, config: &GradcheckConfig, fault: Option<&Fault>) -> Result<CheckRow> {
    let mut rng = stream(config.seed, 2, name);
    let mut tally = Tally::new(format!("first-order/{name}"), config.first_order_tol, config, fault);
    let softmax = variant == MarginVariant::None;
    for _ in 0..config.instances {
        let inst = loss_instance(variant, &mut rng);
        first_order(&inst.inputs, &inst.build(softmax), &mut tally)?;
    }
    Ok(tally.finish())
}

const NESTED_STEP: f64 = 1e-4;
const MIXED_STEP: f64 = 2e-3;

/// `∂/∂m ⟨dir, ∇_w f⟩` by nested central differences: the inner difference
/// is along `dir` in `w`, the outer one along each entry of `m`. Two step
/// sizes are combined by Richardson extrapolation.
fn nested_mixed(inputs: &Inputs, w: &[&str], dir: &BTreeMap<String, Array>, m: &str, build: &Builder<'_>) -> Result<Array> {
    let shifted = |eps: f64, delta: f64, idx: (usize, usize)| -> Result<f64> {
        let mut ins = inputs.clone();
        for (name, v) in ins.iter_mut() {
            if w.contains(&name.as_str()) {
                v.scaled_add(eps, &dir[name]);
            }
            if name == m {
                v[idx] += delta;
            }
        }
        value(&ins, build)
    };
    let stencil = |h: f64, idx| -> Result<f64> {
        let pp = shifted(h, h, idx)?;
        let pm = shifted(h, -h, idx)?;
        let mp = shifted(-h, h, idx)?;
        let mm = shifted(-h, -h, idx)?;
        Ok((pp - pm - mp + mm) / (4.0 * h * h))
    };
    let shape = inputs.iter().find(|(n, _)| n == m).expect("second_wrt input").1.raw_dim();
    let mut out = Array::zeros(shape);
    for idx in ndarray::indices(out.raw_dim()) {
        let coarse = stencil(MIXED_STEP, idx)?;
        let fine = stencil(MIXED_STEP / 2.0, idx)?;
        out[idx] = (4.0 * fine - coarse) / 3.0;
    }
    Ok(out)
}

fn mixed_case(inputs: &Inputs, w: &[&str], m: &[&str], build: &Builder<'_>, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let dir: BTreeMap<String, Array> = inputs
        .iter()
        .filter(|(n, _)| w.contains(&n.as_str()))
        .map(|(n, v)| (n.clone(), uniform(rng, v.nrows(), v.ncols(), -1.0, 1.0)))
        .collect();
    let (mut g, set, out) = evaluate(inputs, build)?;
    let first = set.select(w.iter().copied())?;
    let second = set.select(m.iter().copied())?;
    let analytic = g.mixed_second(out, &first, &dir, &second)?;
    for name in m {
        tally.compare(&analytic[*name], &nested_mixed(inputs, w, &dir, name, build)?);
    }
    tally.instances += 1;
    Ok(())
}

fn check_mixed_loss(name: &str, variant: MarginVariant, config: &GradcheckConfig, fault: Option<&Fault>) -> Result<CheckRow> {
    let mut rng = stream(config.seed, 3, name);
    let mut tally = Tally::new(format!("mixed-second/{name}"), config.second_order_tol, config, fault);
    for _ in 0..config.instances {
        let inst = loss_instance(variant, &mut rng);
        let margins: Vec<String> = inst.inputs.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("margin.")).collect();
        let m: Vec<&str> = margins.iter().map(String::as_str).collect();
        mixed_case(&inst.inputs, &["emb", "head"], &m, &inst.build(false), &mut rng, &mut tally)?;
    }
    Ok(tally.finish())
}

/// `f(x, m) = Σ R ⊙ cos(x ⊙ m) + Σ exp(x) ⊙ m` with `m` broadcast over rows.
fn check_mixed_composite(config: &GradcheckConfig, fault: Option<&Fault>) -> Result<CheckRow> {
    let mut rng = stream(config.seed, 3, "composite");
    let mut tally = Tally::new("mixed-second/composite", config.second_order_tol, config, fault);
    for _ in 0..config.instances {
        let (r, c) = dims(&mut rng);
        let inputs: Inputs = vec![
            ("x".into(), uniform(&mut rng, r, c, -1.0, 1.0)),
            ("m".into(), uniform(&mut rng, 1, c, -1.0, 1.0)),
        ];
        let weights = uniform(&mut rng, r, c, -1.0, 1.0);
        let build = |g: &mut Graph, p: &BTreeMap<String, NodeId>| -> Result<NodeId> {
            let xm = g.mul(p["x"], p["m"])?;
            let cx = g.cos(xm)?;
            let w = g.constant(weights.clone());
            let a = g.mul(cx, w)?;
            let a = g.sum(a)?;
            let ex = g.exp(p["x"])?;
            let b = g.mul(ex, p["m"])?;
            let b = g.sum(b)?;
            Ok(g.add(a, b)?)
        };
        mixed_case(&inputs, &["x"], &["m"], &build, &mut rng, &mut tally)?;
    }
    Ok(tally.finish())
}

/// Meta-gradient through the virtual step against the perturb-rebuild oracle
/// on a toy model with four groups.
fn check_meta(name: &str, variant: MarginVariant, config: &GradcheckConfig, fault: Option<&Fault>) -> Result<CheckRow> {
    let mut rng = stream(config.seed, 4, name);
    let mut tally = Tally::new(format!("meta-gradient/{name}"), config.second_order_tol, config, fault);
    let specs = (0..LOSS_GROUPS)
        .map(|g| GroupSpec {
            group: g,
            classes: if g == 0 { 6 } else { 2 },
            samples_per_class: 5,
            sigma: 0.25 + 0.05 * g as f64,
            prototype_seed: 0,
        })
        .collect();
    let params = DataParams::new(specs, 8, config.seed).with_subspace_dim(2);
    let train = generate(&params)?;
    let meta = make_meta_split(&params, 3, 4, config.seed)?;
    let meta_cfg = MetaLossConfig::default();
    let (lo, hi) = variant.default_bounds();

    let mut states = 0;
    while states < config.meta_states {
        let mut model = ModelParams::random(8, &[6], 4, train.class_count(), rng.random_range(4.0..16.0), &mut rng)?;
        // Nonzero biases keep every embedding away from the zero vector.
        for layer in &mut model.encoder {
            layer.bias = away_from_zero(&mut rng, 1, layer.bias.ncols(), 0.2, 0.6);
        }
        let mut schedule = MarginSchedule::new(LOSS_GROUPS, [0], 0.5 * (lo + hi) * rng.random_range(0.2..1.0), 0.0, variant)?;
        for g in 1..LOSS_GROUPS {
            schedule.set_margin(g, rng.random_range(lo + 0.1 * (hi - lo)..hi - 0.1 * (hi - lo)))?;
        }
        let tb = sample_train_batch(&train, 16, &mut rng);
        let mb = sample_meta_batch(&meta, LOSS_GROUPS, 24, 4, &mut rng);
        let alpha = rng.random_range(0.1..1.0);
        let step = match meta_gradient(&model, &schedule, &tb, &mb, alpha, &meta_cfg) {
            Ok(s) => s,
            Err(TrainError::Loss(LossError::InsufficientTriplets(_))) => continue,
            Err(e) => return Err(e.into()),
        };
        let factor = tally.factor;
        for (&g, &analytic) in &step.grads {
            let at = |m: f64| -> Result<f64> {
                let mut s = schedule.clone();
                s.set_margin(g, m)?;
                Ok(meta_gradient(&model, &s, &tb, &mb, alpha, &meta_cfg)?.meta_loss)
            };
            let m0 = schedule.margin(g)?;
            let fd = (at(m0 + NESTED_STEP)? - at(m0 - NESTED_STEP)?) / (2.0 * NESTED_STEP);
            tally.factor = factor;
            tally.compare_scalar(analytic, fd);
        }
        tally.instances += 1;
        states += 1;
    }
    Ok(tally.finish())
}

/// Row names in report order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = OP_KINDS.iter().map(|k| format!("first-order/{k}")).collect();
    for n in ["adaptive-arc", "adaptive-cos", "norm-softmax"] {
        names.push(format!("first-order/{n}"));
    }
    for n in ["adaptive-arc", "adaptive-cos", "composite"] {
        names.push(format!("mixed-second/{n}"));
    }
    names.push("meta-gradient/arc".into());
    names.push("meta-gradient/cos".into());
    names
}

/// Runs every check.
pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    run_with_fault(config, None)
}

pub fn run_with_fault(config: &GradcheckConfig, fault: Option<&Fault>) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    for kind in OP_KINDS {
        rows.push(check_op(kind, config, fault)?);
    }
    rows.push(check_loss("adaptive-arc", MarginVariant::Arc, config, fault)?);
    rows.push(check_loss("adaptive-cos", MarginVariant::Cos, config, fault)?);
    rows.push(check_loss("norm-softmax", MarginVariant::None, config, fault)?);
    rows.push(check_mixed_loss("adaptive-arc", MarginVariant::Arc, config, fault)?);
    rows.push(check_mixed_loss("adaptive-cos", MarginVariant::Cos, config, fault)?);
    rows.push(check_mixed_composite(config, fault)?);
    rows.push(check_meta("arc", MarginVariant::Arc, config, fault)?);
    rows.push(check_meta("cos", MarginVariant::Cos, config, fault)?);
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig { instances: 10, meta_states: 3, ..GradcheckConfig::default() }
    }

    #[test]
    fn small_run_passes() {
        let report = run(&small()).unwrap();
        assert!(report.passed(), "{}", report.table());
        let names: Vec<String> = report.rows.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, check_names());
    }

    #[test]
    fn corrupted_derivative_is_detected() {
        let fault = Fault { check: "first-order/cos".into(), factor: 1.001 };
        let report = run_with_fault(&small(), Some(&fault)).unwrap();
        let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["first-order/cos"]);
    }
}
