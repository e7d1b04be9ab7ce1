//! Verification-protocol evaluation and group fairness metrics.
//!
//! Pairs are built within each group; a pair is predicted "same identity"
//! when its cosine similarity is strictly above the threshold.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;
use crate::datagen::GroupedDataset;
use crate::trainer::ModelParams;

/// Guard for the inter-class scatter denominator.
pub const SCATTER_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("{scores} scores but {flags} flags")]
    LengthMismatch { scores: usize, flags: usize },
    #[error("need at least one positive and one negative pair")]
    OneSided,
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("need at least 2 identities")]
    SingleIdentity,
    #[error("group {0} has no positive pair")]
    NoPositivePairs(usize),
    #[error("group {0} has no negative pair")]
    NoNegativePairs(usize),
    #[error("pair budget must be at least 2, got {0}")]
    BudgetTooSmall(usize),
    #[error("difficulty fraction {0} outside [0, 1]")]
    BadDifficulty(f64),
    #[error("model expects {model}-dim inputs but the dataset has {data}")]
    DimMismatch { model: usize, data: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub groups: BTreeMap<usize, Vec<Pair>>,
}

impl PairSet {
    pub fn positives(&self, group: usize) -> usize {
        self.groups.get(&group).map_or(0, |p| p.iter().filter(|p| p.same).count())
    }

    pub fn negatives(&self, group: usize) -> usize {
        self.groups.get(&group).map_or(0, |p| p.iter().filter(|p| !p.same).count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    /// Pairs per group, split evenly between positives and negatives.
    pub budget: usize,
    /// Fraction of each side taken from the hardest candidates.
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { budget: 600, difficulty: 0.5, seed: 0 }
    }
}

fn cosine(embeddings: &Array, a: usize, b: usize) -> f64 {
    let (x, y) = (embeddings.row(a), embeddings.row(b));
    x.dot(&y) / (x.dot(&x) * y.dot(&y)).sqrt()
}

/// Keeps `count` candidates: the hardest `round(difficulty·count)` by score
/// (already sorted hardest first) plus a uniform sample of the rest.
fn pick(sorted: Vec<(usize, usize)>, count: usize, difficulty: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let hard = ((count as f64) * difficulty).round() as usize;
    let (head, rest) = sorted.split_at(hard.min(sorted.len()));
    let mut out = head.to_vec();
    let fill = (count - out.len()).min(rest.len());
    out.extend(index::sample(rng, rest.len(), fill).into_iter().map(|i| rest[i]));
    out
}

/// Balanced positive/negative pairs within each group, hardest fraction first.
pub fn build_pairs(data: &GroupedDataset, embeddings: &Array, config: &PairConfig) -> Result<PairSet> {
    if config.budget < 2 {
        return Err(MetricError::BudgetTooSmall(config.budget));
    }
    if !(0.0..=1.0).contains(&config.difficulty) {
        return Err(MetricError::BadDifficulty(config.difficulty));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in data.groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut groups = BTreeMap::new();
    for (&g, idx) in &members {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(g as u64);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (x, &a) in idx.iter().enumerate() {
            for &b in &idx[x + 1..] {
                let s = cosine(embeddings, a, b);
                if data.identities[a] == data.identities[b] {
                    pos.push((s, a, b));
                } else {
                    neg.push((s, a, b));
                }
            }
        }
        if pos.is_empty() {
            return Err(MetricError::NoPositivePairs(g));
        }
        if neg.is_empty() {
            return Err(MetricError::NoNegativePairs(g));
        }
        let count = (config.budget / 2).min(pos.len()).min(neg.len());
        // Hard positives have low similarity, hard negatives high.
        pos.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        neg.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let strip = |v: Vec<(f64, usize, usize)>| v.into_iter().map(|(_, a, b)| (a, b)).collect();
        let mut pairs: Vec<Pair> = pick(strip(pos), count, config.difficulty, &mut rng)
            .into_iter()
            .map(|(a, b)| Pair { a, b, same: true })
            .chain(
                pick(strip(neg), count, config.difficulty, &mut rng)
                    .into_iter()
                    .map(|(a, b)| Pair { a, b, same: false }),
            )
            .collect();
        pairs.sort_unstable();
        groups.insert(g, pairs);
    }
    Ok(PairSet { groups })
}

fn check_scores(scores: &[f64], flags: &[bool]) -> Result<()> {
    if scores.len() != flags.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), flags: flags.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if flags.iter().all(|&f| f) || flags.iter().all(|&f| !f) {
        return Err(MetricError::OneSided);
    }
    Ok(())
}

/// Candidate thresholds in ascending order: below the minimum, every midpoint
/// between consecutive distinct scores, and above the maximum.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(sorted[0] - 1.0);
    out.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(sorted[sorted.len() - 1] + 1.0);
    out
}

/// Correct predictions at each candidate threshold, ascending.
fn sweep(scores: &[f64], flags: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let thresholds = candidate_thresholds(scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Start below every score: all predicted positive.
    let mut correct = flags.iter().filter(|&&f| f).count();
    let mut counts = vec![correct];
    let mut k = 0;
    for &t in &thresholds[1..] {
        while k < order.len() && scores[order[k]] <= t {
            if flags[order[k]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            k += 1;
        }
        counts.push(correct);
    }
    (thresholds, counts)
}

/// Best single-threshold accuracy (percent) and its threshold; ties go to the
/// lower threshold.
pub fn verification_accuracy(scores: &[f64], flags: &[bool]) -> Result<(f64, f64)> {
    check_scores(scores, flags)?;
    let (thresholds, counts) = sweep(scores, flags);
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    Ok((100.0 * counts[best] as f64 / scores.len() as f64, thresholds[best]))
}

/// Accuracy (percent) at a fixed threshold.
pub fn accuracy_at(scores: &[f64], flags: &[bool], threshold: f64) -> Result<f64> {
    check_scores(scores, flags)?;
    let correct = scores.iter().zip(flags).filter(|(&s, &f)| (s > threshold) == f).count();
    Ok(100.0 * correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC points from the highest threshold `(0, 0)` down to the lowest `(1, 1)`.
pub fn roc_points(scores: &[f64], flags: &[bool]) -> Result<Vec<RocPoint>> {
    check_scores(scores, flags)?;
    let p = flags.iter().filter(|&&f| f).count() as f64;
    let n = flags.len() as f64 - p;
    let thresholds = candidate_thresholds(scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut k) = (0usize, 0usize, 0);
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds.iter().rev() {
        while k < order.len() && scores[order[k]] > t {
            if flags[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold: t });
    }
    Ok(out)
}

/// Skewed error ratio; undefined when some group has zero error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ser {
    Value(f64),
    Degenerate,
}

impl Ser {
    pub fn value(self) -> Option<f64> {
        match self {
            Ser::Value(v) => Some(v),
            Ser::Degenerate => None,
        }
    }
}

impl std::fmt::Display for Ser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ser::Value(v) => write!(f, "{v:.4}"),
            Ser::Degenerate => f.write_str("degenerate"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub average: f64,
    /// Sample standard deviation (divisor k − 1).
    pub std: f64,
    pub ser: Ser,
}

pub fn fairness_summary(accuracies: &[f64]) -> Result<Summary> {
    let k = accuracies.len();
    if k < 2 {
        return Err(MetricError::TooFewGroups(k));
    }
    let average = accuracies.iter().sum::<f64>() / k as f64;
    let var = accuracies.iter().map(|a| (a - average).powi(2)).sum::<f64>() / (k - 1) as f64;
    let errors: Vec<f64> = accuracies.iter().map(|a| 100.0 - a).collect();
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ser = if min <= 0.0 { Ser::Degenerate } else { Ser::Value(max / min) };
    Ok(Summary { average, std: var.sqrt(), ser })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    /// Mean cosine between each feature and its identity center.
    pub intra: f64,
    /// Mean cosine over unordered pairs of identity centers.
    pub inter: f64,
    pub ratio: f64,
    /// The denominator was below `SCATTER_EPS` in magnitude and was replaced.
    pub guarded: bool,
}

pub fn feature_scatter(embeddings: &Array, identities: &[usize]) -> Result<Scatter> {
    if embeddings.nrows() != identities.len() {
        return Err(MetricError::LengthMismatch { scores: embeddings.nrows(), flags: identities.len() });
    }
    let mut sums: BTreeMap<usize, ndarray::Array1<f64>> = BTreeMap::new();
    for (row, &id) in embeddings.rows().into_iter().zip(identities) {
        let unit = &row / row.dot(&row).sqrt();
        sums.entry(id)
            .and_modify(|s| *s += &unit)
            .or_insert(unit);
    }
    if sums.len() < 2 {
        return Err(MetricError::SingleIdentity);
    }
    let centers: BTreeMap<usize, ndarray::Array1<f64>> = sums
        .into_iter()
        .map(|(id, s)| {
            let n = s.dot(&s).sqrt();
            (id, s / n)
        })
        .collect();
    let intra = embeddings
        .rows()
        .into_iter()
        .zip(identities)
        .map(|(row, id)| row.dot(&centers[id]) / row.dot(&row).sqrt())
        .sum::<f64>()
        / identities.len() as f64;
    let cs: Vec<_> = centers.values().collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            total += cs[i].dot(cs[j]);
            pairs += 1;
        }
    }
    let inter = total / pairs as f64;
    let guarded = inter.abs() < SCATTER_EPS;
    let denom = if guarded { SCATTER_EPS } else { inter };
    Ok(Scatter { intra, inter, ratio: intra / denom, guarded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub accuracy: f64,
    pub threshold: f64,
    /// Accuracy at the shared global threshold.
    pub global_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    pub scatter: Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<GroupReport>,
    pub average: f64,
    pub std: f64,
    pub ser: Ser,
    /// Single threshold chosen on all pairs pooled.
    pub global_threshold: f64,
    pub global_summary: Summary,
    pub roc: BTreeMap<usize, Vec<RocPoint>>,
    /// Signed per-group skewness at selected iterations, when a trace is attached.
    #[serde(default)]
    pub skewness_trace: Vec<(usize, BTreeMap<usize, f64>)>,
}

impl FairnessReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.accuracy).collect()
    }

    pub fn summary_line(&self) -> String {
        format!("avg={:.4} std={:.4} ser={}", self.average, self.std, self.ser)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// ROC dump with columns `group, threshold, fpr, tpr`.
    pub fn write_roc_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group", "threshold", "fpr", "tpr"])?;
        for (g, points) in &self.roc {
            for p in points {
                w.write_record([g.to_string(), p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_roc_csv(std::fs::File::create(path)?)
    }
}

/// Full report from precomputed unit-norm embeddings.
pub fn evaluate_embeddings(data: &GroupedDataset, embeddings: &Array, config: &PairConfig) -> Result<FairnessReport> {
    let pairs = build_pairs(data, embeddings, config)?;
    let score = |ps: &[Pair]| -> (Vec<f64>, Vec<bool>) {
        ps.iter().map(|p| (cosine(embeddings, p.a, p.b), p.same)).unzip()
    };

    let (all_scores, all_flags): (Vec<f64>, Vec<bool>) =
        pairs.groups.values().map(|ps| score(ps)).fold((Vec::new(), Vec::new()), |mut acc, (s, f)| {
            acc.0.extend(s);
            acc.1.extend(f);
            acc
        });
    let (_, global_threshold) = verification_accuracy(&all_scores, &all_flags)?;

    let mut groups = Vec::new();
    let mut roc = BTreeMap::new();
    for (&g, ps) in &pairs.groups {
        let (scores, flags) = score(ps);
        let (accuracy, threshold) = verification_accuracy(&scores, &flags)?;
        let global_accuracy = accuracy_at(&scores, &flags, global_threshold)?;
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.groups[i] == g).collect();
        let ids: Vec<usize> = rows.iter().map(|&i| data.identities[i]).collect();
        let scatter = feature_scatter(&embeddings.select(ndarray::Axis(0), &rows), &ids)?;
        roc.insert(g, roc_points(&scores, &flags)?);
        groups.push(GroupReport {
            group: g,
            accuracy,
            threshold,
            global_accuracy,
            positives: pairs.positives(g),
            negatives: pairs.negatives(g),
            scatter,
        });
    }
    let accs: Vec<f64> = groups.iter().map(|g| g.accuracy).collect();
    let summary = fairness_summary(&accs)?;
    let global: Vec<f64> = groups.iter().map(|g| g.global_accuracy).collect();
    Ok(FairnessReport {
        groups,
        average: summary.average,
        std: summary.std,
        ser: summary.ser,
        global_threshold,
        global_summary: fairness_summary(&global)?,
        roc,
        skewness_trace: Vec::new(),
    })
}

/// Embeds the test split with `model` and builds the report.
pub fn evaluate(model: &ModelParams, data: &GroupedDataset, config: &PairConfig) -> Result<FairnessReport> {
    if model.raw_dim() != data.dim() {
        return Err(MetricError::DimMismatch { model: model.raw_dim(), data: data.dim() });
    }
    evaluate_embeddings(data, &model.embed(&data.features), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;
    use ndarray::array;

    /// Exhaustive oracle: every threshold at and between the scores.
    fn brute_force(scores: &[f64], flags: &[bool]) -> f64 {
        let mut best = 0usize;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::NEG_INFINITY);
        for &t in &ts {
            let c = scores.iter().zip(flags).filter(|(&s, &f)| (s > t) == f).count();
            best = best.max(c);
        }
        100.0 * best as f64 / scores.len() as f64
    }

    #[test]
    fn accuracy_basics() {
        let (acc, t) = verification_accuracy(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(acc, 100.0);
        assert!((t - 0.5).abs() < 1e-15);
        let (acc, _) = verification_accuracy(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(acc, 50.0);
        let scores = [0.9, 0.4, 0.8, 0.1];
        let flags = [true, true, false, false];
        let (acc, _) = verification_accuracy(&scores, &flags).unwrap();
        assert_eq!(acc, brute_force(&scores, &flags));
        assert_eq!(acc, 75.0);
        assert!(matches!(verification_accuracy(&[], &[]), Err(MetricError::Empty)));
    }

    #[test]
    fn ties_go_to_lower_threshold() {
        // Both the min−1 and the top midpoint give 2/3 correct.
        let (acc, t) = verification_accuracy(&[0.2, 0.5, 0.8], &[true, false, true]).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(t, 0.2 - 1.0);
    }

    #[test]
    fn roc_endpoints() {
        let r = roc_points(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((r[0].fpr, r[0].tpr), (0.0, 0.0));
        assert_eq!((r.last().unwrap().fpr, r.last().unwrap().tpr), (1.0, 1.0));
        assert!(r.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let r = roc_points(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn summary_rows() {
        let s = fairness_summary(&[97.37, 94.55, 95.68, 93.87]).unwrap();
        assert!((s.average - 95.37).abs() <= 0.01);
        assert!((s.std - 1.53).abs() <= 0.01);
        assert!((s.ser.value().unwrap() - 2.33).abs() <= 0.01);
        let s = fairness_summary(&[90.0; 4]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.ser, Ser::Value(1.0));
        assert_eq!(fairness_summary(&[100.0, 90.0]).unwrap().ser, Ser::Degenerate);
        assert!(matches!(fairness_summary(&[90.0]), Err(MetricError::TooFewGroups(1))));
    }

    #[test]
    fn scatter_constructed() {
        // Centers with pairwise cosine 0.5, every feature at its center.
        let c = 0.5f64;
        let e = array![[1.0, 0.0], [1.0, 0.0], [c, (1.0 - c * c).sqrt()]];
        let s = feature_scatter(&e, &[0, 0, 1]).unwrap();
        assert!((s.intra - 1.0).abs() < 1e-12);
        assert!((s.inter - 0.5).abs() < 1e-12);
        assert!((s.ratio - 2.0).abs() < 1e-12);
        assert!(!s.guarded);

        let s = feature_scatter(&array![[1.0, 0.0], [0.0, 1.0]], &[0, 1]).unwrap();
        assert!(s.guarded);
        assert!(matches!(
            feature_scatter(&array![[1.0, 0.0]], &[0]),
            Err(MetricError::SingleIdentity)
        ));
    }

    fn toy_split() -> (GroupedDataset, Array) {
        // One group, identities {0, 1} with two samples each.
        let e = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.2, 0.8]];
        let d = GroupedDataset {
            features: e.clone(),
            identities: vec![0, 0, 1, 1],
            groups: vec![0; 4],
            split: Split::Test,
            identity_uids: vec![0, 1],
        };
        (d, e)
    }

    #[test]
    fn pairs_by_hand() {
        let (d, e) = toy_split();
        let p = build_pairs(&d, &e, &PairConfig { budget: 4, difficulty: 0.5, seed: 1 }).unwrap();
        assert_eq!(p.positives(0), 2);
        assert_eq!(p.negatives(0), 2);
        let again = build_pairs(&d, &e, &PairConfig { budget: 4, difficulty: 0.5, seed: 1 }).unwrap();
        assert_eq!(p, again);
        assert!(build_pairs(&d, &e, &PairConfig { budget: 1, difficulty: 0.5, seed: 1 }).is_err());

        let mut single = d.clone();
        single.identities = vec![0, 1, 2, 3];
        single.identity_uids = vec![0, 1, 2, 3];
        assert!(matches!(
            build_pairs(&single, &e, &PairConfig::default()),
            Err(MetricError::NoPositivePairs(0))
        ));
    }

    #[test]
    fn hardest_pairs_come_first() {
        let (d, e) = toy_split();
        // One pair per side, all of it hard: the least similar positive and
        // the most similar negative.
        let p = build_pairs(&d, &e, &PairConfig { budget: 2, difficulty: 1.0, seed: 0 }).unwrap();
        let pairs = &p.groups[&0];
        let pos = pairs.iter().find(|p| p.same).unwrap();
        let neg = pairs.iter().find(|p| !p.same).unwrap();
        assert_eq!((pos.a, pos.b), (2, 3));
        assert_eq!((neg.a, neg.b), (1, 3));
    }
}
