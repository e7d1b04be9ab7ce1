//! Synthetic grouped-identity data on the unit hypersphere.
//!
//! Every identity has a prototype direction; samples are the prototype plus
//! isotropic Gaussian noise, renormalized to unit length. The noise has
//! per-coordinate standard deviation `σ/√D`, so `σ` is the RMS noise norm
//! relative to the unit prototype and keeps its meaning across `D`. Larger
//! `σ` makes a group harder to verify.
//!
//! Optionally each group's prototypes are confined to a group-specific linear
//! subspace of dimension `subspace_dim`. Groups then compete for encoder
//! capacity, which is what lets training-set imbalance turn into per-group
//! accuracy gaps. Group subspaces are mutually orthogonal whenever
//! `groups × subspace_dim ≤ dim`.
//!
//! File format (text, space separated):
//!
//! ```text
//! # mbn-dataset split=<train|meta|test>
//! # uids <uid of identity 0> <uid of identity 1> ...
//! <D> <sample count> <group count>
//! <x_1> ... <x_D> <identity> <group>      (one line per sample)
//! ```
//!
//! Lines starting with `#` are metadata; both are optional on load. Reals are
//! written in shortest round-trip form, so `load(save(x)) == x` exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("duplicate group id {0}")]
    DuplicateGroup(usize),
    #[error("invalid group spec for group {group}: {reason}")]
    InvalidSpec { group: usize, reason: String },
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 2 identities per group, got {0}")]
    TooFewIdentities(usize),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("record {record} (line {line}): expected {expected} fields, found {found}")]
    RecordLength { record: usize, line: usize, expected: usize, found: usize },
    #[error("record {record} (line {line}): {reason}")]
    BadRecord { record: usize, line: usize, reason: String },
    #[error("expected {expected} records, found {found}")]
    RecordCount { expected: usize, found: usize },
    #[error("invalid ratio `{0}`")]
    InvalidRatio(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Meta,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Meta => 2,
            Split::Test => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Meta => "meta",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "meta" => Some(Split::Meta),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    #[serde(default)]
    pub prototype_seed: u64,
}

impl GroupSpec {
    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(DataError::InvalidSpec { group: self.group, reason: reason.to_string() })
        };
        if self.classes == 0 {
            return bad("class count must be at least 1");
        }
        if self.samples_per_class == 0 {
            return bad("samples per class must be at least 1");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive");
        }
        Ok(())
    }
}

/// Everything needed to regenerate any split consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataParams {
    pub specs: Vec<GroupSpec>,
    pub dim: usize,
    pub seed: u64,
    /// Dimension of each group's prototype subspace; `None` uses the whole sphere.
    pub subspace_dim: Option<usize>,
}

impl DataParams {
    pub fn new(specs: Vec<GroupSpec>, dim: usize, seed: u64) -> Self {
        Self { specs, dim, seed, subspace_dim: None }
    }

    pub fn with_subspace_dim(mut self, dim: usize) -> Self {
        self.subspace_dim = Some(dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(DataError::InvalidParams(format!("raw dim must be >= 8, got {}", self.dim)));
        }
        if self.specs.is_empty() {
            return Err(DataError::InvalidParams("no group specs".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.specs {
            if !seen.insert(spec.group) {
                return Err(DataError::DuplicateGroup(spec.group));
            }
            spec.validate()?;
        }
        if let Some(r) = self.subspace_dim {
            if r == 0 || r > self.dim {
                return Err(DataError::InvalidParams(format!(
                    "subspace dim {r} outside [1, {}]",
                    self.dim
                )));
            }
        }
        let max_group = *seen.iter().next_back().expect("non-empty");
        if max_group + 1 != seen.len() {
            return Err(DataError::InvalidParams("group ids must be dense from 0".into()));
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.specs.len()
    }

    fn spec(&self, group: usize) -> &GroupSpec {
        self.specs.iter().find(|s| s.group == group).expect("validated dense ids")
    }

    /// Orthonormal basis (rows) of each group's prototype subspace.
    fn group_bases(&self) -> Vec<Option<Array2<f64>>> {
        let Some(r) = self.subspace_dim else {
            return vec![None; self.group_count()];
        };
        let k = self.group_count();
        let mut rng = stream_rng(self.seed, 0, 0);
        if k * r <= self.dim {
            let basis = random_orthonormal(self.dim, self.dim, &mut rng);
            (0..k)
                .map(|g| Some(basis.slice(ndarray::s![g * r..(g + 1) * r, ..]).to_owned()))
                .collect()
        } else {
            (0..k).map(|_| Some(random_orthonormal(r, self.dim, &mut rng))).collect()
        }
    }
}

fn stream_rng(seed: u64, split: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | group);
    rng
}

/// `count` orthonormal rows in R^dim via Gram-Schmidt on Gaussian vectors.
fn random_orthonormal<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((count, dim));
    let mut i = 0;
    while i < count {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
        for j in 0..i {
            let proj = v.dot(&out.row(j));
            v.scaled_add(-proj, &out.row(j));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            out.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    out
}

fn random_unit<R: Rng>(dim: usize, basis: Option<&Array2<f64>>, rng: &mut R) -> Array1<f64> {
    loop {
        let v = match basis {
            Some(b) => {
                let coeffs: Array1<f64> =
                    Array1::from_shape_simple_fn(b.nrows(), || rng.sample(StandardNormal));
                b.t().dot(&coeffs)
            }
            None => Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal)),
        };
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Labelled samples of one split. Identity ids are dense in `[0, c)`;
/// `identity_uids` maps them to split-independent ids for disjointness checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub features: Array2<f64>,
    pub identities: Vec<usize>,
    pub groups: Vec<usize>,
    pub split: Split,
    pub identity_uids: Vec<u64>,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.identity_uids.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Samples per group.
    pub fn group_sample_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &g in &self.groups {
            *out.entry(g).or_insert(0) += 1;
        }
        out
    }

    /// Distinct identities per group.
    pub fn group_identity_counts(&self) -> BTreeMap<usize, usize> {
        self.identities_by_group()
            .into_iter()
            .map(|(g, ids)| (g, ids.len()))
            .collect()
    }

    /// Sample indices of each identity, in sample order.
    pub fn samples_by_identity(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count()];
        for (i, &id) in self.identities.iter().enumerate() {
            out[id].push(i);
        }
        out
    }

    /// Sorted identity ids of each group.
    pub fn identities_by_group(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut sets: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (&id, &g) in self.identities.iter().zip(&self.groups) {
            sets.entry(g).or_default().insert(id);
        }
        sets.into_iter().map(|(g, s)| (g, s.into_iter().collect())).collect()
    }

    /// Rows for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), indices)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# mbn-dataset split={}", self.split.as_str()).unwrap();
        out.push_str("# uids");
        for uid in &self.identity_uids {
            write!(out, " {uid}").unwrap();
        }
        out.push('\n');
        writeln!(out, "{} {} {}", self.dim(), self.len(), self.group_count()).unwrap();
        for i in 0..self.len() {
            for v in self.features.row(i) {
                write!(out, "{v} ").unwrap();
            }
            writeln!(out, "{} {}", self.identities[i], self.groups[i]).unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = Split::Train;
        let mut uids: Option<Vec<u64>> = None;
        let mut header: Option<(usize, usize, usize)> = None;
        let mut features = Vec::new();
        let mut identities = Vec::new();
        let mut groups = Vec::new();

        for (line_no, line) in text.lines().enumerate() {
            let line_no = line_no + 1;
            let trimmed = line.trim();
            if let Some(meta) = trimmed.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(rest) = meta.strip_prefix("mbn-dataset") {
                    for kv in rest.split_whitespace() {
                        if let Some(v) = kv.strip_prefix("split=") {
                            split = Split::parse(v).ok_or_else(|| {
                                DataError::MalformedHeader(format!("unknown split `{v}`"))
                            })?;
                        }
                    }
                } else if let Some(rest) = meta.strip_prefix("uids") {
                    let parsed: std::result::Result<Vec<u64>, _> =
                        rest.split_whitespace().map(str::parse).collect();
                    uids = Some(parsed.map_err(|e| {
                        DataError::MalformedHeader(format!("bad uid list: {e}"))
                    })?);
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let Some((dim, count, _)) = header else {
                let fields: Vec<&str> = trimmed.split_whitespace().collect();
                if fields.len() != 3 {
                    return Err(DataError::MalformedHeader(format!(
                        "expected `D count groups`, got `{trimmed}`"
                    )));
                }
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| DataError::MalformedHeader(format!("`{s}`: {e}")))
                };
                header = Some((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
                features.reserve(header.unwrap().0 * header.unwrap().1);
                continue;
            };
            let record = identities.len();
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != dim + 2 {
                return Err(DataError::RecordLength {
                    record,
                    line: line_no,
                    expected: dim + 2,
                    found: fields.len(),
                });
            }
            if record >= count {
                return Err(DataError::RecordCount { expected: count, found: record + 1 });
            }
            let bad = |reason: String| DataError::BadRecord { record, line: line_no, reason };
            for f in &fields[..dim] {
                let v: f64 = f.parse().map_err(|e| bad(format!("`{f}`: {e}")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value `{f}`")));
                }
                features.push(v);
            }
            identities.push(fields[dim].parse().map_err(|e| bad(format!("identity: {e}")))?);
            groups.push(fields[dim + 1].parse().map_err(|e| bad(format!("group: {e}")))?);
        }

        let (dim, count, group_count) =
            header.ok_or_else(|| DataError::MalformedHeader("missing header line".into()))?;
        if identities.len() != count {
            return Err(DataError::RecordCount { expected: count, found: identities.len() });
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= group_count) {
            return Err(DataError::MalformedHeader(format!(
                "group {g} exceeds declared group count {group_count}"
            )));
        }
        let classes = identities.iter().max().map_or(0, |m| m + 1);
        let identity_uids = match uids {
            Some(u) if u.len() == classes => u,
            Some(u) => {
                return Err(DataError::MalformedHeader(format!(
                    "{} uids for {classes} identities",
                    u.len()
                )))
            }
            None => (0..classes as u64).collect(),
        };
        let features = Array2::from_shape_vec((count, dim), features)
            .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
        Ok(Self { features, identities, groups, split, identity_uids })
    }
}

fn uid(split: Split, group: usize, local: usize) -> u64 {
    (split.code() << 48) | ((group as u64) << 32) | local as u64
}

struct GroupLayout {
    group: usize,
    classes: usize,
    samples_per_class: usize,
}

fn build_split(params: &DataParams, split: Split, seed: u64, layout: &[GroupLayout]) -> GroupedDataset {
    let bases = params.group_bases();
    let total: usize = layout.iter().map(|l| l.classes * l.samples_per_class).sum();
    let mut features = Array2::zeros((total, params.dim));
    let mut identities = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    let mut identity_uids = Vec::new();
    let mut row = 0;
    for l in layout {
        let spec = params.spec(l.group);
        let mut rng = stream_rng(
            seed ^ spec.prototype_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            split.code(),
            l.group as u64 + 1,
        );
        for local in 0..l.classes {
            let id = identity_uids.len();
            identity_uids.push(uid(split, l.group, local));
            let proto = random_unit(params.dim, bases[l.group].as_ref(), &mut rng);
            let std = spec.sigma / (params.dim as f64).sqrt();
            for _ in 0..l.samples_per_class {
                let mut x = proto.clone();
                for v in x.iter_mut() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *v += std * noise;
                }
                let norm = x.dot(&x).sqrt();
                features.row_mut(row).assign(&(x / norm));
                identities.push(id);
                groups.push(l.group);
                row += 1;
            }
        }
    }
    GroupedDataset { features, identities, groups, split, identity_uids }
}

/// Training split: class counts and samples per class exactly as specified.
pub fn generate(params: &DataParams) -> Result<GroupedDataset> {
    params.validate()?;
    let mut specs: Vec<&GroupSpec> = params.specs.iter().collect();
    specs.sort_by_key(|s| s.group);
    let layout: Vec<GroupLayout> = specs
        .iter()
        .map(|s| GroupLayout { group: s.group, classes: s.classes, samples_per_class: s.samples_per_class })
        .collect();
    Ok(build_split(params, Split::Train, params.seed, &layout))
}

fn balanced_split(
    params: &DataParams,
    split: Split,
    identities_per_group: usize,
    samples_per_identity: usize,
    seed: u64,
) -> Result<GroupedDataset> {
    params.validate()?;
    if identities_per_group < 2 {
        return Err(DataError::TooFewIdentities(identities_per_group));
    }
    if samples_per_identity == 0 {
        return Err(DataError::InvalidParams("samples per identity must be positive".into()));
    }
    let layout: Vec<GroupLayout> = (0..params.group_count())
        .map(|g| GroupLayout {
            group: g,
            classes: identities_per_group,
            samples_per_class: samples_per_identity,
        })
        .collect();
    Ok(build_split(params, split, seed, &layout))
}

/// Small group-balanced meta split with fresh identities.
pub fn make_meta_split(
    params: &DataParams,
    identities_per_group: usize,
    samples_per_identity: usize,
    seed: u64,
) -> Result<GroupedDataset> {
    balanced_split(params, Split::Meta, identities_per_group, samples_per_identity, seed)
}

/// Group-balanced test split with fresh identities.
pub fn make_test_split(
    params: &DataParams,
    identities_per_group: usize,
    samples_per_identity: usize,
    seed: u64,
) -> Result<GroupedDataset> {
    balanced_split(params, Split::Test, identities_per_group, samples_per_identity, seed)
}

/// Parses ratios such as `7:1:1:1` or `5:5/3:5/3:5/3`.
pub fn parse_ratio(text: &str) -> Result<Vec<f64>> {
    let bad = || DataError::InvalidRatio(text.to_string());
    let parts: Vec<f64> = text
        .split(':')
        .map(|part| {
            let part = part.trim();
            match part.split_once('/') {
                Some((n, d)) => {
                    let n: f64 = n.trim().parse().map_err(|_| bad())?;
                    let d: f64 = d.trim().parse().map_err(|_| bad())?;
                    Ok(n / d)
                }
                None => part.parse::<f64>().map_err(|_| bad()),
            }
        })
        .collect::<Result<_>>()?;
    if parts.is_empty() || parts.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(bad());
    }
    Ok(parts)
}

/// Group specs whose class counts follow `ratio` over `total_classes`.
pub fn ratio_specs(
    ratio: &[f64],
    total_classes: usize,
    samples_per_class: usize,
    sigmas: &[f64],
) -> Result<Vec<GroupSpec>> {
    if ratio.len() != sigmas.len() {
        return Err(DataError::InvalidParams(format!(
            "{} ratio parts but {} sigmas",
            ratio.len(),
            sigmas.len()
        )));
    }
    let sum: f64 = ratio.iter().sum();
    Ok(ratio
        .iter()
        .zip(sigmas)
        .enumerate()
        .map(|(g, (&r, &sigma))| GroupSpec {
            group: g,
            classes: ((total_classes as f64) * r / sum).round().max(1.0) as usize,
            samples_per_class,
            sigma,
            prototype_seed: g as u64,
        })
        .collect())
}
