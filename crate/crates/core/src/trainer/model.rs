use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Array, Graph, NodeId, ParameterSet};
use crate::losses::{ClassifierHead, HeadNode};

use super::{Result, TrainError};

pub const HEAD_WEIGHT: &str = "head.weight";

/// Affine layer `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array,
    pub bias: Array,
}

/// MLP encoder (relu between layers, none after the last) with an L2-normalized
/// output, followed by the cosine classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub head: ClassifierHead,
}

fn weight_name(i: usize) -> String {
    format!("encoder.{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("encoder.{i}.bias")
}

impl ModelParams {
    /// He-initialized encoder `raw_dim → hidden… → embed_dim` and a random head.
    pub fn random<R: Rng + ?Sized>(
        raw_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        classes: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![raw_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let encoder = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weight = Array::from_shape_simple_fn((w[0], w[1]), || {
                    std * rng.sample::<f64, _>(StandardNormal)
                });
                Layer { weight, bias: Array::zeros((1, w[1])) }
            })
            .collect();
        let head = ClassifierHead::random(embed_dim, classes, scale, rng)?;
        Ok(Self { encoder, head })
    }

    pub fn raw_dim(&self) -> usize {
        self.encoder[0].weight.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().expect("non-empty encoder").weight.ncols()
    }

    pub fn encoder_names(&self) -> Vec<String> {
        (0..self.encoder.len()).flat_map(|i| [weight_name(i), bias_name(i)]).collect()
    }

    /// All leaves in a fixed order: encoder layers, then the head.
    pub fn leaves(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((weight_name(i), &l.weight));
            out.push((bias_name(i), &l.bias));
        }
        out.push((HEAD_WEIGHT.to_string(), &self.head.weight));
        out
    }

    pub fn leaf_mut(&mut self, name: &str) -> Option<&mut Array> {
        if name == HEAD_WEIGHT {
            return Some(&mut self.head.weight);
        }
        let rest = name.strip_prefix("encoder.")?;
        let (idx, kind) = rest.split_once('.')?;
        let layer = self.encoder.get_mut(idx.parse::<usize>().ok()?)?;
        match kind {
            "weight" => Some(&mut layer.weight),
            "bias" => Some(&mut layer.bias),
            _ => None,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.leaves().iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every leaf as a graph parameter.
    pub fn register(&self, graph: &mut Graph) -> Result<ParameterSet> {
        let mut set = ParameterSet::new();
        for (name, value) in self.leaves() {
            let id = graph.parameter(name.clone(), value.clone())?;
            set.insert(name, id)?;
        }
        Ok(set)
    }

    /// Encoder forward pass in the graph using the given weight nodes, which may
    /// be leaves or virtual-step expressions.
    pub fn forward(&self, graph: &mut Graph, weights: &BTreeMap<String, NodeId>, x: NodeId) -> Result<NodeId> {
        let node = |name: String| {
            weights
                .get(&name)
                .copied()
                .ok_or_else(|| TrainError::Config(format!("missing weight `{name}`")))
        };
        let mut h = x;
        let last = self.encoder.len() - 1;
        for i in 0..self.encoder.len() {
            let z = graph.matmul(h, node(weight_name(i))?)?;
            h = graph.add(z, node(bias_name(i))?)?;
            if i < last {
                h = graph.relu(h)?;
            }
        }
        Ok(graph.l2_normalize_rows(h)?)
    }

    pub fn head_node(&self, weights: &BTreeMap<String, NodeId>) -> Result<HeadNode> {
        let weight = weights
            .get(HEAD_WEIGHT)
            .copied()
            .ok_or_else(|| TrainError::Config(format!("missing weight `{HEAD_WEIGHT}`")))?;
        Ok(HeadNode { weight, scale: self.head.scale })
    }

    /// Unit-norm embeddings of the rows of `x`, outside any graph.
    pub fn embed(&self, x: &Array) -> Array {
        let mut h = x.clone();
        let last = self.encoder.len() - 1;
        for (i, l) in self.encoder.iter().enumerate() {
            h = h.dot(&l.weight) + &l.bias;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        for mut row in h.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        h
    }

    /// Flat text format: a `# mbn-model scale=<s>` line, then per leaf a
    /// `name rows cols` line followed by one line of row-major values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# mbn-model scale={}", self.head.scale).unwrap();
        for (name, a) in self.leaves() {
            writeln!(out, "{name} {} {}", a.nrows(), a.ncols()).unwrap();
            let values: Vec<String> = a.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", values.join(" ")).unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| TrainError::ModelFile(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let scale: f64 = first
            .trim()
            .strip_prefix("# mbn-model scale=")
            .ok_or_else(|| bad(format!("bad header `{first}`")))?
            .parse()
            .map_err(|e| bad(format!("bad scale: {e}")))?;

        let mut leaves: BTreeMap<String, Array> = BTreeMap::new();
        while let Some(header) = lines.next() {
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [name, rows, cols] = fields[..] else {
                return Err(bad(format!("bad leaf header `{header}`")));
            };
            let rows: usize = rows.parse().map_err(|e| bad(format!("{name}: {e}")))?;
            let cols: usize = cols.parse().map_err(|e| bad(format!("{name}: {e}")))?;
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad(format!("{name}: missing values")))?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
                .collect::<Result<_>>()?;
            if values.len() != rows * cols || values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{name}: expected {} finite values", rows * cols)));
            }
            let a = Array::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            leaves.insert(name.to_string(), a);
        }

        let mut encoder = Vec::new();
        while let Some(weight) = leaves.remove(&weight_name(encoder.len())) {
            let i = encoder.len();
            let bias = leaves
                .remove(&bias_name(i))
                .ok_or_else(|| bad(format!("missing {}", bias_name(i))))?;
            if bias.dim() != (1, weight.ncols()) {
                return Err(bad(format!("{} has shape {:?}", bias_name(i), bias.dim())));
            }
            if let Some(prev) = encoder.last().map(|l: &Layer| l.weight.ncols()) {
                if prev != weight.nrows() {
                    return Err(bad(format!("{} does not chain", weight_name(i))));
                }
            }
            encoder.push(Layer { weight, bias });
        }
        if encoder.is_empty() {
            return Err(bad("no encoder layers".into()));
        }
        let head = leaves
            .remove(HEAD_WEIGHT)
            .ok_or_else(|| bad(format!("missing {HEAD_WEIGHT}")))?;
        if let Some(extra) = leaves.keys().next() {
            return Err(bad(format!("unexpected leaf `{extra}`")));
        }
        let model = Self {
            encoder,
            head: ClassifierHead { weight: head, scale },
        };
        if model.head.dim() != model.embed_dim() {
            return Err(bad("head dim differs from encoder output".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        ModelParams::random(8, &[6], 4, 5, 10.0, &mut rng).unwrap()
    }

    #[test]
    fn graph_forward_matches_direct_embed() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_shape_simple_fn((3, 8), || rng.sample(StandardNormal));
        let mut g = Graph::new();
        let params = m.register(&mut g).unwrap();
        let map: BTreeMap<String, NodeId> = params.iter().map(|(n, id)| (n.to_string(), id)).collect();
        let xn = g.constant(x.clone());
        let out = m.forward(&mut g, &map, xn).unwrap();
        let via_graph = g.evaluate(out).unwrap().clone();
        let direct = m.embed(&x);
        assert!((via_graph - direct).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn leaf_lookup() {
        let mut m = model();
        assert_eq!(m.leaves().len(), 5);
        assert_eq!(m.scalar_count(), 8 * 6 + 6 + 6 * 4 + 4 + 4 * 5);
        assert!(m.leaf_mut("encoder.1.bias").is_some());
        assert!(m.leaf_mut("encoder.2.bias").is_none());
        assert!(m.leaf_mut("margin.1").is_none());
    }

    #[test]
    fn file_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        m.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(ModelParams::parse(&text.replace("head.weight", "head.other")).is_err());
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(ModelParams::parse(&cut).is_err());
    }
}
