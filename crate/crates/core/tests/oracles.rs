use std::collections::{BTreeMap, BTreeSet};

use mbn_core::autodiff::{Array, Graph, ParameterSet};
use mbn_core::losses::{adaptive_margin_loss, meta_skewness_loss, Batch, HeadNode, MarginSchedule, MarginVariant, MetaLossConfig};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two identities per group on the unit circle at ±φ and π±φ. Each sample's
/// only positive sits at squared distance 4sin²φ, so with γ = 0 every
/// triplet scores exp(4sin²φ).
fn circle_group(mean_l: f64) -> Vec<[f64; 2]> {
    let phi = (mean_l.ln() / 4.0).sqrt().asin();
    [phi, -phi, std::f64::consts::PI + phi, std::f64::consts::PI - phi]
        .iter()
        .map(|a| [a.cos(), a.sin()])
        .collect()
}

#[test]
fn meta_loss_sums_absolute_group_gaps() {
    let means = [1.2, 1.5, 1.1, 1.9];
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    for (g, &l) in means.iter().enumerate() {
        for (k, p) in circle_group(l).into_iter().enumerate() {
            rows.extend(p);
            ids.push(2 * g + k / 2);
            groups.push(g);
        }
    }
    let emb = Array::from_shape_vec((ids.len(), 2), rows).unwrap();
    let mut g = Graph::new();
    let e = g.constant(emb);
    let config = MetaLossConfig { gamma: 0.0, tau: 100.0 };
    let out = meta_skewness_loss(&mut g, e, &ids, &groups, &BTreeSet::from([0]), 4, &config).unwrap();
    let loss = g.evaluate_scalar(out.loss).unwrap();
    assert!((loss - 1.1).abs() < 1e-12, "{loss}");
    for (grp, want) in [(1, 0.3), (2, -0.1), (3, 0.7)] {
        assert!((out.skewness[&grp] - want).abs() < 1e-12, "group {grp}: {}", out.skewness[&grp]);
    }
    assert!(out.triplet_counts.values().all(|&n| n == 4));
}

#[test]
fn arc_loss_mixed_second_matches_nested_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let schedule = MarginSchedule::new(2, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
    let margin = MarginSchedule::parameter_name(1);
    let labels = [1usize];
    let groups = [1usize];
    let loss = |e: &Array, w: &Array, m: f64| -> (Graph, ParameterSet, mbn_core::autodiff::NodeId) {
        let mut g = Graph::new();
        let mut set = ParameterSet::new();
        let ep = g.parameter("emb", e.clone()).unwrap();
        let wp = g.parameter("head", w.clone()).unwrap();
        let mp = g.parameter(margin.clone(), array![[m]]).unwrap();
        set.insert("emb", ep).unwrap();
        set.insert("head", wp).unwrap();
        let mut margins = ParameterSet::new();
        margins.insert(margin.clone(), mp).unwrap();
        set.insert(margin.clone(), mp).unwrap();
        let unit = g.l2_normalize_rows(ep).unwrap();
        let batch = Batch { embeddings: unit, labels: &labels, groups: &groups };
        let out = adaptive_margin_loss(&mut g, &batch, HeadNode { weight: wp, scale: 4.0 }, &schedule, &margins).unwrap();
        (g, set, out)
    };
    let value = |e: &Array, w: &Array, m: f64| {
        let (mut g, _, out) = loss(e, w, m);
        g.evaluate_scalar(out).unwrap()
    };

    for _ in 0..5 {
        let e = Array::from_shape_simple_fn((1, 3), || rng.random_range(-1.0..1.0));
        let w = Array::from_shape_simple_fn((3, 3), || rng.random_range(-1.0..1.0));
        let m = rng.random_range(0.1..0.6);
        let de = Array::from_shape_simple_fn((1, 3), || rng.random_range(-1.0..1.0));
        let dw = Array::from_shape_simple_fn((3, 3), || rng.random_range(-1.0..1.0));

        let (mut g, set, out) = loss(&e, &w, m);
        let first = set.select(["emb", "head"]).unwrap();
        let second = set.select([margin.as_str()]).unwrap();
        let dir = BTreeMap::from([("emb".to_string(), de.clone()), ("head".to_string(), dw.clone())]);
        let analytic = g.mixed_second(out, &first, &dir, &second).unwrap()[&margin][[0, 0]];

        let h = 1e-4;
        let at = |eps: f64, dm: f64| value(&(&e + &(&de * eps)), &(&w + &(&dw * eps)), m + dm);
        let numeric = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-3, "analytic {analytic} numeric {numeric}");
    }
}
