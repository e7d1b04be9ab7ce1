use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::losses::MarginSchedule;

use super::{ModelParams, Result, TrainError};

/// Step-decay learning rate: `base × Π factor` over milestones already reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    /// `(iteration, factor)` pairs; the factor applies from that iteration on.
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, milestones: Vec::new() }
    }

    /// Milestones at the given fractions of `iterations`, each multiplying by `factor`.
    pub fn at_fractions(base: f64, iterations: usize, fractions: &[f64], factor: f64) -> Self {
        let milestones = fractions
            .iter()
            .map(|f| (((iterations as f64) * f).round() as usize, factor))
            .collect();
        Self { base, milestones }
    }

    pub fn at(&self, iteration: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(it, _)| *it <= iteration)
            .fold(self.base, |lr, (_, f)| lr * f)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Array>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&Array> {
        self.velocity.get(name)
    }

    pub fn update(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) -> Result<()> {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Array::zeros(param.raw_dim()));
        let (mu, wd) = (self.momentum, self.weight_decay);
        ndarray::Zip::from(&mut *v).and(grad).and(&*param).for_each(|v, &g, &w| {
            *v = mu * *v + g + wd * w;
        });
        param.scaled_add(-lr, v);
        Ok(())
    }

    /// One step on every model leaf, then head columns are re-normalized.
    pub fn step(&mut self, model: &mut ModelParams, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let param = model
                .leaf_mut(name)
                .ok_or_else(|| TrainError::Config(format!("unknown model leaf `{name}`")))?;
            self.update(name, param, grad, lr)?;
        }
        model.head.normalize_columns();
        Ok(())
    }
}

/// Momentum SGD on the learnable margins, followed by the schedule's clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginOptimizer {
    pub momentum: f64,
    velocity: BTreeMap<usize, f64>,
}

impl MarginOptimizer {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, group: usize) -> f64 {
        self.velocity.get(&group).copied().unwrap_or(0.0)
    }

    pub fn step(&mut self, schedule: &mut MarginSchedule, grads: &BTreeMap<usize, f64>, lr: f64) -> Result<()> {
        for (&g, &grad) in grads {
            if !grad.is_finite() {
                return Err(TrainError::NonFiniteGradient(MarginSchedule::parameter_name(g)));
            }
            let v = self.velocity.entry(g).or_insert(0.0);
            *v = self.momentum * *v + grad;
            let next = schedule.margin(g)? - lr * *v;
            schedule.set_margin(g, next)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MarginVariant;
    use ndarray::array;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule::at_fractions(0.1, 100, &[0.5, 0.8], 0.1);
        assert_eq!(s.milestones, vec![(50, 0.1), (80, 0.1)]);
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(49), 0.1);
        assert!((s.at(50) - 0.01).abs() < 1e-15);
        assert!((s.at(99) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion_on_scalar_quadratic() {
        // f(w) = w², g = 2w; hand-rolled recursion as the oracle.
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut opt = MomentumSgd::new(mu, wd);
        let mut w = array![[1.5]];
        let (mut w_ref, mut v_ref) = (1.5f64, 0.0f64);
        for _ in 0..5 {
            let g = array![[2.0 * w[[0, 0]]]];
            opt.update("w", &mut w, &g, lr).unwrap();
            v_ref = mu * v_ref + 2.0 * w_ref + wd * w_ref;
            w_ref -= lr * v_ref;
            assert!((w[[0, 0]] - w_ref).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut opt = MomentumSgd::new(0.9, 0.0);
        let mut w = array![[0.3, -0.2]];
        opt.update("w", &mut w, &array![[0.0, 0.0]], 0.5).unwrap();
        assert_eq!(w, array![[0.3, -0.2]]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = MomentumSgd::new(0.9, 0.0);
        let mut w = array![[0.3]];
        assert!(matches!(
            opt.update("w", &mut w, &array![[f64::NAN]], 0.5),
            Err(TrainError::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn margin_step_clamps_and_skips_anchors() {
        let mut s = MarginSchedule::new(3, [0], 0.3, 0.3, MarginVariant::Arc).unwrap();
        let mut opt = MarginOptimizer::new(0.9);
        let grads = BTreeMap::from([(1, -10.0), (2, 0.5)]);
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.margin(0).unwrap(), 0.3);
        assert_eq!(s.margin(1).unwrap(), 1.0);
        assert!((s.margin(2).unwrap() - 0.25).abs() < 1e-15);
        opt.step(&mut s, &BTreeMap::from([(2, 0.0)]), 0.1).unwrap();
        assert!((s.margin(2).unwrap() - (0.25 - 0.1 * 0.45)).abs() < 1e-15);

        let before = s.clone();
        opt.step(&mut s, &BTreeMap::from([(1, 3.0), (2, 3.0)]), 0.0).unwrap();
        assert_eq!(s, before);
    }
}
