use super::{Array, AutodiffError, Result};

/// Central-difference gradient of `f` at `point`.
///
/// Used as an independent oracle in tests and by the `gradcheck` command.
pub fn finite_difference_gradient<F>(mut f: F, point: &Array, step: f64) -> Result<Array>
where
    F: FnMut(&Array) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let mut grad = Array::zeros(point.raw_dim());
    let mut probe = point.clone();
    for (k, (idx, &x)) in point.indexed_iter().enumerate() {
        probe[idx] = x + step;
        let up = f(&probe)?;
        probe[idx] = x - step;
        let down = f(&probe)?;
        probe[idx] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFiniteProbe(k));
        }
        grad[idx] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both are exactly zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
