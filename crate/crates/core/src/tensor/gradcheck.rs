use super::Tensor;
use crate::error::{invalid, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central finite-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {step}"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Central differences for the listed flat indices of `x` only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, step: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {step}"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Largest elementwise [`rel_error`] between two same-shaped tensors.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    analytic.expect_same_shape(numeric)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max))
}
