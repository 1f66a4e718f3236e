use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for each parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err!("adam: parameter {i} has shape {:?} but gradient {:?}", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("adam: gradient {i} contains NaN or Inf")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[3], 0.7);
        let mut s = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut s, 1e-3).unwrap();
        assert_eq!(p, Tensor::full(&[3], 0.7));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 30.0]).unwrap();
        let mut s = AdamState::new([&p]);
        let lr = 1e-4;
        adam_step(&mut [&mut p], &[g.clone()], &mut s, lr).unwrap();
        for (d, g) in p.data().iter().zip(g.data()) {
            assert!((d + lr * g.signum()).abs() < lr * 1e-6);
        }
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = Tensor::zeros(&[1]);
        let mut s = AdamState::new([&p]);
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(adam_step(&mut [&mut p], &[g], &mut s, 1e-3).is_err());
        assert_eq!(s.t, 0);
        assert_eq!(p.data(), &[0.0]);
    }
}
