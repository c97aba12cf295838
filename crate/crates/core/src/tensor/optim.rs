//! SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// One SGD-with-momentum update on a single parameter tensor:
///
/// ```text
/// g = grad + weight_decay * param
/// v = momentum * v + g
/// param -= lr * v
/// ```
pub fn sgd_step<E: Float>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    velocity: &mut Tensor<E>,
    lr: E,
    momentum: E,
    weight_decay: E,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim(format!(
            "sgd_step: shapes disagree (param {:?}, grad {:?}, velocity {:?})",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let p = param.data_mut();
    let g = grad.data();
    let v = velocity.data_mut();
    for i in 0..p.len() {
        let eff = g[i] + weight_decay * p[i];
        v[i] = momentum * v[i] + eff;
        p[i] -= lr * v[i];
    }
    Ok(())
}

/// Momentum state for a fixed list of parameters, addressed by index.
pub struct SgdMomentum<E> {
    momentum: E,
    weight_decay: E,
    velocities: Vec<Option<Tensor<E>>>,
}

impl<E: Float> SgdMomentum<E> {
    pub fn new(num_params: usize, momentum: E, weight_decay: E) -> Self {
        SgdMomentum { momentum, weight_decay, velocities: (0..num_params).map(|_| None).collect() }
    }

    pub fn step(&mut self, index: usize, param: &mut Tensor<E>, grad: &Tensor<E>, lr: E) -> Result<()> {
        let v = self.velocities[index].get_or_insert_with(|| Tensor::zeros(param.shape()));
        sgd_step(param, grad, v, lr, self.momentum, self.weight_decay)
    }
}
