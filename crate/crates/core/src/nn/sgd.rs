use super::network::Network;
use crate::error::NnError;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    /// Apply one update from the gradients currently held by `net`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, net: &mut Network<T>, lr: T) -> Result<(), NnError> {
        if let Some(bad) = net.grads().iter().position(|g| !g.is_finite()) {
            let layer = net.layer_of_param(bad).unwrap_or(0);
            return Err(NnError::NonFinite { layer, stage: "gradient" });
        }
        if self.velocity.len() != net.param_count() {
            self.velocity = vec![T::zero(); net.param_count()];
        }
        let mu = self.momentum;
        let (params, grads) = net.params_and_grads();
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}
