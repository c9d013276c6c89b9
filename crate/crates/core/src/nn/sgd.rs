use crate::scalar::Scalar;

use super::{Gradients, Network};

/// Stochastic gradient descent with classical momentum:
/// `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Gradients<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(net),
        }
    }

    pub fn velocity(&self) -> &Gradients<T> {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) {
        let m = T::of(self.momentum);
        let lr = T::of(self.learning_rate);
        for ((layer, vel), grad) in net
            .layers
            .iter_mut()
            .zip(self.velocity.layers.iter_mut())
            .zip(&grads.layers)
        {
            let (Some((w, b)), Some((vw, vb)), Some((gw, gb))) = (layer.params_mut(), vel.as_mut(), grad.as_ref())
            else {
                continue;
            };
            vw.zip_mut_with(gw, |v, &g| *v = m * *v + g);
            vb.zip_mut_with(gb, |v, &g| *v = m * *v + g);
            w.zip_mut_with(vw, |p, &v| *p -= lr * v);
            b.zip_mut_with(vb, |p, &v| *p -= lr * v);
        }
    }
}
