use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Adam over the trainable tensors of a store. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Applies one update from the gradients stored on each parameter.
    /// Frozen tensors and tensors without a gradient are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        if self.moments.len() != store.len() {
            self.moments = store.iter().map(|(_, p)| (vec![0.0; p.value.len()], vec![0.0; p.value.len()])).collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (p, (m, v)) in store.iter_mut().zip(&mut self.moments) {
            let Some(grad) = p.grad.as_ref().filter(|_| !p.frozen) else { continue };
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - update);
            }
        }
    }
}
