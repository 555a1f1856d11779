use super::graph::Grads;
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;

/// Adam with the standard moment coefficients and bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads.iter() {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let entry = store.entry_mut(id);
            let shape = entry.value.shape().to_vec();
            let (m, v) = entry
                .moment
                .get_or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = entry.value.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
