use super::params::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated grads, then clears them.
    /// A parameter without a grad is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let grad = t.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}
