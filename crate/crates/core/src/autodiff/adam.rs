use crate::autodiff::{ParamId, ParamStore};

/// Adam optimizer state over a subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let zeros: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| vec![0.0; store.value(id).numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            ids,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self, slot: usize) -> (&[f64], &[f64]) {
        (&self.first_moment[slot], &self.second_moment[slot])
    }

    /// Overwrite the moments and counter, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        assert_eq!(first.len(), self.ids.len());
        assert_eq!(second.len(), self.ids.len());
        self.step = step;
        self.first_moment = first;
        self.second_moment = second;
    }

    /// One bias-corrected update of every tracked parameter from its gradient slot.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bc1;
        for (slot, &id) in self.ids.iter().enumerate() {
            let param = store.get_mut(id);
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            let grad = param.grad.data();
            let value = param.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + self.eps;
                value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// Scale the gradients of `ids` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let total: f64 = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / (total + 1e-6);
        for &id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(&store, vec![id]);
        for _ in 0..5 {
            adam.step(&mut store, 0.1);
        }
        assert_eq!(store.value(id).item(), 0.7);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(&store, vec![id]);
        adam.step(&mut store, 0.1);
        assert!((store.value(id).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn matches_scalar_reference_over_three_steps() {
        // Independent textbook form: m̂ / (sqrt(v̂) + eps).
        let grads = [0.3, -1.2, 0.05];
        let lr = 0.01;
        let (mut p_ref, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        let (mut store, id) = scalar_store(0.5);
        let mut adam = Adam::new(&store, vec![id]);
        for g in grads {
            store.get_mut(id).grad = Tensor::scalar(g);
            adam.step(&mut store, lr);
        }
        assert!((store.value(id).item() - p_ref).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2])).unwrap();
        store.get_mut(id).grad = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let before = clip_grad_norm(&mut store, &[id], 0.5);
        assert_eq!(before, 5.0);
        let g = store.grad(id).data();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 0.5).abs() < 1e-6);
    }
}
