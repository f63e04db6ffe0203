use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction, bound to the trainable layout of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<(ParamId, Vec<usize>)>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let slots: Vec<_> = store.trainable().map(|id| (id, store.get(id).shape().to_vec())).collect();
        let m = slots.iter().map(|(id, _)| vec![0.0; store.get(*id).numel()]).collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            step: 0,
            slots,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }

    /// Applies one update from the accumulated grads, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, shape) in &self.slots {
            let t = store.get(*id);
            if t.shape() != shape.as_slice() || !t.requires_grad() {
                return Err(TensorError::MissingGrad(store.name(*id).to_string()));
            }
        }
        if store.trainable().count() != self.slots.len() {
            return Err(TensorError::MissingGrad("trainable parameter count changed".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for (slot, (id, _)) in self.slots.iter().enumerate() {
            let (data, grad) = store.get_mut(*id).data_and_grad_mut();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (c.learning_rate as f64 * mhat / (vhat.sqrt() + c.epsilon as f64)) as f32;
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.get(w).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn layout_change_is_missing_grad() {
        let mut store = ParamStore::new();
        store.add_param("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.add_param("extra", Tensor::zeros(&[2]));
        assert!(matches!(adam.step(&mut store), Err(TensorError::MissingGrad(_))));
    }

    #[test]
    fn minimizes_shifted_square() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&store, w).unwrap();
            let three = tape.constant(&[1], vec![3.0]).unwrap();
            let d = tape.sub(x, three).unwrap();
            let l = tape.square(d).unwrap();
            let grads = tape.backward(l).unwrap();
            store.accumulate(&grads);
            adam.step(&mut store).unwrap();
        }
        let v = store.get(w).data()[0];
        assert!((v - 3.0).abs() < 1e-2, "{v}");
        assert_eq!(store.get(w).grad().unwrap(), &[0.0]);
    }
}
