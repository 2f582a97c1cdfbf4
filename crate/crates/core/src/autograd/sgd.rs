use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * w; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f64> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", config.momentum)));
        }
        if !(config.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} is negative", config.weight_decay)));
        }
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    /// Applies one update to every learnable parameter and zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let (m, wd, lr) = (T::of(self.config.momentum), T::of(self.config.weight_decay), T::of(lr));
        self.velocity.resize(store.len(), None);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Learnable).map(|(id, _)| id).collect();
        for id in ids {
            let grad = store.grad(id).clone();
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let w = store.value_mut(id);
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(grad.data()).zip(w.data_mut()) {
                *vi = m * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        store.zero_grads();
        Ok(())
    }

    /// Velocity buffers as `(parameter name, tensor)` records for checkpointing.
    pub fn records(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
        self.velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|v| (i, v)))
            .map(|(i, v)| {
                let (_, p) = store.iter().nth(i).expect("velocity index within store");
                (p.name.clone(), v.cast())
            })
            .collect()
    }

    pub fn load_records(&mut self, store: &ParamStore<T>, records: &[(String, Tensor<f64>)]) -> Result<()> {
        self.velocity = vec![None; store.len()];
        for (name, t) in records {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Validation(format!("optimizer state for unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Validation(format!("optimizer state for {name} has wrong shape")));
            }
            self.velocity[id.index()] = Some(t.cast());
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base * factor^k` after `k` milestones have passed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl StepDecay {
    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}
