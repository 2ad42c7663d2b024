//! Adam and the fake-image replay buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NamedParam;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[NamedParam], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update. Parameters whose gradient is `None` are left untouched.
    pub fn update(&mut self, params: &mut [NamedParam], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps as f32);
            }
        }
        Ok(())
    }
}

/// Pool of earlier generator outputs shown to a discriminator.
///
/// Until full, every query is stored and returned unchanged. Afterwards each query
/// returns, with probability `swap_prob`, a random stored image (which the new one
/// replaces) and otherwise the query itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub swap_prob: f64,
    pub images: Vec<Tensor>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, swap_prob: f64) -> Self {
        Self {
            capacity,
            swap_prob,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn query<R: Rng + ?Sized>(&mut self, image: Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.gen::<f64>() < self.swap_prob {
            let i = rng.gen_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }

    /// Query every item of a `[B, C, H, W]` batch.
    pub fn query_batch<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let [b, ..] = batch.dims4()?;
        let items = (0..b)
            .map(|i| batch.batch_item(i).map(|t| self.query(t, rng)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&items)
    }
}
