//! Neural-network building blocks: parameters, batch-norm state, the numeric
//! ops with their vector-Jacobian products, and small forward/backward blocks
//! composed from them.

pub mod blocks;
pub mod ops;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Forward-pass mode. Train mode uses batch statistics, updates running
/// statistics and caches activations for the backward pass; eval mode is
/// read-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Fan-in-scaled uniform init on [-sqrt(6/fan_in), sqrt(6/fan_in)].
    /// Values depend only on (seed, name), not on construction order, so
    /// structurally shared sub-modules initialize identically across model
    /// variants.
    pub fn uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, seed: u64) -> Self {
        let name = name.into();
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = seeded_rng(seed, &name);
        let value = Tensor::from_fn(shape, |_| {
            T::from_f64(rng.random::<f64>() * 2.0 * bound - bound)
        });
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn reset_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Deterministic per-name RNG: FNV-1a over (seed, name) expanded with
/// SplitMix64 into a 32-byte ChaCha seed. Stable across platforms and
/// compiler versions.
pub fn seeded_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut state = h;
    let mut next = || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&next().to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub name: String,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self::with_constants(name, channels, Self::DEFAULT_EPS, Self::DEFAULT_MOMENTUM)
    }

    pub fn with_constants(name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        assert!(eps > 0.0, "batch norm eps must be positive");
        assert!(
            momentum > 0.0 && momentum < 1.0,
            "batch norm momentum must be in (0,1)"
        );
        Self {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

/// Elementwise activation kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative slope (in (0,1)).
    LeakyRelu(f64),
}

impl Activation {
    pub fn leaky(slope: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "leaky relu slope must be in (0,1), got {slope}"
            )));
        }
        Ok(Activation::LeakyRelu(slope))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_grad_matches_value_shape() {
        let p = Parameter::<f32>::uniform("w", &[4, 3], 3, 0);
        assert_eq!(p.value.shape(), p.grad.shape());
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_init_is_deterministic_per_name() {
        let a = Parameter::<f64>::uniform("layer.w", &[8], 4, 7);
        let b = Parameter::<f64>::uniform("layer.w", &[8], 4, 7);
        let c = Parameter::<f64>::uniform("layer.v", &[8], 4, 7);
        assert_eq!(a.value, b.value);
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let fan_in = 27;
        let bound = (6.0f64 / fan_in as f64).sqrt();
        let p = Parameter::<f64>::uniform("w", &[1000], fan_in, 3);
        assert!(p.value.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate: spread should cover a good part of the range.
        let max = p.value.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > bound * 0.5);
    }

    #[test]
    fn leaky_slope_validated() {
        assert!(Activation::leaky(0.1).is_ok());
        assert!(Activation::leaky(0.0).is_err());
        assert!(Activation::leaky(1.0).is_err());
    }
}
