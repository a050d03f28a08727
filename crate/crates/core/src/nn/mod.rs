//! Minimal neural-network layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward call; a forward in [`Mode::Eval`] leaves caches untouched. A layer
//! must therefore not be run forward twice before its backward.

mod act;
mod attention;
mod blocks;
mod conv;
mod linear;
mod norm;
mod unet;

pub use act::Silu;
pub use attention::CrossAttention;
pub(crate) use attention::{from_tokens, to_tokens};
pub use blocks::{Downsample, ResBlock, TimeEmbedding, Upsample};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;
pub use unet::{UNet, UNetConfig};

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn caches(self) -> bool {
        self == Mode::Train
    }
}

/// A trainable parameter vector with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(n: usize) -> Self {
        Self { value: vec![T::zero(); n], grad: vec![T::zero(); n], frozen: false }
    }

    pub fn filled(n: usize, v: T) -> Self {
        Self { value: vec![v; n], grad: vec![T::zero(); n], frozen: false }
    }

    /// Uniform in `±scale / sqrt(fan_in)`.
    pub fn uniform<R: Rng>(n: usize, fan_in: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let value = (0..n).map(|_| T::from_f64(dist.sample(rng)).unwrap()).collect();
        Self { value, grad: vec![T::zero(); n], frozen: false }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters. Visiting order is stable and defines the
/// checkpoint layout.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |p| p.frozen = frozen);
    }

    fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }

    /// Flattened copy of all parameter values in visiting order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn load_flat_values(&mut self, values: &[T]) -> crate::Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(crate::error::invalid(format!(
                "parameter blob has {} values, model expects {expected}",
                values.len()
            )));
        }
        let mut off = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[off..off + n]);
            off += n;
        });
        Ok(())
    }
}

pub(crate) fn cache_get<'a, T>(c: &'a Option<T>, layer: &str) -> &'a T {
    c.as_ref().unwrap_or_else(|| panic!("{layer}: backward called without a training-mode forward"))
}
