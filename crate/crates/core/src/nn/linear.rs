use super::{cache_get, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};
use rand::Rng;

/// Affine map over the last axis; any leading axes are treated as rows.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_scale(in_dim, out_dim, 1.0, rng)
    }

    pub fn with_scale<R: Rng>(in_dim: usize, out_dim: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(in_dim * out_dim, in_dim, scale, rng),
            bias: Param::zeros(out_dim),
            in_dim,
            out_dim,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let shape = x.shape();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input {shape:?}");
        let rows = x.len() / self.in_dim;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim;
        let mut y = Tensor::zeros(&out_shape);
        let yd = y.data_mut();
        for r in 0..rows {
            yd[r * self.out_dim..(r + 1) * self.out_dim].copy_from_slice(&self.bias.value);
        }
        matmul(rows, self.in_dim, self.out_dim, x.data(), false, &self.weight.value, true, yd, true);
        if mode.caches() {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take();
        let x = cache_get(&x, "linear");
        let rows = x.len() / self.in_dim;
        if !self.weight.frozen {
            // dW[out, in] += dy^T x
            matmul(self.out_dim, rows, self.in_dim, dy.data(), true, x.data(), false, &mut self.weight.grad, true);
            for r in 0..rows {
                for (g, &d) in self.bias.grad.iter_mut().zip(&dy.data()[r * self.out_dim..(r + 1) * self.out_dim]) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(rows, self.out_dim, self.in_dim, dy.data(), false, &self.weight.value, false, dx.data_mut(), false);
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
