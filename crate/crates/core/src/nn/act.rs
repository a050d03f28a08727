use super::{cache_get, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// x * sigmoid(x).
#[derive(Clone, Debug, Default)]
pub struct Silu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Silu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode.caches() {
            self.input = Some(x.clone());
        }
        x.map(|v| v * sigmoid(v))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = cache_get(&self.input, "silu");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            let s = sigmoid(v);
            *d *= s * (T::one() + v * (T::one() - s));
        }
        self.input = None;
        dx
    }
}
