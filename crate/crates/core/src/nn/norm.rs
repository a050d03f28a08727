use super::{cache_get, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Group normalization over (channels-in-group, H, W) with a per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub channels: usize,
    eps: T,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        Self {
            gamma: Param::filled(channels, T::one()),
            beta: Param::zeros(channels),
            groups,
            channels,
            eps: T::from_f64(1e-5).unwrap(),
            cache: None,
        }
    }

    /// Largest group count ≤ 8 dividing `channels`.
    pub fn for_channels(channels: usize) -> Self {
        let g = (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap();
        Self::new(g, channels)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = cg * h * w;
        let mf = T::from_usize(m).unwrap();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            for g in 0..self.groups {
                let off = (i * c + g * cg) * h * w;
                let src = &x.data()[off..off + m];
                let mut mean = T::zero();
                for &v in src {
                    mean += v;
                }
                mean /= mf;
                let mut var = T::zero();
                for &v in src {
                    var += (v - mean) * (v - mean);
                }
                var /= mf;
                let is = T::one() / (var + self.eps).sqrt();
                inv_std.push(is);
                for (d, &v) in xhat.data_mut()[off..off + m].iter_mut().zip(src) {
                    *d = (v - mean) * is;
                }
            }
        }
        let plane = h * w;
        let mut y = xhat.clone();
        for (idx, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * ga + be);
        }
        if mode.caches() {
            self.cache = Some(NormCache { xhat, inv_std });
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take();
        let NormCache { xhat, inv_std } = cache_get(&cache, "group_norm");
        let (n, c, h, w) = dy.dims4();
        let plane = h * w;
        let cg = c / self.groups;
        let m = cg * plane;
        let mf = T::from_usize(m).unwrap();
        if !self.gamma.frozen {
            for (idx, (dchunk, xchunk)) in dy.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
                let ch = idx % c;
                let mut gg = T::zero();
                let mut gb = T::zero();
                for (&d, &xh) in dchunk.iter().zip(xchunk) {
                    gg += d * xh;
                    gb += d;
                }
                self.gamma.grad[ch] += gg;
                self.beta.grad[ch] += gb;
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![T::zero(); m];
        for i in 0..n {
            for g in 0..self.groups {
                let off = (i * c + g * cg) * plane;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..m {
                    let ch = g * cg + j / plane;
                    let d = dy.data()[off + j] * self.gamma.value[ch];
                    dxhat[j] = d;
                    sum_d += d;
                    sum_dx += d * xhat.data()[off + j];
                }
                let is = inv_std[i * self.groups + g];
                for j in 0..m {
                    dx.data_mut()[off + j] =
                        is / mf * (mf * dxhat[j] - sum_d - xhat.data()[off + j] * sum_dx);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
