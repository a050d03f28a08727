use super::{Conv2d, GroupNorm, Linear, Mode, Module, Param, Silu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Sinusoidal timestep features followed by a two-layer MLP. The output is
/// already passed through SiLU so residual blocks can project it directly.
#[derive(Clone, Debug)]
pub struct TimeEmbedding<T> {
    pub freq_dim: usize,
    pub lin1: Linear<T>,
    act1: Silu<T>,
    pub lin2: Linear<T>,
    act2: Silu<T>,
}

impl<T: Scalar> TimeEmbedding<T> {
    pub fn new<R: Rng>(freq_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            freq_dim,
            lin1: Linear::new(freq_dim, dim, rng),
            act1: Silu::new(),
            lin2: Linear::new(dim, dim, rng),
            act2: Silu::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin2.out_dim
    }

    pub fn sinusoidal(&self, t: &[f64]) -> Tensor<T> {
        let half = self.freq_dim / 2;
        let mut out = Tensor::zeros(&[t.len(), self.freq_dim]);
        for (i, &tv) in t.iter().enumerate() {
            let row = out.item_mut(i);
            for j in 0..half {
                let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
                row[j] = T::from_f64((tv * freq).sin()).unwrap();
                row[j + half] = T::from_f64((tv * freq).cos()).unwrap();
            }
        }
        out
    }

    pub fn forward(&mut self, t: &[f64], mode: Mode) -> Tensor<T> {
        let f = self.sinusoidal(t);
        let h = self.lin1.forward(&f, mode);
        let h = self.act1.forward(&h, mode);
        let h = self.lin2.forward(&h, mode);
        self.act2.forward(&h, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) {
        let d = self.act2.backward(dy);
        let d = self.lin2.backward(&d);
        let d = self.act1.backward(&d);
        self.lin1.backward(&d);
    }
}

impl<T: Scalar> Module<T> for TimeEmbedding<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.lin1.visit(f);
        self.lin2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.lin1.visit_mut(f);
        self.lin2.visit_mut(f);
    }
}

/// Pre-activation residual block: GN-SiLU-Conv, optional timestep bias,
/// GN-SiLU-Conv, plus an identity or 1x1 shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub norm1: GroupNorm<T>,
    act1: Silu<T>,
    pub conv1: Conv2d<T>,
    pub time_proj: Option<Linear<T>>,
    pub norm2: GroupNorm<T>,
    act2: Silu<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, time_dim: Option<usize>, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::for_channels(cin),
            act1: Silu::new(),
            conv1: Conv2d::new(cin, cout, 3, 1, rng),
            time_proj: time_dim.map(|d| Linear::new(d, cout, rng)),
            norm2: GroupNorm::for_channels(cout),
            act2: Silu::new(),
            conv2: Conv2d::with_scale(cout, cout, 3, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, temb: Option<&Tensor<T>>, mode: Mode) -> Tensor<T> {
        let h = self.norm1.forward(x, mode);
        let h = self.act1.forward(&h, mode);
        let mut h = self.conv1.forward(&h, mode);
        if let Some(proj) = self.time_proj.as_mut() {
            let temb = temb.expect("time-conditioned block needs an embedding");
            let e = proj.forward(temb, mode);
            let (n, c, hh, ww) = h.dims4();
            let plane = hh * ww;
            for i in 0..n {
                let item = h.item_mut(i);
                for ch in 0..c {
                    let b = e.data()[i * c + ch];
                    item[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        let h = self.norm2.forward(&h, mode);
        let h = self.act2.forward(&h, mode);
        let mut h = self.conv2.forward(&h, mode);
        match self.skip.as_mut() {
            Some(s) => h.add_assign(&s.forward(x, mode)),
            None => h.add_assign(x),
        }
        h
    }

    /// Returns (dx, d_temb) where d_temb is present for time-conditioned blocks.
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let d = self.conv2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.norm2.backward(&d);
        let dtemb = self.time_proj.as_mut().map(|proj| {
            let (n, c, hh, ww) = d.dims4();
            let plane = hh * ww;
            let mut de = Tensor::zeros(&[n, c]);
            for i in 0..n {
                let item = d.item(i);
                for ch in 0..c {
                    let mut s = T::zero();
                    for &v in &item[ch * plane..(ch + 1) * plane] {
                        s += v;
                    }
                    de.data_mut()[i * c + ch] = s;
                }
            }
            proj.backward(&de)
        });
        let d = self.conv1.backward(&d);
        let d = self.act1.backward(&d);
        let mut dx = self.norm1.backward(&d);
        match self.skip.as_mut() {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        (dx, dtemb)
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        if let Some(p) = &self.time_proj {
            p.visit(f);
        }
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        if let Some(p) = &mut self.time_proj {
            p.visit_mut(f);
        }
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// Stride-2 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, 2, rng) }
    }
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.conv.forward(x, mode)
    }
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.conv.backward(dy)
    }
}

impl<T: Scalar> Module<T> for Downsample<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Upsample<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, 1, rng) }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let mut up = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for (dst, src) in up.data_mut().chunks_mut(4 * w).zip(x.data().chunks(w)) {
            for (j, &v) in src.iter().enumerate() {
                dst[2 * j] = v;
                dst[2 * j + 1] = v;
                dst[2 * w + 2 * j] = v;
                dst[2 * w + 2 * j + 1] = v;
            }
        }
        self.conv.forward(&up, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dup = self.conv.backward(dy);
        let (n, c, h2, w2) = dup.dims4();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for (src, dst) in dup.data().chunks(4 * w).zip(dx.data_mut().chunks_mut(w)) {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[2 * j] + src[2 * j + 1] + src[2 * w + 2 * j] + src[2 * w + 2 * j + 1];
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Upsample<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}
