use super::{cache_get, GroupNorm, Linear, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};
use rand::Rng;

/// (N, C, H, W) -> (N, H*W, C)
pub(crate) fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let p = h * w;
    let mut out = Tensor::zeros(&[n, p, c]);
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for j in 0..p {
                dst[j * c + ch] = src[ch * p + j];
            }
        }
    }
    out
}

/// (N, H*W, C) -> (N, C, H, W)
pub(crate) fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, p, c) = x.dims3();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for j in 0..p {
            for ch in 0..c {
                dst[ch * p + j] = src[j * c + ch];
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct AttnCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Tensor<T>,
    hw: (usize, usize),
}

/// Single-head cross-attention from spatial features to a context sequence,
/// added residually. Queries carry a learned positional embedding so that
/// attention can be location dependent.
#[derive(Clone, Debug)]
pub struct CrossAttention<T> {
    pub norm: GroupNorm<T>,
    pub pos: Param<T>,
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
    pub channels: usize,
    pub head_dim: usize,
    pub positions: usize,
    cache: Option<AttnCache<T>>,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new<R: Rng>(channels: usize, ctx_dim: usize, positions: usize, rng: &mut R) -> Self {
        let head_dim = channels;
        Self {
            norm: GroupNorm::for_channels(channels),
            pos: Param::uniform(positions * channels, 1, 0.5, rng),
            to_q: Linear::new(channels, head_dim, rng),
            to_k: Linear::new(ctx_dim, head_dim, rng),
            to_v: Linear::new(ctx_dim, head_dim, rng),
            to_out: Linear::with_scale(head_dim, channels, 0.5, rng),
            channels,
            head_dim,
            positions,
            cache: None,
        }
    }

    pub fn forward(&mut self, h: &Tensor<T>, ctx: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, hh, ww) = h.dims4();
        let p = hh * ww;
        assert_eq!(c, self.channels);
        assert_eq!(p, self.positions, "attention built for {} positions, got {p}", self.positions);
        let (nc, s, _) = ctx.dims3();
        assert_eq!(nc, n);
        let normed = self.norm.forward(h, mode);
        let mut x = to_tokens(&normed);
        for i in 0..n {
            for (xv, &pv) in x.item_mut(i).iter_mut().zip(&self.pos.value) {
                *xv += pv;
            }
        }
        let q = self.to_q.forward(&x, mode);
        let k = self.to_k.forward(ctx, mode);
        let v = self.to_v.forward(ctx, mode);
        let d = self.head_dim;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut attn = Tensor::zeros(&[n, p, s]);
        let mut o = Tensor::zeros(&[n, p, d]);
        for i in 0..n {
            let a = attn.item_mut(i);
            matmul(p, d, s, q.item(i), false, k.item(i), true, a, false);
            for row in a.chunks_mut(s) {
                let mut mx = T::neg_infinity();
                for v in row.iter_mut() {
                    *v *= scale;
                    mx = mx.max(*v);
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            matmul(p, s, d, attn.item(i), false, v.item(i), false, o.item_mut(i), false);
        }
        let out = self.to_out.forward(&o, mode);
        let mut y = from_tokens(&out, hh, ww);
        y.add_assign(h);
        if mode.caches() {
            self.cache = Some(AttnCache { q, k, v, attn, hw: (hh, ww) });
        }
        y
    }

    /// Returns (gradient w.r.t. spatial input, gradient w.r.t. context).
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let cache = self.cache.take();
        let AttnCache { q, k, v, attn, hw } = cache_get(&cache, "cross_attention");
        let (n, p, s) = attn.dims3();
        let d = self.head_dim;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let dout = to_tokens(dy);
        let d_o = self.to_out.backward(&dout);
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut da = vec![T::zero(); p * s];
        for i in 0..n {
            let a = attn.item(i);
            matmul(p, d, s, d_o.item(i), false, v.item(i), true, &mut da, false);
            matmul(s, p, d, a, true, d_o.item(i), false, dv.item_mut(i), false);
            for (drow, arow) in da.chunks_mut(s).zip(a.chunks(s)) {
                let mut dot = T::zero();
                for (&dd, &aa) in drow.iter().zip(arow) {
                    dot += dd * aa;
                }
                for (dd, &aa) in drow.iter_mut().zip(arow) {
                    *dd = aa * (*dd - dot) * scale;
                }
            }
            matmul(p, s, d, &da, false, k.item(i), false, dq.item_mut(i), false);
            matmul(s, p, d, &da, true, q.item(i), false, dk.item_mut(i), false);
        }
        let dx = self.to_q.backward(&dq);
        if !self.pos.frozen {
            for i in 0..n {
                for (g, &dv) in self.pos.grad.iter_mut().zip(dx.item(i)) {
                    *g += dv;
                }
            }
        }
        let dnormed = from_tokens(&dx, hw.0, hw.1);
        let mut dh = self.norm.backward(&dnormed);
        dh.add_assign(dy);
        let mut dctx = self.to_k.backward(&dk);
        dctx.add_assign(&self.to_v.backward(&dv));
        (dh, dctx)
    }
}

impl<T: Scalar> Module<T> for CrossAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm.visit(f);
        f(&self.pos);
        self.to_q.visit(f);
        self.to_k.visit(f);
        self.to_v.visit(f);
        self.to_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm.visit_mut(f);
        f(&mut self.pos);
        self.to_q.visit_mut(f);
        self.to_k.visit_mut(f);
        self.to_v.visit_mut(f);
        self.to_out.visit_mut(f);
    }
}
