use super::{
    Conv2d, CrossAttention, Downsample, GroupNorm, Mode, Module, Param, ResBlock, Silu, TimeEmbedding,
    Upsample,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; level `i` runs at `resolution / 2^i`.
    pub channel_mult: Vec<usize>,
    /// Width of the timestep embedding, `None` for an unconditional network.
    pub time_dim: Option<usize>,
    /// Context width for cross-attention, `None` disables attention.
    pub ctx_dim: Option<usize>,
    /// Levels that get a cross-attention layer (the bottleneck always does when enabled).
    pub attn_levels: Vec<usize>,
}

impl UNetConfig {
    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    fn positions(&self, level: usize) -> usize {
        let r = self.resolution >> level;
        r * r
    }
}

/// U-shaped residual network with optional timestep conditioning and
/// cross-attention to a context sequence.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub time: Option<TimeEmbedding<T>>,
    pub conv_in: Conv2d<T>,
    pub down_res: Vec<ResBlock<T>>,
    pub down_attn: Vec<Option<CrossAttention<T>>>,
    pub downs: Vec<Downsample<T>>,
    pub mid1: ResBlock<T>,
    pub mid_attn: Option<CrossAttention<T>>,
    pub mid2: ResBlock<T>,
    pub up_res: Vec<ResBlock<T>>,
    pub up_attn: Vec<Option<CrossAttention<T>>>,
    pub ups: Vec<Option<Upsample<T>>>,
    pub norm_out: GroupNorm<T>,
    act_out: Silu<T>,
    pub conv_out: Conv2d<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Self {
        let levels = config.levels();
        assert!(levels >= 1);
        assert!(config.resolution.is_multiple_of(1 << (levels - 1)), "resolution not divisible by level count");
        let tdim = config.time_dim;
        let time = tdim.map(|d| TimeEmbedding::new(d.max(8), d, rng));
        let attn_at = |level: usize, rng: &mut R| -> Option<CrossAttention<T>> {
            match config.ctx_dim {
                Some(ctx) if config.attn_levels.contains(&level) => {
                    Some(CrossAttention::new(config.channels(level), ctx, config.positions(level), rng))
                }
                _ => None,
            }
        };
        let conv_in = Conv2d::new(config.in_channels, config.channels(0), 3, 1, rng);
        let mut down_res = Vec::new();
        let mut down_attn = Vec::new();
        let mut downs = Vec::new();
        let mut cur = config.channels(0);
        for level in 0..levels {
            let c = config.channels(level);
            down_res.push(ResBlock::new(cur, c, tdim, rng));
            down_attn.push(attn_at(level, rng));
            cur = c;
            if level + 1 < levels {
                downs.push(Downsample::new(c, c, rng));
            }
        }
        let deepest = levels - 1;
        let mid1 = ResBlock::new(cur, cur, tdim, rng);
        let mid_attn = config.ctx_dim.map(|ctx| CrossAttention::new(cur, ctx, config.positions(deepest), rng));
        let mid2 = ResBlock::new(cur, cur, tdim, rng);
        let mut up_res = Vec::with_capacity(levels);
        let mut up_attn = Vec::with_capacity(levels);
        let mut ups = Vec::with_capacity(levels);
        // Built deepest-first, stored by level index.
        let mut tmp = Vec::new();
        for level in (0..levels).rev() {
            let c = config.channels(level);
            let res = ResBlock::new(cur + c, c, tdim, rng);
            let attn = attn_at(level, rng);
            let up = (level > 0).then(|| Upsample::new(c, c, rng));
            tmp.push((res, attn, up));
            cur = c;
        }
        for (res, attn, up) in tmp.into_iter().rev() {
            up_res.push(res);
            up_attn.push(attn);
            ups.push(up);
        }
        let c0 = config.channels(0);
        Self {
            norm_out: GroupNorm::for_channels(c0),
            act_out: Silu::new(),
            conv_out: Conv2d::with_scale(c0, config.out_channels, 3, 1, 0.5, rng),
            config,
            time,
            conv_in,
            down_res,
            down_attn,
            downs,
            mid1,
            mid_attn,
            mid2,
            up_res,
            up_attn,
            ups,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, t: Option<&[f64]>, ctx: Option<&Tensor<T>>, mode: Mode) -> Tensor<T> {
        let levels = self.config.levels();
        let temb = match (self.time.as_mut(), t) {
            (Some(te), Some(t)) => Some(te.forward(t, mode)),
            (None, _) => None,
            (Some(_), None) => panic!("time-conditioned network called without timesteps"),
        };
        let temb = temb.as_ref();
        let need_ctx = |a: &Option<CrossAttention<T>>| a.is_some();
        let mut h = self.conv_in.forward(x, mode);
        let mut skips = Vec::with_capacity(levels);
        for level in 0..levels {
            h = self.down_res[level].forward(&h, temb, mode);
            if let Some(a) = self.down_attn[level].as_mut() {
                h = a.forward(&h, ctx.expect("context required"), mode);
            }
            skips.push(h.clone());
            if level + 1 < levels {
                h = self.downs[level].forward(&h, mode);
            }
        }
        h = self.mid1.forward(&h, temb, mode);
        if let Some(a) = self.mid_attn.as_mut() {
            h = a.forward(&h, ctx.expect("context required"), mode);
        }
        h = self.mid2.forward(&h, temb, mode);
        for level in (0..levels).rev() {
            h = Tensor::concat_channels(&h, &skips[level]);
            h = self.up_res[level].forward(&h, temb, mode);
            if need_ctx(&self.up_attn[level]) {
                h = self.up_attn[level].as_mut().unwrap().forward(&h, ctx.expect("context required"), mode);
            }
            if let Some(up) = self.ups[level].as_mut() {
                h = up.forward(&h, mode);
            }
        }
        let h = self.norm_out.forward(&h, mode);
        let h = self.act_out.forward(&h, mode);
        self.conv_out.forward(&h, mode)
    }

    /// Backpropagates `dy`; returns (d_input, d_context if attention is used).
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let levels = self.config.levels();
        let mut dctx: Option<Tensor<T>> = None;
        let mut dtemb: Option<Tensor<T>> = None;
        let acc = |slot: &mut Option<Tensor<T>>, g: Option<Tensor<T>>| {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        };
        let d = self.conv_out.backward(dy);
        let d = self.act_out.backward(&d);
        let mut dh = self.norm_out.backward(&d);
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; levels];
        for level in 0..levels {
            if let Some(up) = self.ups[level].as_mut() {
                dh = up.backward(&dh);
            }
            if let Some(a) = self.up_attn[level].as_mut() {
                let (g, gc) = a.backward(&dh);
                dh = g;
                acc(&mut dctx, Some(gc));
            }
            let (g, gt) = self.up_res[level].backward(&dh);
            acc(&mut dtemb, gt);
            let skip_c = self.config.channels(level);
            let (dprev, dskip) = g.split_channels(g.dims4().1 - skip_c);
            dh = dprev;
            dskips[level] = Some(dskip);
        }
        let (g, gt) = self.mid2.backward(&dh);
        acc(&mut dtemb, gt);
        dh = g;
        if let Some(a) = self.mid_attn.as_mut() {
            let (g, gc) = a.backward(&dh);
            dh = g;
            acc(&mut dctx, Some(gc));
        }
        let (g, gt) = self.mid1.backward(&dh);
        acc(&mut dtemb, gt);
        dh = g;
        for level in (0..levels).rev() {
            if level + 1 < levels {
                dh = self.downs[level].backward(&dh);
            }
            dh.add_assign(dskips[level].as_ref().unwrap());
            if let Some(a) = self.down_attn[level].as_mut() {
                let (g, gc) = a.backward(&dh);
                dh = g;
                acc(&mut dctx, Some(gc));
            }
            let (g, gt) = self.down_res[level].backward(&dh);
            acc(&mut dtemb, gt);
            dh = g;
        }
        let dx = self.conv_in.backward(&dh);
        if let (Some(te), Some(dt)) = (self.time.as_mut(), dtemb) {
            te.backward(&dt);
        }
        (dx, dctx)
    }
}

impl<T: Scalar> Module<T> for UNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(t) = &self.time {
            t.visit(f);
        }
        self.conv_in.visit(f);
        for (r, a) in self.down_res.iter().zip(&self.down_attn) {
            r.visit(f);
            if let Some(a) = a {
                a.visit(f);
            }
        }
        self.downs.iter().for_each(|d| d.visit(f));
        self.mid1.visit(f);
        if let Some(a) = &self.mid_attn {
            a.visit(f);
        }
        self.mid2.visit(f);
        for ((r, a), u) in self.up_res.iter().zip(&self.up_attn).zip(&self.ups) {
            r.visit(f);
            if let Some(a) = a {
                a.visit(f);
            }
            if let Some(u) = u {
                u.visit(f);
            }
        }
        self.norm_out.visit(f);
        self.conv_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(t) = &mut self.time {
            t.visit_mut(f);
        }
        self.conv_in.visit_mut(f);
        for (r, a) in self.down_res.iter_mut().zip(&mut self.down_attn) {
            r.visit_mut(f);
            if let Some(a) = a {
                a.visit_mut(f);
            }
        }
        self.downs.iter_mut().for_each(|d| d.visit_mut(f));
        self.mid1.visit_mut(f);
        if let Some(a) = &mut self.mid_attn {
            a.visit_mut(f);
        }
        self.mid2.visit_mut(f);
        for ((r, a), u) in self.up_res.iter_mut().zip(&mut self.up_attn).zip(&mut self.ups) {
            r.visit_mut(f);
            if let Some(a) = a {
                a.visit_mut(f);
            }
            if let Some(u) = u {
                u.visit_mut(f);
            }
        }
        self.norm_out.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 1,
            resolution: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            time_dim: Some(8),
            ctx_dim: Some(3),
            attn_levels: vec![1],
        }
    }

    fn objective(net: &mut UNet<f64>, x: &Tensor<f64>, ctx: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
        let y = net.forward(x, Some(&[3.0, 17.0]), Some(ctx), Mode::Eval);
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = UNet::<f64>::new(tiny(), &mut rng);
        let x = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let ctx = Tensor::randn(&[2, 5, 3], &mut rng);
        let y = net.forward(&x, Some(&[3.0, 17.0]), Some(&ctx), Mode::Train);
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        let g = Tensor::randn(y.shape(), &mut rng);
        let (dx, dctx) = net.backward(&g);
        let dctx = dctx.unwrap();
        let eps = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for idx in [0, 37, 100] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (objective(&mut net, &xp, &ctx, &g) - objective(&mut net, &xm, &ctx, &g)) / (2.0 * eps);
            assert!(rel(fd, dx.data()[idx]) < 1e-5, "dx {fd} vs {}", dx.data()[idx]);
        }
        for idx in [0, 7, 29] {
            let mut cp = ctx.clone();
            cp.data_mut()[idx] += eps;
            let mut cm = ctx.clone();
            cm.data_mut()[idx] -= eps;
            let fd = (objective(&mut net, &x, &cp, &g) - objective(&mut net, &x, &cm, &g)) / (2.0 * eps);
            assert!(rel(fd, dctx.data()[idx]) < 1e-5, "dctx {fd} vs {}", dctx.data()[idx]);
        }
        let mut grads = Vec::new();
        net.visit(&mut |p| grads.extend_from_slice(&p.grad));
        let mut values = net.flat_values();
        for idx in (0..values.len()).step_by(97) {
            let orig = values[idx];
            values[idx] = orig + eps;
            net.load_flat_values(&values).unwrap();
            let lp = objective(&mut net, &x, &ctx, &g);
            values[idx] = orig - eps;
            net.load_flat_values(&values).unwrap();
            let lm = objective(&mut net, &x, &ctx, &g);
            values[idx] = orig;
            net.load_flat_values(&values).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(rel(fd, grads[idx]) < 1e-5 || (fd - grads[idx]).abs() < 1e-8, "param {idx}: {fd} vs {}", grads[idx]);
        }
    }
}
