use super::schedule::{q_sample_batch, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::nn::{from_tokens, to_tokens, Conv2d, Linear, Mode, Module, Param, Silu, UNet, UNetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Pixel range seen by the networks; images in [0, 1] map affinely onto it.
pub const PIXEL_LO: f64 = -1.0;
pub const PIXEL_HI: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub resolution: usize,
    /// Space-to-depth factor of the identity latent: the backbone runs on
    /// `f²` channels at `resolution / f`.
    pub latent_factor: usize,
    /// C_g, channels of the glyph condition.
    pub glyph_channels: usize,
    pub glyph_hidden: usize,
    /// Output scale of the glyph encoder's last layer at initialization.
    pub glyph_init_scale: f64,
    pub style_hidden: usize,
    /// Side of the style token grid, so N_s = style_grid².
    pub style_grid: usize,
    /// D_ctx, width of each style token.
    pub ctx_dim: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub attn_levels: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent_factor: 4,
            glyph_channels: 8,
            glyph_hidden: 32,
            glyph_init_scale: 1e-3,
            style_hidden: 32,
            style_grid: 8,
            ctx_dim: 128,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            attn_levels: vec![1, 2],
            time_dim: 64,
        }
    }
}

impl DiffusionConfig {
    pub fn latent_resolution(&self) -> usize {
        self.resolution / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_factor * self.latent_factor
    }

    pub fn num_style_tokens(&self) -> usize {
        self.style_grid * self.style_grid
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.latent_factor;
        if f == 0 || !self.resolution.is_multiple_of(f) {
            return Err(invalid(format!("resolution {} not divisible by latent factor {f}", self.resolution)));
        }
        let lr = self.latent_resolution();
        let levels = self.channel_mult.len();
        if levels == 0 || !lr.is_multiple_of(1 << (levels - 1)) {
            return Err(invalid(format!("latent resolution {lr} does not support {levels} levels")));
        }
        if self.style_grid == 0 || !lr.is_multiple_of(self.style_grid) || !(lr / self.style_grid).is_power_of_two() {
            return Err(invalid(format!("style grid {} must divide latent resolution {lr} by a power of two", self.style_grid)));
        }
        if self.attn_levels.iter().any(|&l| l >= levels) {
            return Err(invalid("attention level beyond the backbone depth"));
        }
        if self.glyph_channels == 0 || self.ctx_dim == 0 || self.base_channels == 0 || self.time_dim < 2 {
            return Err(invalid("zero-width component in diffusion config"));
        }
        Ok(())
    }

    fn backbone(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.latent_channels() + self.glyph_channels,
            out_channels: self.latent_channels(),
            resolution: self.latent_resolution(),
            base_channels: self.base_channels,
            channel_mult: self.channel_mult.clone(),
            time_dim: Some(self.time_dim),
            ctx_dim: Some(self.ctx_dim),
            attn_levels: self.attn_levels.clone(),
        }
    }
}

/// τ_g: (N, C_g, h, w) features at the diffusion state's latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphCondition<T> {
    pub features: Tensor<T>,
}

/// τ_s: (N, N_s, D_ctx) context sequence for cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCondition<T> {
    pub context: Tensor<T>,
}

/// E_g: convolutions on the space-to-depth glyph. The last layer starts
/// near zero so the backbone initially sees almost no glyph signal.
#[derive(Clone, Debug)]
pub struct GlyphEncoder<T> {
    factor: usize,
    pub conv1: Conv2d<T>,
    act1: Silu<T>,
    pub conv2: Conv2d<T>,
    act2: Silu<T>,
    pub conv_out: Conv2d<T>,
}

impl<T: Scalar> GlyphEncoder<T> {
    fn new<R: Rng>(cfg: &DiffusionConfig, rng: &mut R) -> Self {
        let h = cfg.glyph_hidden;
        Self {
            factor: cfg.latent_factor,
            conv1: Conv2d::new(cfg.latent_channels(), h, 3, 1, rng),
            act1: Silu::new(),
            conv2: Conv2d::new(h, h, 3, 1, rng),
            act2: Silu::new(),
            conv_out: Conv2d::with_scale(h, cfg.glyph_channels, 3, 1, cfg.glyph_init_scale, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv1.forward(&x.space_to_depth(self.factor), mode);
        let h = self.act1.forward(&h, mode);
        let h = self.conv2.forward(&h, mode);
        let h = self.act2.forward(&h, mode);
        self.conv_out.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) {
        let d = self.conv_out.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.act1.backward(&d);
        self.conv1.backward(&d);
    }
}

impl<T: Scalar> Module<T> for GlyphEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.conv_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

/// E_c followed by l: a strided convolutional embedding network whose
/// feature grid is read out as patch tokens, projected to D_ctx and tagged
/// with a learned token position.
#[derive(Clone, Debug)]
pub struct StyleEncoder<T> {
    factor: usize,
    grid: usize,
    pub conv_in: Conv2d<T>,
    act_in: Silu<T>,
    pub downs: Vec<Conv2d<T>>,
    down_acts: Vec<Silu<T>>,
    pub conv_mid: Conv2d<T>,
    pub proj: Linear<T>,
    pub pos: Param<T>,
}

impl<T: Scalar> StyleEncoder<T> {
    fn new<R: Rng>(cfg: &DiffusionConfig, rng: &mut R) -> Self {
        let h = cfg.style_hidden;
        let n_down = (cfg.latent_resolution() / cfg.style_grid).trailing_zeros() as usize;
        Self {
            factor: cfg.latent_factor,
            grid: cfg.style_grid,
            conv_in: Conv2d::new(cfg.latent_channels(), h, 3, 1, rng),
            act_in: Silu::new(),
            downs: (0..n_down).map(|_| Conv2d::new(h, h, 3, 2, rng)).collect(),
            down_acts: (0..n_down).map(|_| Silu::new()).collect(),
            conv_mid: Conv2d::new(h, h, 3, 1, rng),
            proj: Linear::new(h, cfg.ctx_dim, rng),
            pos: Param::uniform(cfg.num_style_tokens() * cfg.ctx_dim, 1, 0.5, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv_in.forward(&x.space_to_depth(self.factor), mode);
        let mut h = self.act_in.forward(&h, mode);
        for (conv, act) in self.downs.iter_mut().zip(&mut self.down_acts) {
            h = act.forward(&conv.forward(&h, mode), mode);
        }
        let h = self.conv_mid.forward(&h, mode);
        let mut ctx = self.proj.forward(&to_tokens(&h), mode);
        for i in 0..ctx.shape()[0] {
            for (c, &p) in ctx.item_mut(i).iter_mut().zip(&self.pos.value) {
                *c += p;
            }
        }
        ctx
    }

    fn backward(&mut self, dctx: &Tensor<T>) {
        if !self.pos.frozen {
            for i in 0..dctx.shape()[0] {
                for (g, &d) in self.pos.grad.iter_mut().zip(dctx.item(i)) {
                    *g += d;
                }
            }
        }
        let d = self.proj.backward(dctx);
        let mut d = self.conv_mid.backward(&from_tokens(&d, self.grid, self.grid));
        for (conv, act) in self.downs.iter_mut().zip(&mut self.down_acts).rev() {
            d = conv.backward(&act.backward(&d));
        }
        let d = self.act_in.backward(&d);
        self.conv_in.backward(&d);
    }
}

impl<T: Scalar> Module<T> for StyleEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv_in.visit(f);
        self.downs.iter().for_each(|c| c.visit(f));
        self.conv_mid.visit(f);
        self.proj.visit(f);
        f(&self.pos);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv_in.visit_mut(f);
        self.downs.iter_mut().for_each(|c| c.visit_mut(f));
        self.conv_mid.visit_mut(f);
        self.proj.visit_mut(f);
        f(&mut self.pos);
    }
}

/// ε_θ: backbone plus glyph and style encoders, trained jointly.
#[derive(Clone, Debug)]
pub struct ConditionedDenoiser<T> {
    pub config: DiffusionConfig,
    pub glyph_encoder: GlyphEncoder<T>,
    pub style_encoder: StyleEncoder<T>,
    pub backbone: UNet<T>,
}

impl<T: Scalar> ConditionedDenoiser<T> {
    pub fn new<R: Rng>(config: DiffusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            glyph_encoder: GlyphEncoder::new(&config, rng),
            style_encoder: StyleEncoder::new(&config, rng),
            backbone: UNet::new(config.backbone(), rng),
            config,
        })
    }

    fn check_pixels(&self, x: &Tensor<T>, what: &str) -> Result<usize> {
        let r = self.config.resolution;
        match x.shape() {
            [n, 1, h, w] if *h == r && *w == r => Ok(*n),
            s => Err(invalid(format!("{what} has shape {s:?}, expected (N, 1, {r}, {r})"))),
        }
    }

    /// `x_g` is an (N, 1, H, W) batch in the network pixel range.
    pub fn glyph_encode(&mut self, x_g: &Tensor<T>, mode: Mode) -> Result<GlyphCondition<T>> {
        self.check_pixels(x_g, "glyph batch")?;
        Ok(GlyphCondition { features: self.glyph_encoder.forward(x_g, mode) })
    }

    pub fn style_encode(&mut self, x_s: &Tensor<T>, mode: Mode) -> Result<StyleCondition<T>> {
        self.check_pixels(x_s, "style batch")?;
        Ok(StyleCondition { context: self.style_encoder.forward(x_s, mode) })
    }

    pub fn glyph_encode_image(&mut self, x_g: &GrayImage) -> Result<GlyphCondition<T>> {
        x_g.check_resolution(self.config.resolution)?;
        self.glyph_encode(&x_g.to_tensor(PIXEL_LO, PIXEL_HI), Mode::Eval)
    }

    pub fn style_encode_image(&mut self, x_s_masked: &GrayImage) -> Result<StyleCondition<T>> {
        x_s_masked.check_resolution(self.config.resolution)?;
        self.style_encode(&x_s_masked.to_tensor(PIXEL_LO, PIXEL_HI), Mode::Eval)
    }

    /// ε_θ(x_t, t, τ_g, τ_s) for an (N, 1, H, W) state; output has the same shape.
    pub fn predict_noise(
        &mut self,
        x_t: &Tensor<T>,
        t: &[usize],
        tau_g: &GlyphCondition<T>,
        tau_s: &StyleCondition<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let n = self.check_pixels(x_t, "diffusion state")?;
        let lr = self.config.latent_resolution();
        let cg = self.config.glyph_channels;
        if t.len() != n {
            return Err(invalid(format!("{} timesteps for a batch of {n}", t.len())));
        }
        if tau_g.features.shape() != [n, cg, lr, lr] {
            return Err(invalid(format!("glyph condition shape {:?}, expected [{n}, {cg}, {lr}, {lr}]", tau_g.features.shape())));
        }
        let (ns, dc) = (self.config.num_style_tokens(), self.config.ctx_dim);
        if tau_s.context.shape() != [n, ns, dc] {
            return Err(invalid(format!("style condition shape {:?}, expected [{n}, {ns}, {dc}]", tau_s.context.shape())));
        }
        let latent = x_t.space_to_depth(self.config.latent_factor);
        let input = Tensor::concat_channels(&latent, &tau_g.features);
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let out = self.backbone.forward(&input, Some(&tf), Some(&tau_s.context), mode);
        Ok(out.depth_to_space(self.config.latent_factor))
    }

    /// Training-mode loss of one batch; gradients are accumulated into the
    /// parameters. Returns the mean squared error.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_backward(
        &mut self,
        x0: &Tensor<T>,
        x_g: &Tensor<T>,
        x_s: &Tensor<T>,
        t: &[usize],
        eps: &Tensor<T>,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let x_t = q_sample_batch(x0, t, eps, sched)?;
        let glyph_trainable = !all_frozen(&self.glyph_encoder);
        let style_trainable = !all_frozen(&self.style_encoder);
        let gmode = if glyph_trainable { Mode::Train } else { Mode::Eval };
        let smode = if style_trainable { Mode::Train } else { Mode::Eval };
        let tau_g = self.glyph_encode(x_g, gmode)?;
        let tau_s = self.style_encode(x_s, smode)?;
        let pred = self.predict_noise(&x_t, t, &tau_g, &tau_s, Mode::Train)?;
        let count = pred.len() as f64;
        let mut loss = 0.0;
        let two_over_n = T::from_f64(2.0 / count).unwrap();
        let mut dpred = pred.clone();
        for (d, &e) in dpred.data_mut().iter_mut().zip(eps.data()) {
            let diff = *d - e;
            loss += diff.to_f64().unwrap().powi(2);
            *d = diff * two_over_n;
        }
        let dlat = dpred.space_to_depth(self.config.latent_factor);
        let (dinput, dctx) = self.backbone.backward(&dlat);
        if glyph_trainable {
            let (_, dg) = dinput.split_channels(self.config.latent_channels());
            self.glyph_encoder.backward(&dg);
        }
        if style_trainable {
            self.style_encoder.backward(&dctx.expect("backbone uses cross-attention"));
        }
        Ok(loss / count)
    }
}

fn all_frozen<T: Scalar, M: Module<T>>(m: &M) -> bool {
    let mut frozen = true;
    m.visit(&mut |p| frozen &= p.frozen);
    frozen
}

impl<T: Scalar> Module<T> for ConditionedDenoiser<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.glyph_encoder.visit(f);
        self.style_encoder.visit(f);
        self.backbone.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.glyph_encoder.visit_mut(f);
        self.style_encoder.visit_mut(f);
        self.backbone.visit_mut(f);
    }
}

/// Anything that predicts the injected noise from (x_t, t, x_g, x_s).
pub trait NoisePredictor<T: Scalar> {
    fn predict(&mut self, x_t: &Tensor<T>, t: &[usize], x_g: &Tensor<T>, x_s: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for ConditionedDenoiser<T> {
    fn predict(&mut self, x_t: &Tensor<T>, t: &[usize], x_g: &Tensor<T>, x_s: &Tensor<T>) -> Result<Tensor<T>> {
        let tau_g = self.glyph_encode(x_g, Mode::Eval)?;
        let tau_s = self.style_encode(x_s, Mode::Eval)?;
        self.predict_noise(x_t, t, &tau_g, &tau_s, Mode::Eval)
    }
}

/// The simple objective: mean of ‖ε − ε_θ(q_sample(x0, t, ε), t, x_g, x_s)‖².
pub fn training_loss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &mut P,
    x0: &Tensor<T>,
    x_g: &Tensor<T>,
    x_s: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample_batch(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t, x_g, x_s)?;
    if pred.shape() != eps.shape() {
        return Err(invalid(format!("prediction {:?} vs noise {:?}", pred.shape(), eps.shape())));
    }
    let sum: f64 = pred.data().iter().zip(eps.data()).map(|(&p, &e)| (p - e).to_f64().unwrap().powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> DiffusionConfig {
        DiffusionConfig {
            resolution: 8,
            latent_factor: 2,
            glyph_channels: 2,
            glyph_hidden: 4,
            glyph_init_scale: 1.0,
            style_hidden: 4,
            style_grid: 2,
            ctx_dim: 4,
            base_channels: 4,
            channel_mult: vec![1, 2],
            attn_levels: vec![1],
            time_dim: 8,
        }
    }

    struct Stub(Option<Tensor<f64>>);

    impl NoisePredictor<f64> for Stub {
        fn predict(&mut self, x_t: &Tensor<f64>, _: &[usize], _: &Tensor<f64>, _: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(self.0.clone().unwrap_or_else(|| Tensor::zeros(x_t.shape())))
        }
    }

    #[test]
    fn stub_predictors_give_reference_losses() {
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::randn(&[4, 1, 50, 50], &mut rng);
        let eps = Tensor::<f64>::randn(x0.shape(), &mut rng);
        let t = [1, 10, 500, 1000];
        let exact = training_loss(&mut Stub(Some(eps.clone())), &x0, &x0, &x0, &t, &eps, &sched).unwrap();
        assert_eq!(exact, 0.0);
        let zero = training_loss(&mut Stub(None), &x0, &x0, &x0, &t, &eps, &sched).unwrap();
        assert!((zero - 1.0).abs() < 0.05, "{zero}");
    }

    #[test]
    fn shapes_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ConditionedDenoiser::<f32>::new(DiffusionConfig::default(), &mut rng).unwrap();
        let g = GrayImage::filled(64, 64, 0.0).unwrap();
        let tg = m.glyph_encode_image(&g).unwrap();
        assert_eq!(tg.features.shape(), &[1, 8, 16, 16]);
        let ts = m.style_encode_image(&g).unwrap();
        assert_eq!(ts.context.shape(), &[1, 64, 128]);
        let x = Tensor::randn(&[1, 1, 64, 64], &mut rng);
        let y = m.predict_noise(&x, &[500], &tg, &ts, Mode::Eval).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        let small = GrayImage::filled(32, 32, 0.0).unwrap();
        assert!(m.glyph_encode_image(&small).is_err());
        assert!(m.style_encode_image(&small).is_err());
        assert!(m.predict_noise(&x, &[1, 2], &tg, &ts, Mode::Eval).is_err());
        let bad = DiffusionConfig { style_grid: 3, ..DiffusionConfig::default() };
        assert!(ConditionedDenoiser::<f32>::new(bad, &mut rng).is_err());
    }

    #[test]
    fn glyph_encoder_is_deterministic_and_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ConditionedDenoiser::<f32>::new(DiffusionConfig::default(), &mut rng).unwrap();
        let g = crate::datapipe::synth_glyph(0, 7, 64).unwrap();
        let a = m.glyph_encode_image(&g).unwrap();
        assert_eq!(a, m.glyph_encode_image(&g).unwrap());
        let mut px = g.pixels().to_vec();
        px[32 * 64 + 5] = 1.0 - px[32 * 64 + 5];
        let b = m.glyph_encode_image(&GrayImage::new(64, 64, px).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn timestep_changes_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ConditionedDenoiser::<f32>::new(DiffusionConfig::default(), &mut rng).unwrap();
        let g = crate::datapipe::synth_glyph(1, 3, 64).unwrap();
        let tg = m.glyph_encode_image(&g).unwrap();
        let ts = m.style_encode_image(&g).unwrap();
        let x = Tensor::randn(&[1, 1, 64, 64], &mut rng);
        let a = m.predict_noise(&x, &[10], &tg, &ts, Mode::Eval).unwrap();
        let b = m.predict_noise(&x, &[900], &tg, &ts, Mode::Eval).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = ConditionedDenoiser::<f64>::new(cfg, &mut rng).unwrap();
        assert!(m.num_params() <= 10_000, "{}", m.num_params());
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let xg = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let xs = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let eps = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let t = [40, 700];
        let loss = m.loss_and_backward(&x0, &xg, &xs, &t, &eps, &sched).unwrap();
        let reference = training_loss(&mut m, &x0, &xg, &xs, &t, &eps, &sched).unwrap();
        assert!((loss - reference).abs() < 1e-12);
        let mut grads = Vec::new();
        m.visit(&mut |p| grads.extend_from_slice(&p.grad));
        let mut values = m.flat_values();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in (0..values.len()).step_by(7) {
            let orig = values[idx];
            values[idx] = orig + h;
            m.load_flat_values(&values).unwrap();
            let lp = training_loss(&mut m, &x0, &xg, &xs, &t, &eps, &sched).unwrap();
            values[idx] = orig - h;
            m.load_flat_values(&values).unwrap();
            let lm = training_loss(&mut m, &x0, &xg, &xs, &t, &eps, &sched).unwrap();
            values[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[idx];
            if fd.abs().max(g.abs()) > 1e-7 {
                worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()));
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
