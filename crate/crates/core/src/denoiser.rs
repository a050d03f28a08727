//! Supervised noisy-style → clean-glyph baseline used as a recognition
//! preprocessing step.

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::{Mode, Module, Param, UNet, UNetConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub resolution: usize,
    /// Space-to-depth factor applied before the encoder-decoder.
    pub latent_factor: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { resolution: 64, latent_factor: 2, base_channels: 16, channel_mult: vec![1, 2, 2] }
    }
}

/// Encoder-decoder with skip connections; the output passes through a
/// sigmoid so it lies in [0, 1].
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub config: DenoiserConfig,
    pub net: UNet<T>,
    out: Option<Tensor<T>>,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new<R: rand::Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let f = config.latent_factor;
        let levels = config.channel_mult.len();
        if f == 0 || !config.resolution.is_multiple_of(f) || levels == 0 || !(config.resolution / f).is_multiple_of(1 << (levels - 1)) {
            return Err(invalid(format!("denoiser resolution {} incompatible with its factor and depth", config.resolution)));
        }
        let net = UNet::new(
            UNetConfig {
                in_channels: f * f,
                out_channels: f * f,
                resolution: config.resolution / f,
                base_channels: config.base_channels,
                channel_mult: config.channel_mult.clone(),
                time_dim: None,
                ctx_dim: None,
                attn_levels: vec![],
            },
            rng,
        );
        Ok(Self { config, net, out: None })
    }

    /// Maps an (N, 1, H, W) batch in [0, 1] to its denoised version.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let f = self.config.latent_factor;
        let y = self.net.forward(&x.space_to_depth(f), None, None, mode);
        let y = y.map(|v| T::one() / (T::one() + (-v).exp()));
        if mode.caches() {
            self.out = Some(y.clone());
        }
        y.depth_to_space(f)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) {
        let y = self.out.take().expect("denoiser backward without training forward");
        let mut d = dy.space_to_depth(self.config.latent_factor);
        for (g, &s) in d.data_mut().iter_mut().zip(y.data()) {
            *g *= s * (T::one() - s);
        }
        self.net.backward(&d);
    }
}

impl<T: Scalar> Module<T> for DenoiserModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.net.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 8, seed: 0, optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSidecar {
    pub kind: String,
    pub step: u64,
    pub config: DenoiserConfig,
    pub seed: u64,
    pub loss_ema: f64,
}

pub struct DenoiserRun<T> {
    pub model: DenoiserModel<T>,
    pub step: u64,
    pub loss_history: Vec<f64>,
    pub loss_ema: f64,
    pub seed: u64,
}

impl<T: Scalar> DenoiserRun<T> {
    pub fn sidecar(&self) -> DenoiserSidecar {
        DenoiserSidecar {
            kind: DENOISER_KIND.into(),
            step: self.step,
            config: self.model.config.clone(),
            seed: self.seed,
            loss_ema: self.loss_ema,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.model, &self.sidecar(), path)
    }
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<(DenoiserModel<T>, DenoiserSidecar)> {
    let sidecar: DenoiserSidecar = checkpoint::read_sidecar(path)?;
    checkpoint::expect_kind(&sidecar.kind, DENOISER_KIND)?;
    let mut model = DenoiserModel::new(sidecar.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::decode_params(&mut model, &checkpoint::read_blob(path)?)?;
    Ok((model, sidecar))
}

/// Minimizes the mean absolute error between model(style) and glyph over
/// (style, glyph) pairs with seeded per-epoch shuffles.
pub fn train_denoiser<T: Scalar>(
    config: DenoiserConfig,
    pairs: &[(&GrayImage, &GrayImage)],
    train: &DenoiserTrainConfig,
    mut on_epoch: impl FnMut(usize, &DenoiserRun<T>),
) -> Result<DenoiserRun<T>> {
    if pairs.is_empty() {
        return Err(invalid("denoiser training split is empty"));
    }
    for (s, g) in pairs {
        s.check_resolution(config.resolution)?;
        g.check_resolution(config.resolution)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let model = DenoiserModel::new(config, &mut rng)?;
    let mut run = DenoiserRun { model, step: 0, loss_history: Vec::new(), loss_ema: f64::NAN, seed: train.seed };
    let mut opt = AdamW::new(train.optimizer.clone());
    let bs = train.batch_size.max(1);
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let styles: Vec<&GrayImage> = chunk.iter().map(|&i| pairs[i].0).collect();
            let glyphs: Vec<&GrayImage> = chunk.iter().map(|&i| pairs[i].1).collect();
            let x = GrayImage::batch::<T>(&styles, 0.0, 1.0);
            let target = GrayImage::batch::<T>(&glyphs, 0.0, 1.0);
            let y = run.model.forward(&x, Mode::Train);
            let n = y.len() as f64;
            let inv = T::from_f64(1.0 / n).unwrap();
            let mut loss = 0.0;
            let mut dy = y.clone();
            for (d, &t) in dy.data_mut().iter_mut().zip(target.data()) {
                let diff = *d - t;
                loss += diff.abs().to_f64().unwrap();
                *d = if diff > T::zero() { inv } else if diff < T::zero() { -inv } else { T::zero() };
            }
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::ModelState("denoiser loss diverged".into()));
            }
            run.model.backward(&dy);
            opt.step(&mut run.model);
            run.step += 1;
            run.loss_history.push(loss);
            run.loss_ema = if run.loss_ema.is_nan() { loss } else { 0.98 * run.loss_ema + 0.02 * loss };
        }
        on_epoch(epoch + 1, &run);
    }
    Ok(run)
}

pub fn denoise_batch<T: Scalar>(model: &mut DenoiserModel<T>, images: &[&GrayImage]) -> Result<Vec<GrayImage>> {
    for im in images {
        im.check_resolution(model.config.resolution)?;
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let y = model.forward(&GrayImage::batch(chunk, 0.0, 1.0), Mode::Eval);
        for i in 0..chunk.len() {
            out.push(GrayImage::from_tensor(&y, i, 0.0, 1.0)?);
        }
    }
    Ok(out)
}

pub fn denoise<T: Scalar>(model: &mut DenoiserModel<T>, img: &GrayImage) -> Result<GrayImage> {
    Ok(denoise_batch(model, &[img])?.remove(0))
}

/// Mean L1 between model(style) and glyph.
pub fn validation_l1<T: Scalar>(model: &mut DenoiserModel<T>, pairs: &[(&GrayImage, &GrayImage)]) -> Result<f64> {
    let styles: Vec<&GrayImage> = pairs.iter().map(|p| p.0).collect();
    let out = denoise_batch(model, &styles)?;
    Ok(mean_l1(out.iter().zip(pairs.iter().map(|p| p.1))))
}

/// Mean L1 of the identity mapping style → glyph.
pub fn identity_l1(pairs: &[(&GrayImage, &GrayImage)]) -> f64 {
    mean_l1(pairs.iter().map(|(s, g)| (*s, *g)))
}

fn mean_l1<'a>(it: impl Iterator<Item = (&'a GrayImage, &'a GrayImage)>) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for (a, b) in it {
        total += a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
        n += a.pixels().len();
    }
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_glyph, synth_noise, NoiseType};

    fn pairs() -> (Vec<GrayImage>, Vec<GrayImage>) {
        let g: Vec<GrayImage> = (0..4).map(|i| synth_glyph(i, i as u64, 32).unwrap()).collect();
        let s = g.iter().enumerate().map(|(i, g)| synth_noise(g, NoiseType::ALL[i], 1).unwrap()).collect();
        (s, g)
    }

    fn cfg() -> DenoiserConfig {
        DenoiserConfig { resolution: 32, latent_factor: 2, base_channels: 4, channel_mult: vec![1, 2] }
    }

    #[test]
    fn seeded_training_repeats_and_outputs_stay_in_range() {
        let (s, g) = pairs();
        let p: Vec<(&GrayImage, &GrayImage)> = s.iter().zip(&g).collect();
        let tc = DenoiserTrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let mut a = train_denoiser::<f32>(cfg(), &p, &tc, |_, _| {}).unwrap();
        let mut b = train_denoiser::<f32>(cfg(), &p, &tc, |_, _| {}).unwrap();
        assert_eq!(validation_l1(&mut a.model, &p).unwrap(), validation_l1(&mut b.model, &p).unwrap());
        let out = denoise(&mut a.model, &s[0]).unwrap();
        assert_eq!(out, denoise(&mut a.model, &s[0]).unwrap());
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(denoise(&mut a.model, &GrayImage::filled(64, 64, 0.0).unwrap()).is_err());
        assert!(train_denoiser::<f32>(cfg(), &[], &tc, |_, _| {}).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (s, g) = pairs();
        let p: Vec<(&GrayImage, &GrayImage)> = s.iter().zip(&g).collect();
        let tc = DenoiserTrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let mut run = train_denoiser::<f32>(cfg(), &p, &tc, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        run.save(&path).unwrap();
        let (mut m, side) = load_denoiser::<f32>(&path).unwrap();
        assert_eq!(side.kind, DENOISER_KIND);
        assert_eq!(denoise(&mut m, &s[1]).unwrap(), denoise(&mut run.model, &s[1]).unwrap());
        assert!(crate::diffusion::load_diffusion::<f32>(&path).is_err());
    }
}
