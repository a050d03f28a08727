use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::{Conv2d, Downsample, GroupNorm, Linear, Mode, Module, Param, ResBlock, Silu};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CLASSIFIER_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub num_classes: usize,
    /// Channel width per stage; every stage after the first halves the grid.
    pub widths: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { resolution: 64, num_classes: 8, widths: vec![16, 32, 64] }
    }
}

/// Small residual CNN: a stride-2 stem, one residual block per stage, global
/// average pooling to the penultimate features, and a linear head.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub stem: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub downs: Vec<Downsample<T>>,
    pub norm: GroupNorm<T>,
    act: Silu<T>,
    pub head: Linear<T>,
    pooled_hw: Option<(usize, usize)>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        let stages = config.widths.len();
        if stages == 0 || config.num_classes < 2 || config.widths.contains(&0) {
            return Err(invalid("classifier needs at least one stage and two classes"));
        }
        if !config.resolution.is_multiple_of(2 << (stages - 1)) {
            return Err(invalid(format!("resolution {} too small for {stages} stages", config.resolution)));
        }
        let w = &config.widths;
        let stem = Conv2d::new(1, w[0], 3, 2, rng);
        let blocks = w.iter().map(|&c| ResBlock::new(c, c, None, rng)).collect();
        let downs = w.windows(2).map(|p| Downsample::new(p[0], p[1], rng)).collect();
        let last = *w.last().unwrap();
        Ok(Self {
            stem,
            blocks,
            downs,
            norm: GroupNorm::for_channels(last),
            act: Silu::new(),
            head: Linear::new(last, config.num_classes, rng),
            config,
            pooled_hw: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    /// Returns (logits (N, classes), penultimate features (N, feature_dim)).
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Tensor<T>) {
        let mut h = self.stem.forward(x, mode);
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(&h, None, mode);
            if i < self.downs.len() {
                h = self.downs[i].forward(&h, mode);
            }
        }
        let h = self.act.forward(&self.norm.forward(&h, mode), mode);
        let (n, c, hh, ww) = h.dims4();
        let plane = hh * ww;
        let inv = T::from_usize(plane).unwrap().recip();
        let mut feats = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let src = h.item(i);
            for (ch, f) in feats.item_mut(i).iter_mut().enumerate() {
                *f = src[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &b| a + b) * inv;
            }
        }
        if mode.caches() {
            self.pooled_hw = Some((hh, ww));
        }
        (self.head.forward(&feats, mode), feats)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let dfeat = self.head.backward(dlogits);
        let (hh, ww) = self.pooled_hw.take().expect("classifier backward without training forward");
        let (n, c) = (dfeat.shape()[0], dfeat.shape()[1]);
        let plane = hh * ww;
        let inv = T::from_usize(plane).unwrap().recip();
        let mut dh = Tensor::zeros(&[n, c, hh, ww]);
        for i in 0..n {
            let g = dfeat.item(i).to_vec();
            let dst = dh.item_mut(i);
            for ch in 0..c {
                dst[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = g[ch] * inv);
            }
        }
        let mut d = self.norm.backward(&self.act.backward(&dh));
        for i in (0..self.blocks.len()).rev() {
            if i < self.downs.len() {
                d = self.downs[i].backward(&d);
            }
            d = self.blocks[i].backward(&d).0;
        }
        self.stem.backward(&d);
    }

    fn check(&self, images: &[&GrayImage]) -> Result<()> {
        for im in images {
            im.check_resolution(self.config.resolution)?;
        }
        Ok(())
    }

    /// Logits and penultimate features for images, evaluated in batches.
    pub fn infer(&mut self, images: &[&GrayImage]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check(images)?;
        let mut logits = Vec::with_capacity(images.len());
        let mut feats = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let (l, f) = self.forward(&GrayImage::batch(chunk, 0.0, 1.0), Mode::Eval);
            for i in 0..chunk.len() {
                logits.push(l.item(i).iter().map(|v| v.to_f64().unwrap()).collect());
                feats.push(f.item(i).iter().map(|v| v.to_f64().unwrap()).collect());
            }
        }
        Ok((logits, feats))
    }

    pub fn features(&mut self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        Ok(self.infer(images)?.1)
    }

    pub fn logits(&mut self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        Ok(self.infer(images)?.0)
    }

    pub fn save(&self, path: &Path, sidecar: &ClassifierSidecar) -> Result<()> {
        checkpoint::save(self, sidecar, path)
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.downs.iter().for_each(|d| d.visit(f));
        self.norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.downs.iter_mut().for_each(|d| d.visit_mut(f));
        self.norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub kind: String,
    pub step: u64,
    pub config: ClassifierConfig,
    pub seed: u64,
    pub loss_ema: f64,
}

pub fn load_classifier<T: Scalar>(path: &Path) -> Result<(Classifier<T>, ClassifierSidecar)> {
    let sidecar: ClassifierSidecar = checkpoint::read_sidecar(path)?;
    checkpoint::expect_kind(&sidecar.kind, CLASSIFIER_KIND)?;
    let mut model = Classifier::new(sidecar.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::decode_params(&mut model, &checkpoint::read_blob(path)?)?;
    Ok((model, sidecar))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Maximum absolute rotation in degrees; 0 disables rotation.
    pub max_rotation_deg: f64,
    pub horizontal_flip: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            seed: 0,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            max_rotation_deg: 10.0,
            horizontal_flip: true,
        }
    }
}

/// Rotation about the image centre with bilinear sampling; pixels that map
/// outside the source read as black.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let px = img.pixels();
    let fetch = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize { 0.0 } else { px[r as usize * w + col as usize] as f64 }
    };
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx, r as f64 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = fetch(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + fetch(y0, x0 + 1) * fx * (1.0 - fy)
                + fetch(y0 + 1, x0) * (1.0 - fx) * fy
                + fetch(y0 + 1, x0 + 1) * fx * fy;
            out.push(v as f32);
        }
    }
    GrayImage::from_clamped(w, h, out).expect("same dimensions")
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let out = (0..h).flat_map(|r| (0..w).rev().map(move |c| px[r * w + c])).collect();
    GrayImage::new(w, h, out).expect("same dimensions")
}

pub struct ClassifierRun<T> {
    pub model: Classifier<T>,
    pub loss_history: Vec<f64>,
    pub loss_ema: f64,
}

impl<T: Scalar> ClassifierRun<T> {
    pub fn sidecar(&self, seed: u64) -> ClassifierSidecar {
        ClassifierSidecar {
            kind: CLASSIFIER_KIND.into(),
            step: self.loss_history.len() as u64,
            config: self.model.config.clone(),
            seed,
            loss_ema: self.loss_ema,
        }
    }
}

/// Cross-entropy training with random rotation and horizontal flips.
pub fn train_classifier<T: Scalar>(
    config: ClassifierConfig,
    data: &[(&GrayImage, u32)],
    train: &ClassifierTrainConfig,
) -> Result<ClassifierRun<T>> {
    if data.is_empty() {
        return Err(invalid("classifier training set is empty"));
    }
    if let Some((_, c)) = data.iter().find(|(_, c)| *c as usize >= config.num_classes) {
        return Err(invalid(format!("label {c} outside {} classes", config.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Classifier::<T>::new(config, &mut rng)?;
    model.check(&data.iter().map(|(im, _)| *im).collect::<Vec<_>>())?;
    let mut opt = AdamW::new(train.optimizer.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(train.steps);
    let mut ema = f64::NAN;
    let k = model.config.num_classes;
    for step in 0..train.steps {
        let mut idx = Vec::with_capacity(train.batch_size);
        while idx.len() < train.batch_size.max(1) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().unwrap());
        }
        let imgs: Vec<GrayImage> = idx
            .iter()
            .map(|&i| {
                let mut im = data[i].0.clone();
                if train.max_rotation_deg > 0.0 {
                    im = rotate(&im, rng.gen_range(-train.max_rotation_deg..=train.max_rotation_deg));
                }
                if train.horizontal_flip && rng.gen_bool(0.5) {
                    im = flip_horizontal(&im);
                }
                im
            })
            .collect();
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let (logits, _) = model.forward(&GrayImage::batch(&refs, 0.0, 1.0), Mode::Train);
        let n = idx.len();
        let mut dl = Tensor::zeros(logits.shape());
        let mut loss = 0.0;
        for (b, &i) in idx.iter().enumerate() {
            let row: Vec<f64> = logits.item(b).iter().map(|v| v.to_f64().unwrap()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let label = data[i].1 as usize;
            loss += -(row[label] - mx - z.ln());
            let drow = dl.item_mut(b);
            for j in 0..k {
                let p = (row[j] - mx).exp() / z;
                let target = if j == label { 1.0 } else { 0.0 };
                drow[j] = T::from_f64((p - target) / n as f64).unwrap();
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::ModelState(format!("classifier loss diverged at step {}", step + 1)));
        }
        model.backward(&dl);
        opt.step(&mut model);
        history.push(loss);
        ema = if ema.is_nan() { loss } else { 0.98 * ema + 0.02 * loss };
    }
    Ok(ClassifierRun { model, loss_history: history, loss_ema: ema })
}

/// Whether the true class is among the top `k` logits. Equal logits rank
/// the lower class index first.
pub fn in_top_k(logits: &[f64], truth: usize, k: usize) -> bool {
    let t = logits[truth];
    let ahead = logits.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < truth)).count();
    ahead < k
}

pub fn acc_at_k(logits: &[Vec<f64>], labels: &[u32], k: usize) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(invalid("logits and labels must be non-empty and equally long"));
    }
    let classes = logits[0].len();
    if k == 0 || k > classes {
        return Err(invalid(format!("k = {k} outside 1..={classes}")));
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| in_top_k(l, y as usize, k)).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        let l = vec![vec![0.1, 0.7, 0.2]];
        assert_eq!(acc_at_k(&l, &[2], 1).unwrap(), 0.0);
        assert_eq!(acc_at_k(&l, &[2], 2).unwrap(), 1.0);
        assert_eq!(acc_at_k(&l, &[0], 3).unwrap(), 1.0);
        assert!(acc_at_k(&l, &[0], 0).is_err());
        assert!(acc_at_k(&l, &[0], 4).is_err());
        // ties go to the lower index
        assert!(in_top_k(&[0.5, 0.5, 0.1], 0, 1));
        assert!(!in_top_k(&[0.5, 0.5, 0.1], 1, 1));
    }

    #[test]
    fn flip_and_rotate() {
        let px: Vec<f32> = (0..64).map(|i| (i % 8) as f32 / 7.0).collect();
        let im = GrayImage::new(8, 8, px).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&im)), im);
        assert_eq!(flip_horizontal(&im).get(0, 0), im.get(0, 7));
        let r = rotate(&im, 0.0);
        for (a, b) in r.pixels().iter().zip(im.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        let r180 = rotate(&im, 180.0);
        assert!((r180.get(0, 0) - im.get(7, 7)).abs() < 1e-5);
    }

    #[test]
    fn shapes_and_determinism() {
        let imgs: Vec<GrayImage> =
            (0..8).map(|i| crate::datapipe::synth_glyph(i % 2, i as u64, 32).unwrap()).collect();
        let data: Vec<(&GrayImage, u32)> = imgs.iter().enumerate().map(|(i, im)| (im, (i % 2) as u32)).collect();
        let cfg = ClassifierConfig { resolution: 32, num_classes: 2, widths: vec![4, 8] };
        let tc = ClassifierTrainConfig { steps: 4, batch_size: 4, ..Default::default() };
        let mut a = train_classifier::<f32>(cfg.clone(), &data, &tc).unwrap();
        let b = train_classifier::<f32>(cfg.clone(), &data, &tc).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let (logits, feats) = a.model.infer(&refs).unwrap();
        assert_eq!(logits[0].len(), 2);
        assert!(feats.iter().all(|f| f.len() == 8));
        assert!(train_classifier::<f32>(cfg, &[], &tc).is_err());
    }
}
