use super::model::{training_loss, ConditionedDenoiser, DiffusionConfig, PIXEL_HI, PIXEL_LO};
use super::schedule::{NoiseSchedule, ScheduleParams};
use crate::checkpoint;
use crate::datapipe::{mask_style, AlignedPair, DatasetManifest, NoiseType};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DIFFUSION_KIND: &str = "diffusion";

/// One training triple source: x0 is the style image, x_g the glyph, and
/// x_s the style input handed to the style encoder (masked or not).
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub pair_id: String,
    pub class_id: u32,
    pub noise_type: NoiseType,
    pub glyph: GrayImage,
    pub style: GrayImage,
    pub style_input: GrayImage,
}

impl DiffusionExample {
    pub fn from_pair(pair: &AlignedPair, masking: bool, mask_threshold: f32) -> Result<Self> {
        let style_input =
            if masking { mask_style(&pair.style, &pair.glyph, false, mask_threshold)? } else { pair.style.clone() };
        Ok(Self {
            pair_id: pair.pair_id.clone(),
            class_id: pair.class_id,
            noise_type: pair.noise_type,
            glyph: pair.glyph.clone(),
            style: pair.style.clone(),
            style_input,
        })
    }
}

/// Loads the gate-eligible pairs of one split as training examples.
pub fn load_examples(manifest: &DatasetManifest, split: &str, gate: f64, masking: bool) -> Result<Vec<DiffusionExample>> {
    let eligible: std::collections::HashSet<&str> = manifest.eligible(gate).map(|r| r.pair_id.as_str()).collect();
    manifest
        .split_records(split)
        .into_iter()
        .filter(|r| eligible.contains(r.pair_id.as_str()))
        .map(|r| DiffusionExample::from_pair(&manifest.load_pair(r)?, masking, manifest.mask_threshold))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Mask the glyph's bounding box in the style input.
    pub masking: bool,
    /// Keep the glyph encoder at its initialization.
    pub freeze_glyph_encoder: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Smoothing of the reported loss average.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            seed: 0,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            masking: true,
            freeze_glyph_encoder: false,
            checkpoint_every: 0,
            ema_decay: 0.98,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSidecar {
    pub kind: String,
    pub step: u64,
    pub config: DiffusionConfig,
    pub seed: u64,
    pub loss_ema: f64,
    pub schedule: ScheduleParams,
}

pub struct TrainState<T> {
    pub model: ConditionedDenoiser<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub loss_history: Vec<f64>,
    pub loss_ema: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ConditionedDenoiser<T>, config: &TrainConfig, schedule: NoiseSchedule) -> Self {
        Self {
            model,
            optimizer: AdamW::new(config.optimizer.clone()),
            step: 0,
            loss_history: Vec::new(),
            loss_ema: f64::NAN,
            seed: config.seed,
            schedule,
        }
    }

    pub fn sidecar(&self) -> DiffusionSidecar {
        DiffusionSidecar {
            kind: DIFFUSION_KIND.into(),
            step: self.step,
            config: self.model.config.clone(),
            seed: self.seed,
            loss_ema: self.loss_ema,
            schedule: self.schedule.params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.model, &self.sidecar(), path)
    }
}

/// Restores a model and its sidecar from a checkpoint blob.
pub fn load_diffusion<T: Scalar>(path: &Path) -> Result<(ConditionedDenoiser<T>, DiffusionSidecar)> {
    let sidecar: DiffusionSidecar = checkpoint::read_sidecar(path)?;
    checkpoint::expect_kind(&sidecar.kind, DIFFUSION_KIND)?;
    let mut model = ConditionedDenoiser::new(sidecar.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::decode_params(&mut model, &checkpoint::read_blob(path)?)?;
    if !model.params_finite() {
        return Err(Error::ModelState("checkpoint holds non-finite parameters".into()));
    }
    Ok((model, sidecar))
}

struct Batch<T> {
    x0: Tensor<T>,
    x_g: Tensor<T>,
    x_s: Tensor<T>,
}

fn make_batch<T: Scalar>(examples: &[&DiffusionExample]) -> Batch<T> {
    let pick = |f: fn(&DiffusionExample) -> &GrayImage| {
        let imgs: Vec<&GrayImage> = examples.iter().map(|e| f(e)).collect();
        GrayImage::batch(&imgs, PIXEL_LO, PIXEL_HI)
    };
    Batch { x0: pick(|e| &e.style), x_g: pick(|e| &e.glyph), x_s: pick(|e| &e.style_input) }
}

/// Runs `config.steps` optimization steps on `examples`. Batches come from
/// per-epoch shuffles; timesteps are uniform on 1..=T. Everything random is
/// drawn from one generator seeded by `config.seed`, so equal inputs give
/// equal loss curves. `on_step` sees the state after every step.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    examples: &[DiffusionExample],
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_step: impl FnMut(&TrainState<T>),
) -> Result<()> {
    if examples.is_empty() {
        return Err(invalid("training split is empty"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    for e in examples {
        e.style.check_resolution(state.model.config.resolution)?;
    }
    state.model.glyph_encoder.set_frozen(config.freeze_glyph_encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let big_t = state.schedule.timesteps();
    for _ in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().unwrap());
        }
        let batch = make_batch::<T>(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>());
        let t: Vec<usize> = (0..idx.len()).map(|_| rng.gen_range(1..=big_t)).collect();
        let eps = Tensor::randn(batch.x0.shape(), &mut rng);
        let loss = state.model.loss_and_backward(&batch.x0, &batch.x_g, &batch.x_s, &t, &eps, &state.schedule)?;
        if !loss.is_finite() {
            return Err(Error::ModelState(format!("loss diverged at step {}", state.step + 1)));
        }
        state.optimizer.step(&mut state.model);
        state.step += 1;
        state.loss_history.push(loss);
        state.loss_ema = if state.loss_ema.is_nan() {
            loss
        } else {
            config.ema_decay * state.loss_ema + (1.0 - config.ema_decay) * loss
        };
        if let Some(path) = checkpoint_path {
            if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every as u64) {
                state.save(path)?;
            }
        }
        on_step(state);
    }
    if let Some(path) = checkpoint_path {
        state.save(path)?;
    }
    Ok(())
}

/// Mean ε-prediction MSE over `draws` fixed (t, ε) draws per example.
pub fn validation_loss<T: Scalar>(
    model: &mut ConditionedDenoiser<T>,
    examples: &[DiffusionExample],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(invalid("validation split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(16) {
        let refs: Vec<&DiffusionExample> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs);
        for _ in 0..draws {
            let t: Vec<usize> = (0..chunk.len()).map(|_| rng.gen_range(1..=schedule.timesteps())).collect();
            let eps = Tensor::randn(batch.x0.shape(), &mut rng);
            total += training_loss(model, &batch.x0, &batch.x_g, &batch.x_s, &t, &eps, schedule)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_glyph, synth_noise};
    use crate::diffusion::make_schedule;
    use crate::nn::Mode;

    fn small_config() -> DiffusionConfig {
        DiffusionConfig {
            resolution: 32,
            glyph_hidden: 8,
            style_hidden: 8,
            style_grid: 4,
            ctx_dim: 16,
            base_channels: 8,
            channel_mult: vec![1, 2],
            attn_levels: vec![1],
            time_dim: 16,
            ..DiffusionConfig::default()
        }
    }

    fn examples(n: usize) -> Vec<DiffusionExample> {
        (0..n)
            .map(|i| {
                let glyph = synth_glyph(i as u32 % 4, i as u64, 32).unwrap();
                let nt = NoiseType::ALL[i % 4];
                let style = synth_noise(&glyph, nt, i as u64).unwrap();
                let pair = AlignedPair {
                    pair_id: format!("p{i}"),
                    class_id: i as u32 % 4,
                    glyph,
                    style,
                    noise_type: nt,
                    iou: None,
                };
                DiffusionExample::from_pair(&pair, true, 0.5).unwrap()
            })
            .collect()
    }

    fn run(steps: usize) -> TrainState<f32> {
        let cfg = TrainConfig { steps, batch_size: 4, seed: 5, ..TrainConfig::default() };
        let model = ConditionedDenoiser::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut state = TrainState::new(model, &cfg, make_schedule(1000, 1e-4, 0.02).unwrap());
        train(&mut state, &examples(8), &cfg, None, |_| {}).unwrap();
        state
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let a = run(5);
        let b = run(5);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model.flat_values(), b.model.flat_values());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let state = run(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        state.save(&path).unwrap();
        let (mut loaded, side) = load_diffusion::<f32>(&path).unwrap();
        assert_eq!(side.step, 3);
        assert_eq!(side.kind, DIFFUSION_KIND);
        let text = std::fs::read_to_string(checkpoint::sidecar_path(&path)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["step", "config", "seed", "loss_ema", "schedule"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["schedule"]["T"], 1000);
        let mut orig = state.model.clone();
        let ex = examples(2);
        let batch = make_batch::<f32>(&ex.iter().collect::<Vec<_>>());
        let x = Tensor::randn(&[2, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(3));
        let probe = |m: &mut ConditionedDenoiser<f32>| {
            let g = m.glyph_encode(&batch.x_g, Mode::Eval).unwrap();
            let s = m.style_encode(&batch.x_s, Mode::Eval).unwrap();
            m.predict_noise(&x, &[3, 800], &g, &s, Mode::Eval).unwrap()
        };
        assert_eq!(probe(&mut orig), probe(&mut loaded));
    }

    #[test]
    fn empty_split_is_rejected() {
        let cfg = TrainConfig::default();
        let model = ConditionedDenoiser::<f32>::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut state = TrainState::new(model, &cfg, make_schedule(1000, 1e-4, 0.02).unwrap());
        assert!(matches!(train(&mut state, &[], &cfg, None, |_| {}), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_glyph_encoder_stays_at_init() {
        let cfg = TrainConfig { steps: 3, batch_size: 2, freeze_glyph_encoder: true, ..TrainConfig::default() };
        let model = ConditionedDenoiser::<f32>::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = model.glyph_encoder.flat_values();
        let mut state = TrainState::new(model, &cfg, make_schedule(1000, 1e-4, 0.02).unwrap());
        train(&mut state, &examples(4), &cfg, None, |_| {}).unwrap();
        assert_eq!(state.model.glyph_encoder.flat_values(), before);
    }
}
