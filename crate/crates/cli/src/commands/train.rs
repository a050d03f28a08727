use super::{load_manifest, split_pairs};
use crate::config::{resolve, write_json, write_resolved, CommonArgs, OutputLock};
use anyhow::{Context, Result};
use obidiff::datapipe::{AlignedPair, DEFAULT_GATE_THRESHOLD};
use obidiff::denoiser::{identity_l1, train_denoiser as fit_denoiser, validation_l1, DenoiserConfig, DenoiserTrainConfig};
use obidiff::diffusion::{
    load_examples, train, validation_loss, ConditionedDenoiser, DiffusionConfig, NoiseSchedule, ScheduleParams,
    TrainConfig, TrainState,
};
use obidiff::evalharness::{acc_at_k, train_classifier as fit_classifier, ClassifierConfig, ClassifierTrainConfig};
use obidiff::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DIFFUSION_CHECKPOINT: &str = "diffusion.bin";
pub const DENOISER_CHECKPOINT: &str = "denoiser.bin";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.bin";

/// Seed for weight initialization, kept apart from the training stream.
fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{l}", i + 1)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDiffusionRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    /// Governs initialization and the training stream; overrides `train.seed`.
    pub seed: u64,
    pub train_split: String,
    pub val_split: String,
    pub gate_threshold: f64,
    /// Fixed (t, noise) draws per validation example.
    pub val_draws: usize,
    pub model: DiffusionConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
}

impl Default for TrainDiffusionRun {
    fn default() -> Self {
        Self {
            out: "runs/diffusion".into(),
            manifest: "data/manifest.json".into(),
            seed: 0,
            train_split: "train".into(),
            val_split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            val_draws: 4,
            model: DiffusionConfig::default(),
            schedule: ScheduleParams::default(),
            train: TrainConfig::default(),
        }
    }
}

pub fn train_diffusion(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg: TrainDiffusionRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    cfg.train.seed = cfg.seed;
    let _lock = OutputLock::acquire(&cfg.out)?;
    write_resolved(&cfg.out, "train-diffusion", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let examples = load_examples(&manifest, &cfg.train_split, cfg.gate_threshold, cfg.train.masking)?;
    let schedule = NoiseSchedule::from_params(cfg.schedule)?;
    let model = ConditionedDenoiser::<f32>::new(cfg.model.clone(), &mut init_rng(cfg.seed))?;
    let mut state = TrainState::new(model, &cfg.train, schedule.clone());
    let ckpt = cfg.out.join(DIFFUSION_CHECKPOINT);
    let t0 = Instant::now();
    let every = (cfg.train.steps / 20).max(1) as u64;
    eprintln!("training on {} pairs for {} steps", examples.len(), cfg.train.steps);
    train(&mut state, &examples, &cfg.train, Some(&ckpt), |s| {
        if s.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  {:.0}s", s.step, s.loss_ema, t0.elapsed().as_secs_f64());
        }
    })?;
    write_losses(&cfg.out.join("loss.csv"), &state.loss_history)?;
    let val = load_examples(&manifest, &cfg.val_split, cfg.gate_threshold, cfg.train.masking)?;
    let val_loss = if val.is_empty() {
        None
    } else {
        Some(validation_loss(&mut state.model, &val, &schedule, cfg.val_draws, cfg.seed)?)
    };
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "steps": state.step,
            "train_pairs": examples.len(),
            "loss_ema": state.loss_ema,
            "val_loss": val_loss,
            "seconds": t0.elapsed().as_secs_f64(),
        }),
    )?;
    println!("checkpoint {}", ckpt.display());
    if let Some(v) = val_loss {
        println!("validation noise MSE {v:.4}");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDenoiserRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub seed: u64,
    pub train_split: String,
    pub val_split: String,
    pub gate_threshold: f64,
    pub model: DenoiserConfig,
    pub train: DenoiserTrainConfig,
}

impl Default for TrainDenoiserRun {
    fn default() -> Self {
        Self {
            out: "runs/denoiser".into(),
            manifest: "data/manifest.json".into(),
            seed: 0,
            train_split: "train".into(),
            val_split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            model: DenoiserConfig::default(),
            train: DenoiserTrainConfig::default(),
        }
    }
}

fn style_glyph(pairs: &[AlignedPair]) -> Vec<(&GrayImage, &GrayImage)> {
    pairs.iter().map(|p| (&p.style, &p.glyph)).collect()
}

/// Learns rubbing → clean glyph.
pub fn train_denoiser(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg: TrainDenoiserRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    cfg.train.seed = cfg.seed;
    let _lock = OutputLock::acquire(&cfg.out)?;
    write_resolved(&cfg.out, "train-denoiser", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let train_pairs = split_pairs(&manifest, &cfg.train_split, cfg.gate_threshold)?;
    let t0 = Instant::now();
    let mut run = fit_denoiser::<f32>(cfg.model.clone(), &style_glyph(&train_pairs), &cfg.train, |epoch, r| {
        eprintln!("epoch {epoch:>4}  l1 {:.4}  {:.0}s", r.loss_ema, t0.elapsed().as_secs_f64());
    })?;
    let ckpt = cfg.out.join(DENOISER_CHECKPOINT);
    run.save(&ckpt)?;
    write_losses(&cfg.out.join("loss.csv"), &run.loss_history)?;
    let val_pairs = split_pairs(&manifest, &cfg.val_split, cfg.gate_threshold)?;
    let val = style_glyph(&val_pairs);
    let val_l1 = validation_l1(&mut run.model, &val)?;
    let base = identity_l1(&val);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({ "steps": run.step, "val_l1": val_l1, "identity_l1": base, "seconds": t0.elapsed().as_secs_f64() }),
    )?;
    println!("checkpoint {}", ckpt.display());
    println!("validation L1 {val_l1:.4} (unprocessed input {base:.4})");
    Ok(())
}

/// Which image of each pair the classifier learns from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    #[default]
    Style,
    Glyph,
}

impl ImageSource {
    pub fn pick(self, p: &AlignedPair) -> &GrayImage {
        match self {
            ImageSource::Style => &p.style,
            ImageSource::Glyph => &p.glyph,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainClassifierRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub seed: u64,
    pub train_split: String,
    pub val_split: String,
    pub gate_threshold: f64,
    pub source: ImageSource,
    pub model: ClassifierConfig,
    pub train: ClassifierTrainConfig,
}

impl Default for TrainClassifierRun {
    fn default() -> Self {
        Self {
            out: "runs/classifier".into(),
            manifest: "data/manifest.json".into(),
            seed: 0,
            train_split: "train".into(),
            val_split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            source: ImageSource::Style,
            model: ClassifierConfig::default(),
            train: ClassifierTrainConfig::default(),
        }
    }
}

pub fn train_classifier(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg: TrainClassifierRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    cfg.train.seed = cfg.seed;
    let _lock = OutputLock::acquire(&cfg.out)?;
    write_resolved(&cfg.out, "train-classifier", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let train_pairs = split_pairs(&manifest, &cfg.train_split, cfg.gate_threshold)?;
    let data: Vec<(&GrayImage, u32)> = train_pairs.iter().map(|p| (cfg.source.pick(p), p.class_id)).collect();
    let t0 = Instant::now();
    let mut run = fit_classifier::<f32>(cfg.model.clone(), &data, &cfg.train)?;
    let ckpt = cfg.out.join(CLASSIFIER_CHECKPOINT);
    run.model.save(&ckpt, &run.sidecar(cfg.seed))?;
    write_losses(&cfg.out.join("loss.csv"), &run.loss_history)?;
    let val_pairs = split_pairs(&manifest, &cfg.val_split, cfg.gate_threshold)?;
    let imgs: Vec<&GrayImage> = val_pairs.iter().map(|p| cfg.source.pick(p)).collect();
    let labels: Vec<u32> = val_pairs.iter().map(|p| p.class_id).collect();
    let logits = run.model.logits(&imgs)?;
    let k = cfg.model.num_classes;
    let acc = |n: usize| acc_at_k(&logits, &labels, n.min(k));
    let (a1, a3, a5) = (acc(1)?, acc(3)?, acc(5)?);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "steps": run.loss_history.len(),
            "loss_ema": run.loss_ema,
            "val_acc1": a1, "val_acc3": a3, "val_acc5": a5,
            "seconds": t0.elapsed().as_secs_f64(),
        }),
    )?;
    println!("checkpoint {}", ckpt.display());
    println!("validation Acc@1 {a1:.3}  Acc@3 {a3:.3}  Acc@5 {a5:.3}");
    Ok(())
}
