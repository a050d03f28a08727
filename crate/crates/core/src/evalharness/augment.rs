use super::classifier::{acc_at_k, train_classifier, ClassifierConfig, ClassifierTrainConfig};
use crate::diffusion::{generate_personalized_batch, ConditionedDenoiser, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::Module;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Produces pseudo images from (glyph, style) pairs, one per seed.
pub trait PseudoGenerator {
    fn generate(&mut self, glyphs: &[&GrayImage], styles: &[&GrayImage], seeds: &[u64]) -> Result<Vec<GrayImage>>;
}

/// Returns each style image unchanged.
pub struct CopyStyle;

impl PseudoGenerator for CopyStyle {
    fn generate(&mut self, _: &[&GrayImage], styles: &[&GrayImage], _: &[u64]) -> Result<Vec<GrayImage>> {
        Ok(styles.iter().map(|s| (*s).clone()).collect())
    }
}

pub struct DiffusionGenerator<'a, T> {
    model: &'a mut ConditionedDenoiser<T>,
    schedule: &'a NoiseSchedule,
    steps: usize,
    dual: bool,
}

impl<'a, T: Scalar> DiffusionGenerator<'a, T> {
    /// `trained_steps` comes from the checkpoint; an untrained model is refused.
    pub fn new(
        model: &'a mut ConditionedDenoiser<T>,
        schedule: &'a NoiseSchedule,
        steps: usize,
        dual: bool,
        trained_steps: u64,
    ) -> Result<Self> {
        if trained_steps == 0 {
            return Err(Error::ModelState("generator has not been trained".into()));
        }
        if !model.params_finite() {
            return Err(Error::ModelState("generator parameters are not finite".into()));
        }
        Ok(Self { model, schedule, steps, dual })
    }
}

impl<T: Scalar> PseudoGenerator for DiffusionGenerator<'_, T> {
    fn generate(&mut self, glyphs: &[&GrayImage], styles: &[&GrayImage], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        let mut out = Vec::with_capacity(glyphs.len());
        for ((g, s), sd) in glyphs.chunks(32).zip(styles.chunks(32)).zip(seeds.chunks(32)) {
            out.extend(generate_personalized_batch(self.model, g, s, self.dual, self.schedule, self.steps, sd)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentItem<'a> {
    pub glyph: &'a GrayImage,
    pub style: &'a GrayImage,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scales: Vec<usize>,
    /// Classes made rare by keeping only `rare_keep` training items each.
    pub rare_classes: Vec<u32>,
    pub rare_keep: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub train: ClassifierTrainConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 5],
            rare_classes: vec![0, 1],
            rare_keep: 4,
            seed: 0,
            classifier: ClassifierConfig::default(),
            train: ClassifierTrainConfig::default(),
        }
    }
}

pub const ARM_GENERATED: &str = "generated";
pub const ARM_DUPLICATE: &str = "duplicate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub scale: usize,
    pub arm: String,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
}

/// The training set with rare classes cut down to `rare_keep` items, and the
/// kept rare items themselves.
pub fn rare_subset<'a>(train: &[AugmentItem<'a>], cfg: &AugmentConfig) -> (Vec<AugmentItem<'a>>, Vec<AugmentItem<'a>>) {
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let mut base = Vec::new();
    let mut rare = Vec::new();
    for it in train {
        if cfg.rare_classes.contains(&it.class_id) {
            let n = seen.entry(it.class_id).or_default();
            if *n >= cfg.rare_keep {
                continue;
            }
            *n += 1;
            rare.push(*it);
        }
        base.push(*it);
    }
    (base, rare)
}

/// For every scale, adds `scale` pseudo images per kept rare item (or the
/// same number of duplicated style images in the control arm), retrains the
/// classifier, and measures Acc@{1,3,5} on `eval`.
pub fn augmentation_experiment(
    train: &[AugmentItem],
    eval: &[(&GrayImage, u32)],
    generator: &mut dyn PseudoGenerator,
    cfg: &AugmentConfig,
) -> Result<Vec<ExperimentRow>> {
    if cfg.scales.is_empty() {
        return Err(invalid("no augmentation scales given"));
    }
    if eval.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let (base, rare) = rare_subset(train, cfg);
    if rare.is_empty() {
        return Err(invalid("no training items in the designated rare classes"));
    }
    let eval_imgs: Vec<&GrayImage> = eval.iter().map(|(im, _)| *im).collect();
    let eval_labels: Vec<u32> = eval.iter().map(|(_, c)| *c).collect();
    let mut rows = Vec::new();
    for &scale in &cfg.scales {
        let mut glyphs = Vec::new();
        let mut styles = Vec::new();
        let mut labels = Vec::new();
        let mut seeds = Vec::new();
        for (i, it) in rare.iter().enumerate() {
            for r in 0..scale {
                glyphs.push(it.glyph);
                styles.push(it.style);
                labels.push(it.class_id);
                seeds.push(cfg.seed.wrapping_mul(1_000_003).wrapping_add((i * 1000 + r) as u64));
            }
        }
        let generated = generator.generate(&glyphs, &styles, &seeds)?;
        let duplicated: Vec<GrayImage> = styles.iter().map(|s| (*s).clone()).collect();
        for (arm, extra) in [(ARM_GENERATED, &generated), (ARM_DUPLICATE, &duplicated)] {
            let mut data: Vec<(&GrayImage, u32)> = base.iter().map(|it| (it.style, it.class_id)).collect();
            data.extend(extra.iter().zip(&labels).map(|(im, &c)| (im, c)));
            let mut run = train_classifier::<f32>(cfg.classifier.clone(), &data, &cfg.train)?;
            let logits = run.model.logits(&eval_imgs)?;
            rows.push(ExperimentRow {
                scale,
                arm: arm.to_string(),
                acc1: acc_at_k(&logits, &eval_labels, 1)?,
                acc3: acc_at_k(&logits, &eval_labels, 3.min(cfg.classifier.num_classes))?,
                acc5: acc_at_k(&logits, &eval_labels, 5.min(cfg.classifier.num_classes))?,
            });
        }
    }
    Ok(rows)
}

/// Experiment CSV: scale,arm,acc1,acc3,acc5.
pub fn write_experiment_csv<W: std::io::Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
