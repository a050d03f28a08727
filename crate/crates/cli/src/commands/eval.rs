use super::generate::open_generator;
use super::train::ImageSource;
use super::{load_manifest, split_pairs};
use crate::config::{resolve, write_json, write_resolved, CommonArgs, OutputLock};
use anyhow::{bail, Context, Result};
use obidiff::datapipe::{AlignedPair, DEFAULT_GATE_THRESHOLD};
use obidiff::denoiser::{denoise_batch, load_denoiser};
use obidiff::diffusion::DEFAULT_SAMPLING_STEPS;
use obidiff::evalharness::{
    acc_at_k, augmentation_experiment, feature_stats, fid_proxy, load_classifier, pair_metrics, write_experiment_csv,
    write_feature_csv, write_metrics_csv, AugmentConfig, AugmentItem, Classifier, CopyStyle, DiffusionGenerator,
    PairMetrics, PseudoGenerator,
};
use obidiff::GrayImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub split: String,
    pub gate_threshold: f64,
    /// Directory holding `<pair_id>.png` for each evaluated pair.
    pub generated: PathBuf,
    /// What generated images are compared against.
    pub reference: ImageSource,
    /// Enables the accuracy table and the Fréchet proxy.
    pub classifier: Option<PathBuf>,
    /// Adds denoised rubbings to the accuracy table.
    pub denoiser: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            out: "runs/eval".into(),
            manifest: "data/manifest.json".into(),
            split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            generated: "runs/generate".into(),
            reference: ImageSource::Style,
            classifier: None,
            denoiser: None,
        }
    }
}

fn mean_metrics(rows: &[PairMetrics]) -> PairMetrics {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&PairMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    PairMetrics { l1: avg(|m| m.l1), rmse: avg(|m| m.rmse), psnr: avg(|m| m.psnr), ssim: avg(|m| m.ssim) }
}

fn accuracy(model: &mut Classifier<f32>, images: &[&GrayImage], labels: &[u32]) -> Result<[f64; 3]> {
    let logits = model.logits(images)?;
    let k = model.config.num_classes;
    Ok([acc_at_k(&logits, labels, 1)?, acc_at_k(&logits, labels, 3.min(k))?, acc_at_k(&logits, labels, 5.min(k))?])
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `metrics.csv` (one row per pair), `table.csv` (group means of the
/// pair metrics plus Fréchet proxy and Acc@k) and, with a classifier,
/// `acc.csv` comparing raw, denoised and generated images.
pub fn eval(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: EvalRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    write_resolved(&cfg.out, "eval", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let all = split_pairs(&manifest, &cfg.split, cfg.gate_threshold)?;
    let mut pairs: Vec<AlignedPair> = Vec::new();
    let mut generated: Vec<GrayImage> = Vec::new();
    let mut gen_paths = Vec::new();
    for p in all {
        let path = cfg.generated.join(format!("{}.png", p.pair_id));
        if !path.exists() {
            continue;
        }
        generated.push(GrayImage::load_png(&path).with_context(|| format!("reading {}", path.display()))?);
        gen_paths.push(path);
        pairs.push(p);
    }
    if pairs.is_empty() {
        bail!("no generated images for split {:?} found in {}", cfg.split, cfg.generated.display());
    }
    let mut per_pair = Vec::new();
    let mut glyph_rows = Vec::new();
    let mut gen_rows = Vec::new();
    for ((p, g), path) in pairs.iter().zip(&generated).zip(&gen_paths) {
        let reference = cfg.reference.pick(p);
        let m = pair_metrics(reference, g)?;
        let rec = manifest.record(&p.pair_id).expect("pair came from the manifest");
        let ref_path = match cfg.reference {
            ImageSource::Style => &rec.style_path,
            ImageSource::Glyph => &rec.glyph_path,
        };
        per_pair.push((manifest.resolve(ref_path).display().to_string(), path.display().to_string(), m));
        gen_rows.push(m);
        glyph_rows.push(pair_metrics(reference, &p.glyph)?);
    }
    let metrics_path = cfg.out.join("metrics.csv");
    write_metrics_csv(&per_pair, File::create(&metrics_path)?)?;

    let styles: Vec<&GrayImage> = pairs.iter().map(|p| &p.style).collect();
    let glyphs: Vec<&GrayImage> = pairs.iter().map(|p| &p.glyph).collect();
    let gens: Vec<&GrayImage> = generated.iter().collect();
    let labels: Vec<u32> = pairs.iter().map(|p| p.class_id).collect();
    let reference: Vec<&GrayImage> = pairs.iter().map(|p| cfg.reference.pick(p)).collect();

    let mut classifier = match &cfg.classifier {
        Some(path) => Some(load_classifier::<f32>(path).with_context(|| format!("loading {}", path.display()))?.0),
        None => None,
    };
    let mut table = std::io::BufWriter::new(File::create(cfg.out.join("table.csv"))?);
    writeln!(table, "group,n,l1,rmse,psnr,ssim,fid,acc1,acc3,acc5")?;
    let mut summary = serde_json::Map::new();
    for (group, rows, images) in [("glyph", &glyph_rows, &glyphs), ("generated", &gen_rows, &gens)] {
        let m = mean_metrics(rows);
        let (fid, acc) = match classifier.as_mut() {
            Some(c) => (Some(fid_proxy(&reference, images, c)?), Some(accuracy(c, images, &labels)?)),
            None => (None, None),
        };
        writeln!(
            table,
            "{group},{},{},{},{},{},{},{},{},{}",
            rows.len(),
            m.l1,
            m.rmse,
            m.psnr,
            m.ssim,
            opt(fid),
            opt(acc.map(|a| a[0])),
            opt(acc.map(|a| a[1])),
            opt(acc.map(|a| a[2]))
        )?;
        summary.insert(group.into(), json!({ "metrics": m_json(&m), "fid": fid, "acc": acc }));
    }
    table.flush()?;

    if let Some(c) = classifier.as_mut() {
        let mut rows: Vec<(&str, [f64; 3])> = vec![("rubbing", accuracy(c, &styles, &labels)?)];
        if let Some(path) = &cfg.denoiser {
            let (mut d, _) = load_denoiser::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
            let cleaned = denoise_batch(&mut d, &styles)?;
            rows.push(("rubbing_denoised", accuracy(c, &cleaned.iter().collect::<Vec<_>>(), &labels)?));
        }
        rows.push(("glyph", accuracy(c, &glyphs, &labels)?));
        rows.push(("generated", accuracy(c, &gens, &labels)?));
        let mut f = std::io::BufWriter::new(File::create(cfg.out.join("acc.csv"))?);
        writeln!(f, "set,n,acc1,acc3,acc5")?;
        for (name, a) in &rows {
            writeln!(f, "{name},{},{},{},{}", labels.len(), a[0], a[1], a[2])?;
        }
        f.flush()?;
    }
    write_json(&cfg.out.join("summary.json"), &summary)?;
    let m = mean_metrics(&gen_rows);
    println!(
        "{} pairs: L1 {:.4}  RMSE {:.4}  PSNR {:.2}  SSIM {:.4}",
        gen_rows.len(),
        m.l1,
        m.rmse,
        m.psnr,
        m.ssim
    );
    Ok(())
}

fn m_json(m: &PairMetrics) -> serde_json::Value {
    // Identical images give infinite PSNR, which JSON cannot hold.
    let psnr = if m.psnr.is_finite() { json!(m.psnr) } else { json!("inf") };
    json!({ "l1": m.l1, "rmse": m.rmse, "psnr": psnr, "ssim": m.ssim })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesRun {
    pub out: PathBuf,
    /// Directories of PNG images; every file becomes one row.
    pub inputs: Vec<PathBuf>,
}

impl Default for FeaturesRun {
    fn default() -> Self {
        Self { out: "runs/features".into(), inputs: vec!["data/styles".into()] }
    }
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn features(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: FeaturesRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    write_resolved(&cfg.out, "features", &cfg)?;
    let mut rows = Vec::new();
    for dir in &cfg.inputs {
        for path in pngs(dir)? {
            let img = GrayImage::load_png(&path).with_context(|| format!("reading {}", path.display()))?;
            rows.push((path.display().to_string(), feature_stats(&img)));
        }
    }
    if rows.is_empty() {
        bail!("no PNG images under {:?}", cfg.inputs);
    }
    write_feature_csv(&rows, File::create(cfg.out.join("features.csv"))?)?;
    println!("{} images", rows.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Diffusion,
    /// Returns the style image unchanged; both arms then see identical data.
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    /// Overrides `augment.seed` and `augment.train.seed`.
    pub seed: u64,
    pub generator: GeneratorKind,
    pub checkpoint: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub gate_threshold: f64,
    pub steps: usize,
    pub dual_mask: bool,
    pub augment: AugmentConfig,
}

impl Default for AugmentRun {
    fn default() -> Self {
        Self {
            out: "runs/augment".into(),
            manifest: "data/manifest.json".into(),
            seed: 0,
            generator: GeneratorKind::Diffusion,
            checkpoint: "runs/diffusion/diffusion.bin".into(),
            train_split: "train".into(),
            eval_split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            steps: DEFAULT_SAMPLING_STEPS,
            dual_mask: true,
            augment: AugmentConfig::default(),
        }
    }
}

pub fn augment_experiment(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let mut cfg: AugmentRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    cfg.augment.seed = cfg.seed;
    cfg.augment.train.seed = cfg.seed;
    let _lock = OutputLock::acquire(&cfg.out)?;
    write_resolved(&cfg.out, "augment-experiment", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let train = split_pairs(&manifest, &cfg.train_split, cfg.gate_threshold)?;
    let eval = split_pairs(&manifest, &cfg.eval_split, cfg.gate_threshold)?;
    let items: Vec<AugmentItem> =
        train.iter().map(|p| AugmentItem { glyph: &p.glyph, style: &p.style, class_id: p.class_id }).collect();
    let eval_set: Vec<(&GrayImage, u32)> = eval.iter().map(|p| (&p.style, p.class_id)).collect();
    let t0 = std::time::Instant::now();
    let rows = match cfg.generator {
        GeneratorKind::Copy => augmentation_experiment(&items, &eval_set, &mut CopyStyle, &cfg.augment)?,
        GeneratorKind::Diffusion => {
            let (mut model, side, sched) = open_generator(&cfg.checkpoint)?;
            let mut gen = DiffusionGenerator::new(&mut model, &sched, cfg.steps, cfg.dual_mask, side.step)?;
            augmentation_experiment(&items, &eval_set, &mut gen as &mut dyn PseudoGenerator, &cfg.augment)?
        }
    };
    write_experiment_csv(&rows, File::create(cfg.out.join("augment.csv"))?)?;
    for r in &rows {
        println!("x{:<3} {:<10} acc1 {:.3}  acc3 {:.3}  acc5 {:.3}", r.scale, r.arm, r.acc1, r.acc3, r.acc5);
    }
    eprintln!("{:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
