use super::{load_manifest, split_pairs};
use crate::config::{path_value, resolve, write_json, write_resolved};
use crate::GenerateArgs;
use anyhow::{bail, Context, Result};
use obidiff::datapipe::{AlignedPair, DEFAULT_GATE_THRESHOLD};
use obidiff::diffusion::{
    generate_personalized_batch, load_diffusion, parse_requests, ConditionedDenoiser, DiffusionSidecar, NoiseSchedule,
    DEFAULT_SAMPLING_STEPS,
};
use obidiff::{Error, GrayImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Each pair of a split conditions on its own glyph and rubbing.
    #[default]
    FewShot,
    /// Same, restricted to classes never seen in training.
    ZeroShot,
    /// One glyph image and one unrelated style image.
    Personalized,
    /// JSONL request file.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRun {
    pub out: PathBuf,
    pub seed: u64,
    pub mode: GenMode,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Defaults to `val` for few-shot and `test` for zero-shot.
    pub split: Option<String>,
    pub limit: Option<usize>,
    pub gate_threshold: f64,
    pub glyph: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub requests: Option<PathBuf>,
    pub steps: usize,
    pub dual_mask: bool,
}

impl Default for GenerateRun {
    fn default() -> Self {
        Self {
            out: "runs/generate".into(),
            seed: 0,
            mode: GenMode::FewShot,
            checkpoint: "runs/diffusion/diffusion.bin".into(),
            manifest: "data/manifest.json".into(),
            split: None,
            limit: None,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            glyph: None,
            style: None,
            requests: None,
            steps: DEFAULT_SAMPLING_STEPS,
            dual_mask: true,
        }
    }
}

/// Written beside every generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub output: PathBuf,
    pub mode: GenMode,
    pub glyph: PathBuf,
    pub style: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    pub seed: u64,
    pub steps: usize,
    pub dual_mask: bool,
    pub checkpoint: PathBuf,
    pub checkpoint_step: u64,
}

/// Loads a diffusion checkpoint; a missing file is a model-state error.
pub fn open_generator(path: &Path) -> Result<(ConditionedDenoiser<f32>, DiffusionSidecar, NoiseSchedule)> {
    if !path.exists() {
        return Err(Error::ModelState(format!("checkpoint {} not found; run train-diffusion first", path.display())).into());
    }
    let (model, side) = load_diffusion::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let sched = NoiseSchedule::from_params(side.schedule)?;
    Ok((model, side, sched))
}

pub fn generate(args: &GenerateArgs, env: &[(String, String)]) -> Result<()> {
    let mut flags = args.common.overrides();
    if let Some(m) = &args.mode {
        flags.push(("mode", Value::String(m.clone())));
    }
    for (key, v) in [("checkpoint", &args.checkpoint), ("glyph", &args.glyph), ("style", &args.style), ("requests", &args.requests)] {
        if let Some(p) = v {
            flags.push((key, path_value(p)));
        }
    }
    let cfg: GenerateRun = resolve(args.common.config.as_deref(), env, &flags)?;
    write_resolved(&cfg.out, "generate", &cfg)?;
    let (mut model, side, sched) = open_generator(&cfg.checkpoint)?;
    if side.step == 0 {
        eprintln!("warning: {} has not been trained", cfg.checkpoint.display());
    }
    let mut gen = Generator { cfg: &cfg, model: &mut model, side: &side, sched: &sched };
    let written = match cfg.mode {
        GenMode::FewShot | GenMode::ZeroShot => gen.run_manifest()?,
        GenMode::Personalized => gen.personalized()?,
        GenMode::Batch => gen.batch()?,
    };
    println!("wrote {written} images to {}", cfg.out.display());
    Ok(())
}

struct Generator<'a> {
    cfg: &'a GenerateRun,
    model: &'a mut ConditionedDenoiser<f32>,
    side: &'a DiffusionSidecar,
    sched: &'a NoiseSchedule,
}

struct Job {
    glyph: GrayImage,
    style: GrayImage,
    seed: u64,
    dual: bool,
    out: PathBuf,
    prov: Provenance,
}

impl Generator<'_> {
    fn provenance(&self, output: &Path, glyph: &Path, style: &Path, seed: u64, dual: bool) -> Provenance {
        Provenance {
            output: output.to_path_buf(),
            mode: self.cfg.mode,
            glyph: glyph.to_path_buf(),
            style: style.to_path_buf(),
            pair_id: None,
            class_id: None,
            seed,
            steps: self.cfg.steps,
            dual_mask: dual,
            checkpoint: self.cfg.checkpoint.clone(),
            checkpoint_step: self.side.step,
        }
    }

    /// Samples jobs in chunks that share a masking mode.
    fn run(&mut self, jobs: &[Job]) -> Result<Vec<GrayImage>> {
        let mut out = Vec::with_capacity(jobs.len());
        let mut start = 0;
        while start < jobs.len() {
            let dual = jobs[start].dual;
            let end = (start..jobs.len()).find(|&i| jobs[i].dual != dual || i - start == 32).unwrap_or(jobs.len());
            let chunk = &jobs[start..end];
            let g: Vec<&GrayImage> = chunk.iter().map(|j| &j.glyph).collect();
            let s: Vec<&GrayImage> = chunk.iter().map(|j| &j.style).collect();
            let seeds: Vec<u64> = chunk.iter().map(|j| j.seed).collect();
            out.extend(generate_personalized_batch(self.model, &g, &s, dual, self.sched, self.cfg.steps, &seeds)?);
            start = end;
        }
        Ok(out)
    }

    fn run_manifest(&mut self) -> Result<usize> {
        let manifest = load_manifest(&self.cfg.manifest)?;
        let zero = self.cfg.mode == GenMode::ZeroShot;
        let split = self.cfg.split.clone().unwrap_or_else(|| if zero { "test" } else { "val" }.to_string());
        let mut pairs = split_pairs(&manifest, &split, self.cfg.gate_threshold)?;
        if zero {
            let seen: BTreeSet<u32> = manifest
                .split_records("train")
                .iter()
                .map(|r| r.class_id)
                .collect();
            if let Some(p) = pairs.iter().find(|p| seen.contains(&p.class_id)) {
                bail!("zero-shot split {split:?} contains class {} which also appears in training", p.class_id);
            }
        }
        if let Some(n) = self.cfg.limit {
            pairs.truncate(n);
        }
        let jobs: Vec<Job> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p): (usize, AlignedPair)| {
                let rec = manifest.record(&p.pair_id).expect("pair came from the manifest");
                let out = self.cfg.out.join(format!("{}.png", p.pair_id));
                let seed = self.cfg.seed.wrapping_add(i as u64);
                let mut prov = self.provenance(
                    &out,
                    &manifest.resolve(&rec.glyph_path),
                    &manifest.resolve(&rec.style_path),
                    seed,
                    self.cfg.dual_mask,
                );
                prov.pair_id = Some(p.pair_id.clone());
                prov.class_id = Some(p.class_id);
                Job { glyph: p.glyph, style: p.style, seed, dual: self.cfg.dual_mask, out, prov }
            })
            .collect();
        let images = self.run(&jobs)?;
        let log = self.cfg.out.join("provenance.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&log).with_context(|| format!("creating {}", log.display()))?);
        for (job, img) in jobs.iter().zip(&images) {
            img.save_png(&job.out)?;
            writeln!(f, "{}", serde_json::to_string(&job.prov)?)?;
        }
        f.flush()?;
        Ok(images.len())
    }

    fn personalized(&mut self) -> Result<usize> {
        let (Some(glyph), Some(style)) = (&self.cfg.glyph, &self.cfg.style) else {
            bail!("personalized mode needs both --glyph and --style");
        };
        let out = self.cfg.out.join("generated.png");
        let job = Job {
            glyph: GrayImage::load_png(glyph).with_context(|| format!("reading {}", glyph.display()))?,
            style: GrayImage::load_png(style).with_context(|| format!("reading {}", style.display()))?,
            seed: self.cfg.seed,
            dual: self.cfg.dual_mask,
            prov: self.provenance(&out, glyph, style, self.cfg.seed, self.cfg.dual_mask),
            out,
        };
        let img = self.run(std::slice::from_ref(&job))?.remove(0);
        img.save_png(&job.out)?;
        write_json(&job.out.with_extension("json"), &job.prov)?;
        Ok(1)
    }

    fn batch(&mut self) -> Result<usize> {
        let Some(path) = &self.cfg.requests else {
            bail!("batch mode needs --requests");
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut jobs = Vec::new();
        for r in parse_requests(&text)? {
            let glyph = base.join(&r.glyph_path);
            let style = base.join(&r.style_path);
            let out = self.cfg.out.join(&r.out_path);
            jobs.push(Job {
                glyph: GrayImage::load_png(&glyph).with_context(|| format!("reading {}", glyph.display()))?,
                style: GrayImage::load_png(&style).with_context(|| format!("reading {}", style.display()))?,
                seed: r.seed,
                dual: r.dual_mask,
                prov: self.provenance(&out, &glyph, &style, r.seed, r.dual_mask),
                out,
            });
        }
        let images = self.run(&jobs)?;
        for (job, img) in jobs.iter().zip(&images) {
            if let Some(dir) = job.out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            img.save_png(&job.out)?;
            write_json(&job.out.with_extension("json"), &job.prov)?;
        }
        Ok(images.len())
    }
}
