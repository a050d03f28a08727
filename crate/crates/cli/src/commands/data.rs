use super::load_manifest;
use crate::config::{resolve, write_resolved, CommonArgs};
use anyhow::{Context, Result};
use obidiff::datapipe::{split_dataset, synth_dataset, write_qc_csv, SplitConfig, SynthConfig, DEFAULT_GATE_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub out: PathBuf,
    pub seed: u64,
    pub classes: u32,
    pub per_class: usize,
    pub resolution: usize,
}

impl Default for SynthRun {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self { out: "data".into(), seed: s.seed, classes: s.classes, per_class: s.per_class, resolution: s.resolution }
    }
}

pub fn synth(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: SynthRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    write_resolved(&cfg.out, "synth", &cfg)?;
    let m = synth_dataset(
        &SynthConfig { classes: cfg.classes, per_class: cfg.per_class, resolution: cfg.resolution, seed: cfg.seed },
        &cfg.out,
    )?;
    println!("wrote {} pairs to {}", m.pairs.len(), cfg.out.join("manifest.json").display());
    Ok(())
}

/// Shared by validate and split: the manifest defaults to `<out>/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateRun {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub gate_threshold: f64,
}

impl Default for ValidateRun {
    fn default() -> Self {
        Self { out: "data".into(), manifest: None, gate_threshold: DEFAULT_GATE_THRESHOLD }
    }
}

/// Gates every pair, records IoUs in the manifest and writes `qc.csv`.
pub fn validate(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: ValidateRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    write_resolved(&cfg.out, "validate", &cfg)?;
    let path = cfg.manifest.clone().unwrap_or_else(|| cfg.out.join("manifest.json"));
    let mut m = load_manifest(&path)?;
    let rows = m.run_quality_gate(cfg.gate_threshold)?;
    let qc = cfg.out.join("qc.csv");
    write_qc_csv(&rows, File::create(&qc).with_context(|| format!("creating {}", qc.display()))?)?;
    m.save(&path)?;
    let rejected = rows.iter().filter(|r| !r.decision().accepted()).count();
    let mean = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len().max(1) as f64;
    println!("mean IoU {mean:.4} over {} pairs", rows.len());
    println!("{rejected} pairs rejected at threshold {}", cfg.gate_threshold);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRun {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub train_ratio: f64,
    /// Classes held out entirely for zero-shot testing.
    pub test_classes: Vec<u32>,
    pub gate_threshold: f64,
}

impl Default for SplitRun {
    fn default() -> Self {
        let s = SplitConfig::default();
        Self {
            out: "data".into(),
            manifest: None,
            seed: s.seed,
            train_ratio: s.train_ratio,
            test_classes: s.test_classes,
            gate_threshold: s.gate_threshold,
        }
    }
}

pub fn split(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: SplitRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    write_resolved(&cfg.out, "split", &cfg)?;
    let path = cfg.manifest.clone().unwrap_or_else(|| cfg.out.join("manifest.json"));
    let m = load_manifest(&path)?;
    let split = split_dataset(
        &m,
        &SplitConfig {
            train_ratio: cfg.train_ratio,
            seed: cfg.seed,
            test_classes: cfg.test_classes.clone(),
            gate_threshold: cfg.gate_threshold,
        },
    )?;
    split.save(&path)?;
    for (name, ids) in &split.splits {
        println!("{name}: {} pairs", ids.len());
    }
    Ok(())
}
