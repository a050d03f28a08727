pub mod data;
pub mod eval;
pub mod generate;
pub mod study;
pub mod train;

use anyhow::{bail, Context, Result};
use obidiff::datapipe::{AlignedPair, DatasetManifest};
use std::path::Path;

pub(crate) fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Pairs of a split that pass the gate; an empty result is an error.
pub(crate) fn split_pairs(manifest: &DatasetManifest, split: &str, gate: f64) -> Result<Vec<AlignedPair>> {
    let pairs: Vec<AlignedPair> = manifest
        .split_records(split)
        .into_iter()
        .filter(|r| r.iou.is_none_or(|v| v >= gate))
        .map(|r| manifest.load_pair(r))
        .collect::<obidiff::Result<_>>()?;
    if pairs.is_empty() {
        bail!("split {split:?} has no pairs; run `obidiff split` first");
    }
    Ok(pairs)
}

pub(crate) fn now_secs() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
