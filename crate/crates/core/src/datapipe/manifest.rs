use super::{quality_gate, AlignedPair, GateDecision, NoiseType, DEFAULT_GATE_THRESHOLD, DEFAULT_MASK_THRESHOLD};
use crate::error::{invalid, parse_json, Error, Result};
use crate::image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_PAIRS_PER_CLASS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub class_id: u32,
    pub glyph_path: String,
    pub style_path: String,
    pub noise_type: NoiseType,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub per_class: BTreeMap<u32, usize>,
    pub mean_iou: Option<f64>,
}

fn default_mask_threshold() -> f32 {
    DEFAULT_MASK_THRESHOLD
}

/// Split-aware index of pairs. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: usize,
    pub seed: u64,
    /// Binarization threshold used for masks, IoU and boxes.
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f32,
    pub pairs: Vec<PairRecord>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ManifestStats>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn from_json(text: &str, root: &Path) -> Result<Self> {
        let mut m: DatasetManifest = parse_json(text)?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &root)
    }

    /// Structural checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        let schema = |pointer: String, detail: String| Err(Error::Schema { pointer, detail });
        if self.version != MANIFEST_VERSION {
            return schema("/version".into(), format!("unsupported version {}", self.version));
        }
        if self.resolution < crate::image::MIN_SIDE {
            return schema("/resolution".into(), format!("resolution {} too small", self.resolution));
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if !ids.insert(p.pair_id.as_str()) {
                return schema(format!("/pairs/{i}/pair_id"), format!("duplicate pair id {}", p.pair_id));
            }
            if let Some(v) = p.iou {
                if !(0.0..=1.0).contains(&v) {
                    return schema(format!("/pairs/{i}/iou"), format!("iou {v} outside [0, 1]"));
                }
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, list) in &self.splits {
            for (j, id) in list.iter().enumerate() {
                if !ids.contains(id.as_str()) {
                    return schema(format!("/splits/{name}/{j}"), format!("unknown pair id {id}"));
                }
                if let Some(other) = seen.insert(id, name) {
                    return schema(format!("/splits/{name}/{j}"), format!("pair {id} also in split {other}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes via a temporary file and rename so readers never see partial output.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn record(&self, pair_id: &str) -> Option<&PairRecord> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_pair(&self, rec: &PairRecord) -> Result<AlignedPair> {
        let glyph = GrayImage::load_png(self.resolve(&rec.glyph_path))?;
        let style = GrayImage::load_png(self.resolve(&rec.style_path))?;
        glyph.check_resolution(self.resolution)?;
        style.check_resolution(self.resolution)?;
        Ok(AlignedPair {
            pair_id: rec.pair_id.clone(),
            class_id: rec.class_id,
            glyph,
            style,
            noise_type: rec.noise_type,
            iou: rec.iou,
        })
    }

    /// Records of a split, in split order.
    pub fn split_records(&self, split: &str) -> Vec<&PairRecord> {
        let index: BTreeMap<&str, &PairRecord> = self.pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
        self.splits
            .get(split)
            .map(|ids| ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect())
            .unwrap_or_default()
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<AlignedPair>> {
        self.split_records(split).into_iter().map(|r| self.load_pair(r)).collect()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.pairs.iter().map(|p| p.class_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn refresh_stats(&mut self) {
        let mut per_class = BTreeMap::new();
        for p in &self.pairs {
            *per_class.entry(p.class_id).or_insert(0) += 1;
        }
        let ious: Vec<f64> = self.pairs.iter().filter_map(|p| p.iou).collect();
        let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
        self.stats = Some(ManifestStats { per_class, mean_iou });
    }

    /// Runs the IoU gate over every pair, recording each IoU in the manifest.
    pub fn run_quality_gate(&mut self, threshold: f64) -> Result<Vec<QcRow>> {
        let mut rows = Vec::with_capacity(self.pairs.len());
        for i in 0..self.pairs.len() {
            let mut pair = self.load_pair(&self.pairs[i])?;
            let d = quality_gate(&mut pair, threshold, self.mask_threshold)?;
            self.pairs[i].iou = Some(d.iou());
            rows.push(QcRow {
                pair_id: pair.pair_id,
                class_id: pair.class_id,
                iou: d.iou(),
                decision: if d.accepted() { "accept" } else { "reject" }.to_string(),
            });
        }
        self.refresh_stats();
        Ok(rows)
    }

    /// Pairs that have not failed the gate (unchecked pairs count as eligible).
    pub fn eligible(&self, gate: f64) -> impl Iterator<Item = &PairRecord> {
        self.pairs.iter().filter(move |p| p.iou.is_none_or(|v| v >= gate))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub pair_id: String,
    pub class_id: u32,
    pub iou: f64,
    pub decision: String,
}

impl QcRow {
    pub fn decision(&self) -> GateDecision {
        if self.decision == "accept" { GateDecision::Accept(self.iou) } else { GateDecision::Reject(self.iou) }
    }
}

/// CSV with header `pair_id,class_id,iou,decision`.
pub fn write_qc_csv<W: std::io::Write>(rows: &[QcRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_ratio: f64,
    pub seed: u64,
    /// Classes held out entirely for the test split.
    pub test_classes: Vec<u32>,
    /// Pairs whose recorded IoU falls below this are left out of every split.
    pub gate_threshold: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_ratio: 0.8, seed: 0, test_classes: Vec::new(), gate_threshold: DEFAULT_GATE_THRESHOLD }
    }
}

/// Per-class stratified shuffle: `floor(n * train_ratio)` to train, the rest
/// to val; held-out classes go wholly to test.
pub fn split_dataset(manifest: &DatasetManifest, config: &SplitConfig) -> Result<DatasetManifest> {
    if !(config.train_ratio > 0.0 && config.train_ratio < 1.0) {
        return Err(invalid(format!("train ratio {} not in (0, 1)", config.train_ratio)));
    }
    let mut by_class: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for p in manifest.eligible(config.gate_threshold) {
        by_class.entry(p.class_id).or_default().push(&p.pair_id);
    }
    let mut train = BTreeSet::new();
    let mut val = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (&class, ids) in &by_class {
        if config.test_classes.contains(&class) {
            test.extend(ids.iter().copied());
            continue;
        }
        if ids.len() < MIN_PAIRS_PER_CLASS {
            return Err(invalid(format!(
                "class {class} has {} eligible pairs, needs at least {MIN_PAIRS_PER_CLASS}",
                ids.len()
            )));
        }
        let mut shuffled = ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        shuffled.shuffle(&mut rng);
        let n_train = (shuffled.len() as f64 * config.train_ratio).floor() as usize;
        train.extend(shuffled[..n_train].iter().copied());
        val.extend(shuffled[n_train..].iter().copied());
    }
    let in_order = |set: &BTreeSet<&str>| -> Vec<String> {
        manifest.pairs.iter().filter(|p| set.contains(p.pair_id.as_str())).map(|p| p.pair_id.clone()).collect()
    };
    let mut out = manifest.clone();
    out.splits = BTreeMap::from([
        ("train".to_string(), in_order(&train)),
        ("val".to_string(), in_order(&val)),
        ("test".to_string(), in_order(&test)),
    ]);
    out.seed = config.seed;
    out.refresh_stats();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fake(classes: &[(u32, usize)]) -> DatasetManifest {
        let mut pairs = Vec::new();
        for &(c, n) in classes {
            for i in 0..n {
                let id = format!("c{c}_{i}");
                pairs.push(PairRecord {
                    pair_id: id.clone(),
                    class_id: c,
                    glyph_path: format!("g/{id}.png"),
                    style_path: format!("s/{id}.png"),
                    noise_type: NoiseType::ALL[i % 4],
                    iou: None,
                });
            }
        }
        DatasetManifest {
            version: 1,
            resolution: 64,
            seed: 0,
            mask_threshold: 0.5,
            pairs,
            splits: BTreeMap::new(),
            stats: None,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn sixty_pairs_split_48_12() {
        let m = fake(&[(0, 60)]);
        let s = split_dataset(&m, &SplitConfig::default()).unwrap();
        assert_eq!(s.splits["train"].len(), 48);
        assert_eq!(s.splits["val"].len(), 12);
        assert!(s.splits["test"].is_empty());
    }

    #[test]
    fn small_class_is_named() {
        let m = fake(&[(0, 10), (7, 4)]);
        match split_dataset(&m, &SplitConfig::default()) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("class 7"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn held_out_classes_form_test_split() {
        let m = fake(&[(0, 10), (1, 10), (2, 3)]);
        let cfg = SplitConfig { test_classes: vec![2], ..Default::default() };
        let s = split_dataset(&m, &cfg).unwrap();
        assert_eq!(s.splits["test"].len(), 3);
        let test_ids: BTreeSet<_> = s.splits["test"].iter().collect();
        for id in s.splits["train"].iter().chain(&s.splits["val"]) {
            assert!(!test_ids.contains(id));
            assert_ne!(s.record(id).unwrap().class_id, 2);
        }
    }

    #[test]
    fn rejected_pairs_are_excluded() {
        let mut m = fake(&[(0, 10)]);
        m.pairs[0].iou = Some(0.5);
        m.pairs[1].iou = Some(0.9);
        let s = split_dataset(&m, &SplitConfig::default()).unwrap();
        let all: Vec<_> = s.splits.values().flatten().collect();
        assert_eq!(all.len(), 9);
        assert!(!all.contains(&&"c0_0".to_string()));
    }

    #[test]
    fn schema_errors_carry_pointer() {
        let text = r#"{"version":1,"resolution":64,"seed":1,"pairs":[
            {"pair_id":"a","class_id":0,"glyph_path":"g","style_path":"s","noise_type":"edges","iou":null},
            {"pair_id":"b","class_id":"x","glyph_path":"g","style_path":"s","noise_type":"edges","iou":null}],
            "splits":{}}"#;
        match DatasetManifest::from_json(text, Path::new(".")) {
            Err(Error::Schema { pointer, .. }) => assert_eq!(pointer, "/pairs/1/class_id"),
            other => panic!("unexpected {other:?}"),
        }
        let dup = r#"{"version":1,"resolution":64,"seed":1,"pairs":[
            {"pair_id":"a","class_id":0,"glyph_path":"g","style_path":"s","noise_type":"edges","iou":null}],
            "splits":{"train":["a"],"val":["a"]}}"#;
        assert!(matches!(DatasetManifest::from_json(dup, Path::new(".")), Err(Error::Schema { .. })));
    }

    #[test]
    fn json_roundtrip() {
        let m = split_dataset(&fake(&[(0, 6), (1, 7)]), &SplitConfig::default()).unwrap();
        let back = DatasetManifest::from_json(&m.to_json().unwrap(), Path::new("")).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn split_invariants(counts in prop::collection::vec(5usize..40, 1..6), seed in any::<u64>()) {
            let classes: Vec<(u32, usize)> = counts.iter().enumerate().map(|(c, &n)| (c as u32, n)).collect();
            let m = fake(&classes);
            let cfg = SplitConfig { seed, ..Default::default() };
            let a = split_dataset(&m, &cfg).unwrap();
            let b = split_dataset(&m, &cfg).unwrap();
            prop_assert_eq!(&a.splits, &b.splits);
            let mut all = BTreeSet::new();
            for ids in a.splits.values() {
                for id in ids {
                    prop_assert!(all.insert(id.clone()));
                }
            }
            prop_assert_eq!(all.len(), m.pairs.len());
            for &(c, n) in &classes {
                let tr = a.splits["train"].iter().filter(|id| a.record(id).unwrap().class_id == c).count();
                prop_assert!((tr as f64 - 0.8 * n as f64).abs() <= 1.0);
            }
        }
    }
}
