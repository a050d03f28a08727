//! Structure-aligned glyph/style pairs: masks, quality gate, synthesis,
//! manifests and splits.

mod manifest;
mod synth;

pub use manifest::{
    split_dataset, write_qc_csv, DatasetManifest, ManifestStats, PairRecord, QcRow, SplitConfig,
    MANIFEST_VERSION,
};
pub use synth::{synth_dataset, synth_glyph, synth_noise, SynthConfig};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    StrokeBroken,
    BoneCracked,
    Edges,
    DenseWhiteRegions,
}

impl NoiseType {
    pub const ALL: [NoiseType; 4] =
        [NoiseType::StrokeBroken, NoiseType::BoneCracked, NoiseType::Edges, NoiseType::DenseWhiteRegions];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseType::StrokeBroken => "stroke_broken",
            NoiseType::BoneCracked => "bone_cracked",
            NoiseType::Edges => "edges",
            NoiseType::DenseWhiteRegions => "dense_white_regions",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(invalid(format!("{} bits for a {width}x{height} mask", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

/// Inclusive pixel-index box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }
}

/// One glyph/style record. Images are held in memory; the manifest stores paths.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub pair_id: String,
    pub class_id: u32,
    pub glyph: GrayImage,
    pub style: GrayImage,
    pub noise_type: NoiseType,
    pub iou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateDecision {
    Accept(f64),
    Reject(f64),
}

impl GateDecision {
    pub fn iou(self) -> f64 {
        match self {
            GateDecision::Accept(v) | GateDecision::Reject(v) => v,
        }
    }

    pub fn accepted(self) -> bool {
        matches!(self, GateDecision::Accept(_))
    }
}

pub fn invert_glyph(img: &GrayImage) -> GrayImage {
    let px = img.pixels().iter().map(|&v| 1.0 - v).collect();
    GrayImage::new(img.width(), img.height(), px).expect("inversion preserves validity")
}

/// Bit set iff the pixel is strictly brighter than `threshold`.
pub fn glyph_mask(img: &GrayImage, threshold: f32) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("mask threshold {threshold} not in (0, 1)")));
    }
    let bits = img.pixels().iter().map(|&v| v > threshold).collect();
    BinaryMask::new(img.width(), img.height(), bits)
}

/// Intersection over union; two empty masks count as perfectly aligned (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(invalid(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Glyph-mask IoU between two images at a shared threshold.
pub fn image_iou(a: &GrayImage, b: &GrayImage, threshold: f32) -> Result<f64> {
    iou(&glyph_mask(a, threshold)?, &glyph_mask(b, threshold)?)
}

/// Accepts iff the glyph-mask IoU of glyph and style reaches `threshold`;
/// the IoU is recorded on the pair either way.
pub fn quality_gate(pair: &mut AlignedPair, threshold: f64, mask_threshold: f32) -> Result<GateDecision> {
    if !pair.glyph.same_dims(&pair.style) {
        return Err(invalid(format!("pair {} has mismatched image sizes", pair.pair_id)));
    }
    let v = image_iou(&pair.glyph, &pair.style, mask_threshold)?;
    pair.iou = Some(v);
    Ok(if v >= threshold { GateDecision::Accept(v) } else { GateDecision::Reject(v) })
}

pub fn bounding_box(img: &GrayImage, threshold: f32) -> Result<BBox> {
    let mask = glyph_mask(img, threshold)?;
    mask_bbox(&mask).ok_or(Error::EmptyGlyph)
}

pub(crate) fn mask_bbox(mask: &BinaryMask) -> Option<BBox> {
    let mut bb: Option<BBox> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                let b = bb.get_or_insert(BBox { row_min: r, col_min: c, row_max: r, col_max: c });
                b.row_min = b.row_min.min(r);
                b.col_min = b.col_min.min(c);
                b.row_max = b.row_max.max(r);
                b.col_max = b.col_max.max(c);
            }
        }
    }
    bb
}

/// Fill value for masked style pixels (rubbing background is black).
pub const MASK_FILL: f32 = 0.0;

/// Blanks the glyph's bounding box in the style image. With `dual`, the
/// style's own bounding box (when it has bright pixels) is blanked as well.
pub fn mask_style(style: &GrayImage, glyph: &GrayImage, dual: bool, threshold: f32) -> Result<GrayImage> {
    if !style.same_dims(glyph) {
        return Err(invalid("style and glyph dimensions differ"));
    }
    let mut boxes = vec![bounding_box(glyph, threshold)?];
    if dual {
        if let Some(b) = mask_bbox(&glyph_mask(style, threshold)?) {
            boxes.push(b);
        }
    }
    let w = style.width();
    let px = style
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if boxes.iter().any(|b| b.contains(i / w, i % w)) { MASK_FILL } else { v })
        .collect();
    GrayImage::new(w, style.height(), px)
}
