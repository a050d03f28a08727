//! Measurement: pair metrics, the classifier-feature Fréchet proxy,
//! recognition accuracy, low-level feature statistics, the augmentation
//! experiment, and the human-study scorer.

mod augment;
mod classifier;
mod features;
mod fid;
mod metrics;
mod study;

pub use augment::*;
pub use classifier::*;
pub use features::*;
pub use fid::frechet_distance;
pub use metrics::*;
pub use study::*;

use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

/// Fréchet distance between the classifier's penultimate features of two
/// image sets.
pub fn fid_proxy<T: Scalar>(set_a: &[&GrayImage], set_b: &[&GrayImage], extractor: &mut Classifier<T>) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(invalid("image sets must be non-empty"));
    }
    let fa = extractor.features(set_a)?;
    let fb = extractor.features(set_b)?;
    frechet_distance(&fa, &fb)
}
