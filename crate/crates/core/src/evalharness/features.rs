use crate::error::Result;
use crate::image::GrayImage;
use serde::{Deserialize, Serialize};

/// Low-level image statistics. Brightness and contrast are the mean and
/// population standard deviation of intensity. Sharpness is the variance of
/// the 4-neighbour Laplacian and SI the standard deviation of the Sobel
/// gradient magnitude, both over interior pixels where the 3×3 operator fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub brightness: f64,
    pub contrast: f64,
    pub sharpness: f64,
    pub si: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

pub fn feature_stats(img: &GrayImage) -> FeatureStats {
    let (w, h) = (img.width(), img.height());
    let px: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let at = |r: usize, c: usize| px[r * w + c];
    let (brightness, contrast) = mean_std(&px);
    let mut lap = Vec::with_capacity((w - 2) * (h - 2));
    let mut grad = Vec::with_capacity((w - 2) * (h - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            lap.push(at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c));
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            grad.push((gx * gx + gy * gy).sqrt());
        }
    }
    let (_, lap_std) = mean_std(&lap);
    let (_, si) = mean_std(&grad);
    FeatureStats { brightness, contrast, sharpness: lap_std * lap_std, si }
}

/// Feature CSV: image,brightness,contrast,sharpness,si.
pub fn write_feature_csv<W: std::io::Write>(rows: &[(String, FeatureStats)], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["image", "brightness", "contrast", "sharpness", "si"])?;
    for (name, f) in rows {
        wr.write_record([
            name.clone(),
            f.brightness.to_string(),
            f.contrast.to_string(),
            f.sharpness.to_string(),
            f.si.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_structure() {
        let f = feature_stats(&GrayImage::filled(16, 16, 0.5).unwrap());
        assert_eq!(f, FeatureStats { brightness: 0.5, contrast: 0.0, sharpness: 0.0, si: 0.0 });
    }

    #[test]
    fn checkerboard_matches_direct_evaluation() {
        let px: Vec<f32> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f32).collect();
        let f = feature_stats(&GrayImage::new(8, 8, px).unwrap());
        assert_eq!(f.brightness, 0.5);
        assert_eq!(f.contrast, 0.5);
        // Laplacian is +4 on dark and -4 on bright interior pixels, equally
        // often, so its variance is 16. Sobel responses cancel exactly.
        assert_eq!(f.sharpness, 16.0);
        assert_eq!(f.si, 0.0);
    }

    #[test]
    fn ramp_brightness() {
        let px: Vec<f32> = (0..32 * 32).map(|i| (i % 32) as f32 / 31.0).collect();
        let f = feature_stats(&GrayImage::new(32, 32, px).unwrap());
        assert!((f.brightness - 0.5).abs() < 1e-6);
        assert!(f.si > 0.0);
    }
}
