use crate::error::{invalid, Result};
use crate::image::GrayImage;
use serde::{Deserialize, Serialize};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// (K1·L)² and (K2·L)² with L = 1.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub l1: f64,
    pub rmse: f64,
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn pair_metrics(a: &GrayImage, b: &GrayImage) -> Result<PairMetrics> {
    if !a.same_dims(b) {
        return Err(invalid(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let n = a.pixels().len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let d = x as f64 - y as f64;
        abs += d.abs();
        sq += d * d;
    }
    let mse = sq / n;
    Ok(PairMetrics { l1: abs / n, rmse: mse.sqrt(), psnr: psnr_from_mse(mse), ssim: ssim(a, b)? })
}

/// PSNR with MAX = 1 on normalized intensities.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing where taps falling outside the image are
/// dropped and the remaining weights renormalized.
fn smooth(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for row in 0..h {
            for col in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &tap) in taps.iter().enumerate() {
                    let (rr, cc) = if horizontal {
                        (row as isize, col as isize + k as isize - r as isize)
                    } else {
                        (row as isize + k as isize - r as isize, col as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += tap * src[rr as usize * w + cc as usize];
                        norm += tap;
                    }
                }
                out[row * w + col] = acc / norm;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Mean SSIM over all pixels with an 11×11 Gaussian window (σ = 1.5)
/// truncated at the image border.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(invalid("images differ in size"));
    }
    let (w, h) = (a.width(), a.height());
    let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = smooth(&x, w, h, &taps);
    let my = smooth(&y, w, h, &taps);
    let mxx = smooth(&prod(&x, &x), w, h, &taps);
    let myy = smooth(&prod(&y, &y), w, h, &taps);
    let mxy = smooth(&prod(&x, &y), w, h, &taps);
    let mut total = 0.0;
    for i in 0..w * h {
        let vx = mxx[i] - mx[i] * mx[i];
        let vy = myy[i] - my[i] * my[i];
        let cxy = mxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / (w * h) as f64)
}

/// Rows of the metrics CSV: image_a,image_b,l1,rmse,psnr,ssim.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[(String, String, PairMetrics)], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["image_a", "image_b", "l1", "rmse", "psnr", "ssim"])?;
    for (a, b, m) in rows {
        wr.write_record([a.clone(), b.clone(), m.l1.to_string(), m.rmse.to_string(), m.psnr.to_string(), m.ssim.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = GrayImage::new(16, 16, (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let m = pair_metrics(&a, &a).unwrap();
        assert_eq!((m.l1, m.rmse), (0.0, 0.0));
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_psnr_fixtures() {
        let zero = GrayImage::filled(8, 8, 0.0).unwrap();
        let one = GrayImage::filled(8, 8, 1.0).unwrap();
        assert_eq!(pair_metrics(&zero, &one).unwrap().psnr, 0.0);
        let step = GrayImage::filled(8, 8, 1.0 / 255.0).unwrap();
        let p = pair_metrics(&zero, &step).unwrap().psnr;
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-5, "{p}");
        assert!((p - 48.13).abs() < 0.005);
    }

    #[test]
    fn size_mismatch() {
        let a = GrayImage::filled(8, 8, 0.0).unwrap();
        let b = GrayImage::filled(8, 9, 0.0).unwrap();
        assert!(pair_metrics(&a, &b).is_err());
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
        assert!(t[5] > t[4]);
    }
}
