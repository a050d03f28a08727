use super::model::{ConditionedDenoiser, PIXEL_HI, PIXEL_LO};
use super::schedule::NoiseSchedule;
use crate::datapipe::{mask_style, DEFAULT_MASK_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::{Mode, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// Ancestral sampling over `steps` strided timesteps for a batch. Item `i`
/// draws all of its noise from a generator seeded with `seeds[i]`, so an
/// output does not depend on what else is in the batch.
pub fn sample_batch<T: Scalar>(
    model: &mut ConditionedDenoiser<T>,
    glyphs: &[&GrayImage],
    styles_masked: &[&GrayImage],
    sched: &NoiseSchedule,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<GrayImage>> {
    let n = glyphs.len();
    if n == 0 || styles_masked.len() != n || seeds.len() != n {
        return Err(invalid(format!("{n} glyphs, {} styles, {} seeds", styles_masked.len(), seeds.len())));
    }
    if !model.params_finite() {
        return Err(Error::ModelState("model parameters are not finite".into()));
    }
    let r = model.config.resolution;
    for img in glyphs.iter().chain(styles_masked) {
        img.check_resolution(r)?;
    }
    let ts = sched.strided(steps)?;
    let tau_g = model.glyph_encode(&GrayImage::batch(glyphs, PIXEL_LO, PIXEL_HI), Mode::Eval)?;
    let tau_s = model.style_encode(&GrayImage::batch(styles_masked, PIXEL_LO, PIXEL_HI), Mode::Eval)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let plane = r * r;
    let mut x = Tensor::<T>::zeros(&[n, 1, r, r]);
    for (i, rng) in rngs.iter_mut().enumerate() {
        x.item_mut(i).copy_from_slice(Tensor::<T>::randn(&[plane], rng).data());
    }
    let mut x0_hat = x.clone();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = model.predict_noise(&x, &vec![t; n], &tau_g, &tau_s, Mode::Eval)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (ab / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for i in 0..n {
            let noise = (t_prev > 0).then(|| Tensor::<T>::randn(&[plane], &mut rngs[i]));
            let xi = x.item_mut(i);
            let ei = eps.item(i);
            let x0i = x0_hat.item_mut(i);
            for j in 0..plane {
                let xt = xi[j].to_f64().unwrap();
                let pred = ((xt - (1.0 - ab).sqrt() * ei[j].to_f64().unwrap()) / ab.sqrt()).clamp(PIXEL_LO, PIXEL_HI);
                x0i[j] = T::from_f64(pred).unwrap();
                let mut next = c0 * pred + ct * xt;
                if let Some(z) = &noise {
                    next += sigma * z.data()[j].to_f64().unwrap();
                }
                xi[j] = T::from_f64(next).unwrap();
            }
        }
        if !x.is_finite() {
            return Err(Error::ModelState(format!("sampling produced non-finite values at t = {t}")));
        }
    }
    (0..n).map(|i| GrayImage::from_tensor(&x0_hat, i, PIXEL_LO, PIXEL_HI)).collect()
}

pub fn sample<T: Scalar>(
    model: &mut ConditionedDenoiser<T>,
    x_g: &GrayImage,
    x_s_masked: &GrayImage,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<GrayImage> {
    Ok(sample_batch(model, &[x_g], &[x_s_masked], sched, steps, &[seed])?.remove(0))
}

/// Style transfer with unaligned inputs: masks the style image (dual masking
/// unions the glyph and style boxes) and samples.
#[allow(clippy::too_many_arguments)]
pub fn generate_personalized_batch<T: Scalar>(
    model: &mut ConditionedDenoiser<T>,
    glyphs: &[&GrayImage],
    styles_raw: &[&GrayImage],
    dual: bool,
    sched: &NoiseSchedule,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<GrayImage>> {
    if glyphs.len() != styles_raw.len() {
        return Err(invalid("glyph and style counts differ"));
    }
    let masked = glyphs
        .iter()
        .zip(styles_raw)
        .map(|(g, s)| mask_style(s, g, dual, DEFAULT_MASK_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&GrayImage> = masked.iter().collect();
    sample_batch(model, glyphs, &refs, sched, steps, seeds)
}

pub fn generate_personalized<T: Scalar>(
    model: &mut ConditionedDenoiser<T>,
    x_g: &GrayImage,
    x_s_raw: &GrayImage,
    dual: bool,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<GrayImage> {
    Ok(generate_personalized_batch(model, &[x_g], &[x_s_raw], dual, sched, steps, &[seed])?.remove(0))
}

/// One line of a batch generation request file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub glyph_path: PathBuf,
    pub style_path: PathBuf,
    pub out_path: PathBuf,
    pub seed: u64,
    #[serde(default = "default_dual")]
    pub dual_mask: bool,
}

fn default_dual() -> bool {
    true
}

/// Parses JSONL requests; blank lines are skipped and errors name the line.
pub fn parse_requests(text: &str) -> Result<Vec<GenerationRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let de = &mut serde_json::Deserializer::from_str(l);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
                pointer: format!("line {}{}", i + 1, pointer_of(e.path())),
                detail: e.inner().to_string(),
            })
        })
        .collect()
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." { String::new() } else { format!(" /{}", s.replace('.', "/")) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DiffusionConfig};
    use crate::datapipe::synth_glyph;

    fn model() -> ConditionedDenoiser<f32> {
        let cfg = DiffusionConfig {
            resolution: 32,
            style_grid: 4,
            base_channels: 8,
            channel_mult: vec![1, 2],
            attn_levels: vec![1],
            ..DiffusionConfig::default()
        };
        ConditionedDenoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_clamped() {
        let mut m = model();
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let g = synth_glyph(2, 1, 32).unwrap();
        let s = GrayImage::filled(32, 32, 0.0).unwrap();
        let a = sample(&mut m, &g, &s, &sched, 10, 42).unwrap();
        let b = sample(&mut m, &g, &s, &sched, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (32, 32));
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let batch = sample_batch(&mut m, &[&g, &g], &[&s, &s], &sched, 10, &[7, 42]).unwrap();
        assert_eq!(batch[1], a);
        assert!(sample(&mut m, &g, &s, &sched, 1001, 1).is_err());
    }

    #[test]
    fn nan_parameters_are_a_model_state_error() {
        let mut m = model();
        m.backbone.conv_out.bias.value[0] = f32::NAN;
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let g = synth_glyph(0, 1, 32).unwrap();
        let err = sample(&mut m, &g, &g, &sched, 5, 0).unwrap_err();
        assert!(matches!(err, Error::ModelState(_)));
    }

    #[test]
    fn personalized_generation_needs_a_glyph() {
        let mut m = model();
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let black = GrayImage::filled(32, 32, 0.0).unwrap();
        let g = synth_glyph(0, 1, 32).unwrap();
        assert!(matches!(generate_personalized(&mut m, &black, &g, true, &sched, 5, 0), Err(Error::EmptyGlyph)));
        assert!(generate_personalized(&mut m, &g, &black, true, &sched, 5, 0).is_ok());
    }

    #[test]
    fn request_lines_parse_with_defaults() {
        let text = r#"{"glyph_path":"g.png","style_path":"s.png","out_path":"o.png","seed":3}

{"glyph_path":"g.png","style_path":"s.png","out_path":"o2.png","seed":4,"dual_mask":false}"#;
        let reqs = parse_requests(text).unwrap();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[0].dual_mask);
        assert!(!reqs[1].dual_mask);
        let err = parse_requests(r#"{"glyph_path":"g","style_path":"s","out_path":"o","seed":"x"}"#).unwrap_err();
        match err {
            Error::Schema { pointer, .. } => assert_eq!(pointer, "line 1 /seed"),
            e => panic!("{e}"),
        }
    }
}
