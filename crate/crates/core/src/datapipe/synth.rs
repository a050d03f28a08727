//! Procedural stand-in for hand-written glyphs and their noisy rubbings.

use super::{glyph_mask, DatasetManifest, NoiseType, PairRecord, DEFAULT_MASK_THRESHOLD, MANIFEST_VERSION};
use crate::error::{invalid, Result};
use crate::image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Brush width relative to the image side (7 px at 128).
const STROKE_WIDTH: f64 = 7.0 / 128.0;
const MIN_SYNTH_RESOLUTION: usize = 32;

type Point = (f64, f64);

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(strokes: &[Vec<Point>], resolution: usize) -> Vec<f32> {
    let half = STROKE_WIDTH / 2.0;
    let mut px = vec![0.0f32; resolution * resolution];
    for r in 0..resolution {
        for c in 0..resolution {
            let p = ((c as f64 + 0.5) / resolution as f64, (r as f64 + 0.5) / resolution as f64);
            let hit = strokes.iter().any(|s| s.windows(2).any(|w| seg_dist(p, w[0], w[1]) <= half));
            if hit {
                px[r * resolution + c] = 1.0;
            }
        }
    }
    px
}

fn clip(p: Point) -> Point {
    (p.0.clamp(0.12, 0.88), p.1.clamp(0.12, 0.88))
}

/// Fixed stroke skeleton of a class, in normalized coordinates.
fn class_template(class_id: u32) -> Vec<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(0x0B1_D1FF, class_id as u64));
    loop {
        let n = rng.gen_range(3..=5);
        let strokes: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                let start = (rng.gen_range(0.18..0.82), rng.gen_range(0.18..0.82));
                let base = (rng.gen_range(0..4) as f64) * std::f64::consts::FRAC_PI_4;
                let ang = base + rng.gen_range(-0.25..0.25);
                let len = rng.gen_range(0.22..0.5);
                let mid = clip((start.0 + len * ang.cos(), start.1 + len * ang.sin()));
                let mut pts = vec![start, mid];
                if rng.gen_bool(0.5) {
                    let bend = ang + rng.gen_range(-0.9..0.9);
                    let len2 = rng.gen_range(0.12..0.3);
                    pts.push(clip((mid.0 + len2 * bend.cos(), mid.1 + len2 * bend.sin())));
                }
                pts
            })
            .collect();
        let px = render(&strokes, 64);
        let frac = px.iter().filter(|&&v| v > 0.5).count() as f64 / px.len() as f64;
        if (0.05..=0.15).contains(&frac) {
            return strokes;
        }
    }
}

/// Renders a class glyph with seed-dependent jitter: white strokes on black.
pub fn synth_glyph(class_id: u32, seed: u64, resolution: usize) -> Result<GrayImage> {
    if resolution < MIN_SYNTH_RESOLUTION {
        return Err(invalid(format!("resolution {resolution} below {MIN_SYNTH_RESOLUTION}")));
    }
    let template = class_template(class_id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, class_id as u64), 0x61_7970));
    let scale = rng.gen_range(0.95..1.05);
    let shift = (rng.gen_range(-0.025..0.025), rng.gen_range(-0.025..0.025));
    let strokes: Vec<Vec<Point>> = template
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| {
                    let jx = rng.gen_range(-0.012..0.012);
                    let jy = rng.gen_range(-0.012..0.012);
                    clip((0.5 + (x - 0.5) * scale + shift.0 + jx, 0.5 + (y - 0.5) * scale + shift.1 + jy))
                })
                .collect()
        })
        .collect();
    GrayImage::new(resolution, resolution, render(&strokes, resolution))
}

/// Smooth value noise in [0, 1] on an `n x n` image.
fn value_noise(n: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let fy = r as f64 / n as f64 * cells as f64;
            let fx = c as f64 / n as f64 * cells as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |y: usize, x: usize| g[y * (cells + 1) + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * n + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Degrades a clean glyph into a rubbing-like style image of the given noise type.
pub fn synth_noise(glyph: &GrayImage, noise_type: NoiseType, seed: u64) -> Result<GrayImage> {
    let (w, h) = (glyph.width(), glyph.height());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x4E_0153 + noise_type.index() as u64));
    let support: Vec<bool> = glyph_mask(glyph, DEFAULT_MASK_THRESHOLD)?.bits().to_vec();
    let glyph_count = support.iter().filter(|&&b| b).count();
    let side = w.max(h);
    let tex = value_noise(side, 8, &mut rng);
    let background: Vec<f32> = (0..w * h)
        .map(|i| (0.04 + 0.12 * tex[(i / w) * side + i % w] + rng.gen_range(-0.03..0.03)) as f32)
        .collect();
    let mut out: Vec<f32> = (0..w * h)
        .map(|i| if support[i] { 1.0 - rng.gen_range(0.0..0.1f32) } else { background[i] })
        .collect();
    let bright = |v: f32| v > DEFAULT_MASK_THRESHOLD;
    let in_bounds = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;

    match noise_type {
        NoiseType::StrokeBroken => {
            let target = 0.1 + 0.3 * rng.gen::<f64>().powi(3);
            let (lo, hi) = ((0.1 * glyph_count as f64).ceil() as usize, (0.4 * glyph_count as f64) as usize);
            let goal = ((target * glyph_count as f64).round() as usize).clamp(lo, hi.max(lo));
            let radius = (side as f64 * STROKE_WIDTH * rng.gen_range(0.5..0.9)).max(1.2);
            let reach = radius.ceil() as isize;
            let stroke_px: Vec<usize> = (0..w * h).filter(|&i| support[i]).collect();
            let mut erased = vec![false; w * h];
            let mut n_erased = 0usize;
            for _ in 0..4 * stroke_px.len().max(1) {
                if n_erased >= goal || stroke_px.is_empty() {
                    break;
                }
                let &centre = stroke_px.choose(&mut rng).unwrap();
                if erased[centre] {
                    continue;
                }
                let (cr, cc) = ((centre / w) as isize, (centre % w) as isize);
                let mut disk = Vec::new();
                for dr in -reach..=reach {
                    for dc in -reach..=reach {
                        let (r, c) = (cr + dr, cc + dc);
                        if in_bounds(r, c) && ((dr * dr + dc * dc) as f64).sqrt() <= radius {
                            let i = r as usize * w + c as usize;
                            if support[i] && !erased[i] {
                                disk.push(i);
                            }
                        }
                    }
                }
                if n_erased + disk.len() > hi.max(1) {
                    continue;
                }
                for i in disk {
                    erased[i] = true;
                    n_erased += 1;
                }
            }
            for i in 0..w * h {
                if erased[i] {
                    out[i] = background[i];
                }
            }
        }
        NoiseType::BoneCracked => {
            let cracks = rng.gen_range(1..=3);
            for _ in 0..cracks {
                let horizontal = rng.gen_bool(0.5);
                let (mut r, mut c, main) = if horizontal {
                    (rng.gen_range(0.0..h as f64), 0.0, if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI })
                } else {
                    (0.0, rng.gen_range(0.0..w as f64), std::f64::consts::FRAC_PI_2)
                };
                if main == std::f64::consts::PI {
                    c = w as f64 - 1.0;
                }
                let mut dir = main + rng.gen_range(-0.4..0.4);
                let thick = rng.gen_bool(0.15);
                for _ in 0..4 * side {
                    let (ri, ci) = (r.round() as isize, c.round() as isize);
                    if !in_bounds(ri, ci) {
                        break;
                    }
                    let v = rng.gen_range(0.3..0.72f32);
                    let i = ri as usize * w + ci as usize;
                    out[i] = out[i].max(v);
                    if thick && in_bounds(ri + 1, ci) {
                        let j = (ri as usize + 1) * w + ci as usize;
                        out[j] = out[j].max(v);
                    }
                    dir += rng.gen_range(-0.35..0.35) + 0.15 * (main - dir);
                    r += dir.sin();
                    c += dir.cos();
                }
            }
        }
        NoiseType::Edges => {
            let target = rng.gen_range(0.10..0.30);
            let mut sides = [0usize, 1, 2, 3];
            sides.shuffle(&mut rng);
            let n_sides = if rng.gen_bool(0.7) { 1 } else { 2 };
            let wobble = value_noise(side, 4, &mut rng);
            // distance to the nearest chosen side, scaled by a wobbly depth
            let dist = |r: usize, c: usize| -> f64 {
                sides[..n_sides]
                    .iter()
                    .map(|&s| match s {
                        0 => r as f64,
                        1 => (h - 1 - r) as f64,
                        2 => c as f64,
                        _ => (w - 1 - c) as f64,
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let mut depth = 1.0;
            loop {
                let covered = (0..w * h)
                    .filter(|&i| dist(i / w, i % w) < depth * (0.8 + 0.4 * wobble[(i / w) * side + i % w]))
                    .count();
                if covered as f64 >= target * (w * h) as f64 || depth > side as f64 {
                    break;
                }
                depth += 0.5;
            }
            for i in 0..w * h {
                let local = depth * (0.8 + 0.4 * wobble[(i / w) * side + i % w]);
                let d = dist(i / w, i % w);
                if d < local {
                    let v = 0.2 + 0.33 * (1.0 - d / local).powi(6) + rng.gen_range(-0.06..0.06);
                    out[i] = out[i].max(v as f32);
                }
            }
        }
        NoiseType::DenseWhiteRegions => {
            let bg_count = w * h - glyph_count;
            let target = rng.gen_range(0.05..0.25) * bg_count as f64;
            let mut covered = vec![false; w * h];
            let mut n_cov = 0usize;
            for _ in 0..500 {
                if n_cov as f64 >= target {
                    break;
                }
                let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let (ry, rx) = (side as f64 * rng.gen_range(0.04..0.10), side as f64 * rng.gen_range(0.04..0.10));
                for r in 0..h {
                    for c in 0..w {
                        let i = r * w + c;
                        let e = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
                        if e <= 1.0 && !support[i] && !covered[i] {
                            covered[i] = true;
                            n_cov += 1;
                            out[i] = if rng.gen_bool(0.08) { rng.gen_range(0.55..0.95) } else { rng.gen_range(0.25..0.48) };
                        }
                    }
                }
            }
        }
    }

    if noise_type != NoiseType::StrokeBroken {
        // Keep the glyph-mask IoU of the result at or above 1 / 1.8.
        let mut added: Vec<usize> = (0..w * h).filter(|&i| !support[i] && bright(out[i])).collect();
        let limit = (0.8 * glyph_count as f64) as usize;
        if added.len() > limit {
            added.shuffle(&mut rng);
            for &i in &added[limit..] {
                out[i] = rng.gen_range(0.3..0.45);
            }
        }
    }
    GrayImage::from_clamped(w, h, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: u32,
    pub per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { classes: 8, per_class: 60, resolution: 64, seed: 0 }
    }
}

/// Writes glyph and style PNGs plus `manifest.json` under `out_dir`. Noise
/// types cycle within each class so every class carries all four.
pub fn synth_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.classes == 0 || config.per_class == 0 {
        return Err(invalid("synthetic dataset needs at least one class and one pair per class"));
    }
    std::fs::create_dir_all(out_dir.join("glyphs"))?;
    std::fs::create_dir_all(out_dir.join("styles"))?;
    let mut pairs = Vec::with_capacity(config.classes as usize * config.per_class);
    for class_id in 0..config.classes {
        for i in 0..config.per_class {
            let pair_seed = mix(mix(config.seed, class_id as u64), i as u64);
            let noise_type = NoiseType::ALL[i % 4];
            let glyph = synth_glyph(class_id, pair_seed, config.resolution)?;
            let style = synth_noise(&glyph, noise_type, pair_seed)?;
            let pair_id = format!("c{class_id:03}_{i:04}");
            let glyph_path = format!("glyphs/{pair_id}.png");
            let style_path = format!("styles/{pair_id}.png");
            glyph.save_png(out_dir.join(&glyph_path))?;
            style.save_png(out_dir.join(&style_path))?;
            pairs.push(PairRecord { pair_id, class_id, glyph_path, style_path, noise_type, iou: None });
        }
    }
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution: config.resolution,
        seed: config.seed,
        mask_threshold: DEFAULT_MASK_THRESHOLD,
        pairs,
        splits: BTreeMap::new(),
        stats: None,
        root: out_dir.to_path_buf(),
    };
    manifest.refresh_stats();
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{image_iou, iou};

    fn white_fraction(img: &GrayImage) -> f64 {
        img.pixels().iter().filter(|&&v| v > 0.5).count() as f64 / img.pixels().len() as f64
    }

    #[test]
    fn glyph_is_deterministic() {
        assert_eq!(synth_glyph(0, 7, 128).unwrap(), synth_glyph(0, 7, 128).unwrap());
        assert!(synth_glyph(0, 7, 16).is_err());
    }

    #[test]
    fn glyph_values_are_binary_and_in_range() {
        for class in 0..12 {
            for seed in 0..6 {
                for res in [32, 64, 128] {
                    let g = synth_glyph(class, seed, res).unwrap();
                    assert!(g.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
                    let f = white_fraction(&g);
                    assert!((0.02..=0.20).contains(&f), "class {class} seed {seed} res {res}: {f}");
                }
            }
        }
    }

    #[test]
    fn classes_are_distinct() {
        let a = synth_glyph(0, 7, 128).unwrap();
        let b = synth_glyph(1, 7, 128).unwrap();
        assert!(image_iou(&a, &b, 0.5).unwrap() < 0.5);
        // Whole template library used by the desk configurations.
        let lib: Vec<GrayImage> = (0..16).map(|c| synth_glyph(c, 7, 64).unwrap()).collect();
        for i in 0..lib.len() {
            for j in i + 1..lib.len() {
                let v = image_iou(&lib[i], &lib[j], 0.5).unwrap();
                assert!(v < 0.5, "classes {i} and {j}: iou {v}");
            }
        }
        // Same class, different seeds: shared topology, clearly more overlap than across classes.
        let mut within = 0.0;
        for seed in 0..20 {
            within += image_iou(&synth_glyph(3, seed, 64).unwrap(), &synth_glyph(3, seed + 100, 64).unwrap(), 0.5).unwrap();
        }
        assert!(within / 20.0 > 0.4, "mean within-class iou {}", within / 20.0);
    }

    #[test]
    fn noise_examples() {
        let g = synth_glyph(2, 11, 64).unwrap();
        let dwr = synth_noise(&g, NoiseType::DenseWhiteRegions, 3).unwrap();
        let differ = dwr.pixels().iter().zip(g.pixels()).filter(|(a, b)| a != b).count();
        assert!(differ as f64 >= 0.05 * 4096.0);
        assert_eq!(synth_noise(&g, NoiseType::Edges, 5).unwrap(), synth_noise(&g, NoiseType::Edges, 5).unwrap());
    }

    #[test]
    fn noise_contracts_hold_across_seeds() {
        for class in 0..6 {
            for seed in 0..10u64 {
                let g = synth_glyph(class, seed, 64).unwrap();
                let gm = glyph_mask(&g, 0.5).unwrap();
                let g_white = gm.count();
                for nt in NoiseType::ALL {
                    let s = synth_noise(&g, nt, seed * 31 + 1).unwrap();
                    let sm = glyph_mask(&s, 0.5).unwrap();
                    let v = iou(&gm, &sm).unwrap();
                    match nt {
                        NoiseType::StrokeBroken => {
                            let kept = gm.bits().iter().zip(sm.bits()).filter(|(a, b)| **a && **b).count();
                            assert!(kept < g_white);
                            let erased = (g_white - kept) as f64 / g_white as f64;
                            assert!((0.1..=0.4).contains(&erased), "erased fraction {erased}");
                            // nothing brightens inside the stroke support
                            for (i, &inside) in gm.bits().iter().enumerate() {
                                if inside {
                                    assert!(s.pixels()[i] <= g.pixels()[i]);
                                }
                            }
                            // and nothing appears outside it
                            assert!(sm.bits().iter().zip(gm.bits()).all(|(s, g)| !*s || *g));
                        }
                        _ => assert!(v >= 0.5, "{nt} iou {v}"),
                    }
                }
            }
        }
    }
}
