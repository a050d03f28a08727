//! Acceptance suite. Prints one PASS/FAIL line per criterion; exits non-zero
//! if a criterion fails that is not listed in `KNOWN_UNMET`.
//!
//! The ablation criteria train three full desk-scale models, so a full run
//! takes about an hour on one core.

use obidiff::datapipe::*;
use obidiff::denoiser::{denoise_batch, train_denoiser, validation_l1, identity_l1, DenoiserConfig, DenoiserTrainConfig};
use obidiff::diffusion::*;
use obidiff::evalharness::*;
use obidiff::nn::Module;
use obidiff::{GrayImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Criteria this implementation does not reach; see the README.
const KNOWN_UNMET: &[&str] = &["masking ablation"];

const PROBES: usize = 32;
const SAMPLING_STEPS: usize = 50;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

// Study scorer

/// Per-participant (precision, recall, F1) from the paper's user study.
const PAPER_ROWS: [(f64, f64, f64); 15] = [
    (0.56, 0.53, 0.54),
    (0.55, 0.86, 0.67),
    (0.50, 0.88, 0.64),
    (0.53, 0.44, 0.48),
    (0.49, 0.62, 0.55),
    (0.48, 0.56, 0.52),
    (0.52, 0.40, 0.45),
    (0.54, 0.56, 0.55),
    (0.58, 0.48, 0.53),
    (0.47, 0.16, 0.24),
    (0.54, 0.63, 0.58),
    (0.58, 0.68, 0.63),
    (0.54, 0.63, 0.58),
    (0.44, 0.47, 0.46),
    (0.49, 0.66, 0.56),
];

fn study_scorer() -> Outcome {
    let t0 = Instant::now();
    let reports: Vec<StudyReport> = PAPER_ROWS
        .iter()
        .enumerate()
        .map(|(i, &(precision, recall, f1))| StudyReport {
            session_id: format!("p{i:02}"),
            precision,
            recall,
            f1,
            duration_s: 0.0,
            n_items: 100,
        })
        .collect();
    let agg = aggregate_reports(&reports).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let r2 = |v: f64| (v * 100.0).round() / 100.0;
    let got = (r2(agg.precision), r2(agg.recall), r2(agg.f1));
    report(
        "study scorer regression",
        got == (0.52, 0.57, 0.53) && secs < 1.0,
        format!("averages {got:?} (want (0.52, 0.57, 0.53)) in {secs:.3}s"),
    )
}

// Quality gate

fn quality_gate_semantics(manifest: &mut DatasetManifest) -> Outcome {
    let rows = manifest.run_quality_gate(DEFAULT_GATE_THRESHOLD).unwrap();
    let mut ok = rows.len() >= 400;
    let mut accepted = Vec::new();
    for (row, rec) in rows.iter().zip(&manifest.pairs) {
        // Recount the IoU from the pixels.
        let pair = manifest.load_pair(rec).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        for (&g, &s) in pair.glyph.pixels().iter().zip(pair.style.pixels()) {
            let (g, s) = (g > manifest.mask_threshold, s > manifest.mask_threshold);
            inter += (g && s) as usize;
            union += (g || s) as usize;
        }
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        ok &= (oracle - row.iou).abs() < 1e-12;
        match row.decision() {
            GateDecision::Accept(v) => {
                ok &= v >= 0.8;
                accepted.push(v);
            }
            GateDecision::Reject(v) => ok &= v < 0.8,
        }
    }
    let mean = accepted.iter().sum::<f64>() / accepted.len().max(1) as f64;
    ok &= !accepted.is_empty() && mean >= 0.8;
    report(
        "quality gate semantics",
        ok,
        format!("{} pairs, {} accepted, accepted mean IoU {mean:.4}", rows.len(), accepted.len()),
    )
}

// Metric oracles

/// Mean SSIM with the 2-D Gaussian window applied directly, weights
/// renormalized over the in-bounds part of the window.
fn ssim_reference(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let sigma = 1.5f64;
    let r = 5isize;
    let mut total = 0.0;
    for row in 0..h as isize {
        for col in 0..w as isize {
            let (mut sw, mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let k = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                    let (x, y) = (a[rr as usize * w + cc as usize], b[rr as usize * w + cc as usize]);
                    sw += k;
                    mx += k * x;
                    my += k * y;
                    mxx += k * x * x;
                    myy += k * y * y;
                    mxy += k * x * y;
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = mxx / sw - mx * mx;
            let vy = myy / sw - my * my;
            let cxy = mxy / sw - mx * my;
            let (c1, c2) = (1e-4, 9e-4);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (w * h) as f64
}

fn metric_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut exact, mut worst_psnr, mut worst_ssim) = (true, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let pa: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let pb: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let m = pair_metrics(&GrayImage::new(8, 8, pa.clone()).unwrap(), &GrayImage::new(8, 8, pb.clone()).unwrap()).unwrap();
        let a: Vec<f64> = pa.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = pb.iter().map(|&v| v as f64).collect();
        let l1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 64.0;
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 64.0;
        exact &= m.l1 == l1 && m.rmse == mse.sqrt();
        worst_psnr = worst_psnr.max((m.psnr - (-10.0 * mse.log10())).abs());
        worst_ssim = worst_ssim.max((m.ssim - ssim_reference(&a, &b, 8, 8)).abs());
    }
    let zero = GrayImage::filled(8, 8, 0.0).unwrap();
    let one = GrayImage::filled(8, 8, 1.0).unwrap();
    let step = GrayImage::filled(8, 8, 1.0 / 255.0).unwrap();
    let db0 = pair_metrics(&zero, &one).unwrap().psnr;
    let db48 = pair_metrics(&zero, &step).unwrap().psnr;
    let secs = t0.elapsed().as_secs_f64();
    let pass = exact && worst_psnr <= 1e-9 && worst_ssim <= 1e-6 && db0.abs() <= 1e-9 && (db48 - 48.13).abs() < 0.005 && secs < 10.0;
    report(
        "metric oracles",
        pass,
        format!(
            "l1/rmse exact {exact}, max psnr err {worst_psnr:.1e}, max ssim err {worst_ssim:.1e}, fixtures {db0:.3} dB / {db48:.3} dB, {secs:.2}s"
        ),
    )
}

// Diffusion numerics

fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        resolution: 8,
        latent_factor: 2,
        glyph_channels: 2,
        glyph_hidden: 4,
        glyph_init_scale: 1.0,
        style_hidden: 4,
        style_grid: 2,
        ctx_dim: 4,
        base_channels: 4,
        channel_mult: vec![1, 2],
        attn_levels: vec![1],
        time_dim: 8,
    }
}

fn diffusion_numerics() -> Outcome {
    let t0 = Instant::now();
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let monotone = (2..=1000).all(|t| sched.alpha_bar(t) < sched.alpha_bar(t - 1));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let x0 = Tensor::<f64>::from_vec(&[1, 1, 200, 200], vec![0.3; n]).unwrap();
    let mut worst_std: f64 = 0.0;
    for t in [1, 500, 1000] {
        let eps = Tensor::<f64>::randn(&[1, 1, 200, 200], &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let mean = xt.data().iter().sum::<f64>() / n as f64;
        let std = (xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let want = (1.0 - sched.alpha_bar(t)).sqrt();
        worst_std = worst_std.max((std - want).abs() / want);
    }

    let mut m = ConditionedDenoiser::<f64>::new(tiny_diffusion(), &mut rng).unwrap();
    let params = m.num_params();
    let x0 = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let xg = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let xs = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let eps = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let t = [40, 700];
    m.loss_and_backward(&x0, &xg, &xs, &t, &eps, &sched).unwrap();
    let mut grads = Vec::new();
    m.visit(&mut |p| grads.extend_from_slice(&p.grad));
    let mut values = m.flat_values();
    // About the cube root of f64 epsilon; smaller steps drown tiny gradients in rounding.
    let h = 1e-5;
    let mut worst_grad: f64 = 0.0;
    for idx in 0..values.len() {
        let orig = values[idx];
        values[idx] = orig + h;
        m.load_flat_values(&values).unwrap();
        let lp = training_loss(&mut m, &x0, &xg, &xs, &t, &eps, &sched).unwrap();
        values[idx] = orig - h;
        m.load_flat_values(&values).unwrap();
        let lm = training_loss(&mut m, &x0, &xg, &xs, &t, &eps, &sched).unwrap();
        values[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let scale = fd.abs().max(grads[idx].abs());
        if scale > 1e-7 {
            worst_grad = worst_grad.max((fd - grads[idx]).abs() / scale);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        "diffusion numerics",
        monotone && worst_std <= 0.05 && params <= 10_000 && worst_grad <= 1e-3 && secs < 120.0,
        format!(
            "alpha_bar monotone {monotone}, max q_sample std err {:.2}%, grad rel err {worst_grad:.1e} over {params} params, {secs:.1}s",
            worst_std * 100.0
        ),
    )
}

// FID proxy

fn fid_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|j| rng.gen::<f64>() * (j + 1) as f64).collect()).collect();
    let v = [0.5, -1.0, 2.0, 0.0, 0.25, -0.75];
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&v).map(|(x, d)| x + d).collect()).collect();
    let want: f64 = v.iter().map(|d| d * d).sum();
    let shift = frechet_distance(&a, &b).unwrap();
    let same = frechet_distance(&a, &a).unwrap();
    report(
        "FID-proxy closed form",
        (shift - want).abs() <= 1e-4 && same.abs() <= 1e-6,
        format!("mean shift {shift:.6} (want {want}), identical {same:.1e}"),
    )
}

// Trained-model criteria

struct Trained {
    model: ConditionedDenoiser<f32>,
    val_mse: f64,
    train_secs: f64,
    steps: u64,
}

fn train_diffusion(train_ex: &[DiffusionExample], val_ex: &[DiffusionExample], masking: bool, freeze: bool) -> Trained {
    let cfg = TrainConfig { seed: 5, masking, freeze_glyph_encoder: freeze, ..TrainConfig::default() };
    let model = ConditionedDenoiser::<f32>::new(DiffusionConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut state = TrainState::new(model, &cfg, sched.clone());
    let t0 = Instant::now();
    train(&mut state, train_ex, &cfg, None, |_| {}).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let val_mse = validation_loss(&mut state.model, val_ex, &sched, 4, 99).unwrap();
    eprintln!("trained masking={masking} frozen={freeze}: val eps-MSE {val_mse:.4} in {train_secs:.0}s");
    Trained { model: state.model, val_mse, train_secs, steps: state.step }
}

fn aligned_iou(m: &mut ConditionedDenoiser<f32>, val_ex: &[DiffusionExample], sched: &NoiseSchedule) -> f64 {
    let probes = &val_ex[..PROBES];
    let g: Vec<&GrayImage> = probes.iter().map(|e| &e.glyph).collect();
    let s: Vec<&GrayImage> = probes.iter().map(|e| &e.style_input).collect();
    let seeds: Vec<u64> = (0..PROBES as u64).collect();
    let out = sample_batch(m, &g, &s, sched, SAMPLING_STEPS, &seeds).unwrap();
    out.iter().zip(&g).map(|(o, g)| image_iou(o, g, DEFAULT_MASK_THRESHOLD).unwrap()).sum::<f64>() / PROBES as f64
}

/// Glyph from probe i, style from a pair of another class. Returns how often
/// the output is closer to the conditioning glyph than to the style's glyph.
fn cross_class_wins(m: &mut ConditionedDenoiser<f32>, val_ex: &[DiffusionExample], sched: &NoiseSchedule, masking: bool) -> usize {
    let mut glyphs = Vec::new();
    let mut styles = Vec::new();
    let mut style_glyphs = Vec::new();
    for (i, a) in val_ex.iter().take(PROBES).enumerate() {
        let b = val_ex.iter().skip(i * 3 % val_ex.len()).chain(val_ex).find(|e| e.class_id != a.class_id).unwrap();
        glyphs.push(&a.glyph);
        styles.push(&b.style);
        style_glyphs.push(&b.glyph);
    }
    let seeds: Vec<u64> = (0..PROBES as u64).collect();
    let out = if masking {
        generate_personalized_batch(m, &glyphs, &styles, true, sched, SAMPLING_STEPS, &seeds).unwrap()
    } else {
        sample_batch(m, &glyphs, &styles, sched, SAMPLING_STEPS, &seeds).unwrap()
    };
    (0..PROBES)
        .filter(|&i| {
            image_iou(&out[i], glyphs[i], DEFAULT_MASK_THRESHOLD).unwrap()
                > image_iou(&out[i], style_glyphs[i], DEFAULT_MASK_THRESHOLD).unwrap()
        })
        .count()
}

fn denoising_uplift(train: &[AlignedPair], val: &[AlignedPair]) -> Outcome {
    let pairs: Vec<(&GrayImage, &GrayImage)> = train.iter().map(|p| (&p.style, &p.glyph)).collect();
    let mut dn = train_denoiser::<f32>(DenoiserConfig::default(), &pairs, &DenoiserTrainConfig::default(), |_, _| {}).unwrap().model;
    let vp: Vec<(&GrayImage, &GrayImage)> = val.iter().map(|p| (&p.style, &p.glyph)).collect();
    eprintln!("denoiser val L1 {:.4}, identity {:.4}", validation_l1(&mut dn, &vp).unwrap(), identity_l1(&vp));
    // Recognition model trained on clean glyphs, as a handprint-trained recognizer.
    let data: Vec<(&GrayImage, u32)> = train.iter().map(|p| (&p.glyph, p.class_id)).collect();
    let mut clf = train_classifier::<f32>(ClassifierConfig::default(), &data, &ClassifierTrainConfig::default()).unwrap().model;
    let raw: Vec<&GrayImage> = val.iter().map(|p| &p.style).collect();
    let den = denoise_batch(&mut dn, &raw).unwrap();
    let raw_logits = clf.logits(&raw).unwrap();
    let den_logits = clf.logits(&den.iter().collect::<Vec<_>>()).unwrap();
    let accs = |logits: &[Vec<f64>], subset: &[usize]| -> [f64; 3] {
        let l: Vec<Vec<f64>> = subset.iter().map(|&i| logits[i].clone()).collect();
        let y: Vec<u32> = subset.iter().map(|&i| val[i].class_id).collect();
        [1, 3, 5].map(|k| acc_at_k(&l, &y, k).unwrap())
    };
    let all: Vec<usize> = (0..val.len()).collect();
    let dense: Vec<usize> = all.iter().copied().filter(|&i| val[i].noise_type == NoiseType::DenseWhiteRegions).collect();
    let (ra, da) = (accs(&raw_logits, &all), accs(&den_logits, &all));
    let (rd, dd) = (accs(&raw_logits, &dense), accs(&den_logits, &dense));
    let monotone = [ra, da, rd, dd].iter().all(|a| a[0] <= a[1] && a[1] <= a[2]);
    report(
        "denoising uplift",
        !dense.is_empty() && da[0] >= ra[0] - 0.01 && dd[0] > rd[0] && monotone,
        format!(
            "Acc@1 raw {:.3} -> denoised {:.3}; DenseWhiteRegions (n={}) {:.3} -> {:.3}; Acc@k monotone {monotone}",
            ra[0],
            da[0],
            dense.len(),
            rd[0],
            dd[0]
        ),
    )
}

fn augmentation_harness(model: &mut Trained, train: &[AlignedPair], val: &[AlignedPair]) -> Outcome {
    let t0 = Instant::now();
    let items: Vec<AugmentItem> = train.iter().map(|p| AugmentItem { glyph: &p.glyph, style: &p.style, class_id: p.class_id }).collect();
    let eval: Vec<(&GrayImage, u32)> = val.iter().map(|p| (&p.style, p.class_id)).collect();
    let cfg = AugmentConfig::default();
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut gen = DiffusionGenerator::new(&mut model.model, &sched, SAMPLING_STEPS, true, model.steps).unwrap();
    let rows = augmentation_experiment(&items, &eval, &mut gen, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mut csv = Vec::new();
    write_experiment_csv(&rows, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let schema = csv.lines().next() == Some("scale,arm,acc1,acc3,acc5") && csv.lines().count() == 1 + 2 * cfg.scales.len();

    let copy = augmentation_experiment(&items, &eval, &mut CopyStyle, &cfg).unwrap();
    let stub_equal = cfg.scales.iter().all(|&s| {
        let arm = |name: &str| copy.iter().find(|r| r.scale == s && r.arm == name).map(|r| (r.acc1, r.acc3, r.acc5));
        arm(ARM_GENERATED).is_some() && arm(ARM_GENERATED) == arm(ARM_DUPLICATE)
    });
    report(
        "augmentation harness",
        secs < 45.0 * 60.0 && schema && stub_equal,
        format!("scales {:?} in {:.1} min, CSV schema {schema}, copy-style arm = duplicate arm {stub_equal}", cfg.scales, secs / 60.0),
    )
}

fn main() {
    let mut outcomes = vec![study_scorer(), metric_oracles(), diffusion_numerics(), fid_closed_form()];

    let dir = tempfile::tempdir().unwrap();
    let mut manifest = synth_dataset(&SynthConfig::default(), dir.path()).unwrap();
    outcomes.push(quality_gate_semantics(&mut manifest));
    let manifest = split_dataset(&manifest, &SplitConfig::default()).unwrap();
    let gate = DEFAULT_GATE_THRESHOLD;
    let pairs = |split: &str| -> Vec<AlignedPair> {
        let ok: Vec<&PairRecord> = manifest.eligible(gate).collect();
        manifest
            .split_records(split)
            .into_iter()
            .filter(|r| ok.iter().any(|e| e.pair_id == r.pair_id))
            .map(|r| manifest.load_pair(r).unwrap())
            .collect()
    };
    let (train_pairs, val_pairs) = (pairs("train"), pairs("val"));

    outcomes.push(denoising_uplift(&train_pairs, &val_pairs));

    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let ex = |split: &str, masking: bool| load_examples(&manifest, split, gate, masking).unwrap();
    let (train_m, val_m) = (ex("train", true), ex("val", true));
    let (train_u, val_u) = (ex("train", false), ex("val", false));

    let mut masked = train_diffusion(&train_m, &val_m, true, false);
    outcomes.push(report(
        "training efficacy",
        masked.val_mse < 0.5 && masked.train_secs < 30.0 * 60.0,
        format!(
            "val eps-MSE {:.4} (zero predictor ~1.0) after {} steps in {:.1} min on {} train pairs",
            masked.val_mse,
            masked.steps,
            masked.train_secs / 60.0,
            train_m.len()
        ),
    ));

    let mut frozen = train_diffusion(&train_m, &val_m, true, true);
    let iou_trained = aligned_iou(&mut masked.model, &val_m, &sched);
    let iou_frozen = aligned_iou(&mut frozen.model, &val_m, &sched);
    drop(frozen);
    outcomes.push(report(
        "glyph-guidance ablation",
        iou_trained - iou_frozen >= 0.2,
        format!("mean IoU to glyph {iou_trained:.3} trained vs {iou_frozen:.3} frozen encoder over {PROBES} probes"),
    ));

    let mut unmasked = train_diffusion(&train_u, &val_u, false, false);
    let wins_masked = cross_class_wins(&mut masked.model, &val_m, &sched, true);
    let wins_unmasked = cross_class_wins(&mut unmasked.model, &val_u, &sched, false);
    drop(unmasked);
    outcomes.push(report(
        "masking ablation",
        wins_masked * 5 >= PROBES * 4 && wins_unmasked * 2 < PROBES,
        format!("output follows the conditioning glyph on {wins_masked}/{PROBES} with masking, {wins_unmasked}/{PROBES} without (need >= 80% and < 50%)"),
    ));

    outcomes.push(augmentation_harness(&mut masked, &train_pairs, &val_pairs));

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    let unexpected: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass && !KNOWN_UNMET.contains(&o.name)).collect();
    for o in &outcomes {
        if !o.pass && KNOWN_UNMET.contains(&o.name) {
            println!("known unmet: {} ({})", o.name, o.detail);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {:?}", unexpected.iter().map(|o| o.name).collect::<Vec<_>>());
        std::process::exit(1);
    }
}
