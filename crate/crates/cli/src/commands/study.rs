use super::generate::open_generator;
use super::{load_manifest, split_pairs};
use crate::bundle::{report_json, BundleInfo, StudyBundle, BUNDLE_VERSION, SESSIONS_DIR};
use crate::config::{path_value, resolve, write_resolved, CommonArgs, OutputLock};
use crate::server::{router, AppState};
use crate::{ScoreArgs, ServeArgs};
use anyhow::{bail, Context, Result};
use obidiff::datapipe::DEFAULT_GATE_THRESHOLD;
use obidiff::diffusion::{generate_personalized_batch, DEFAULT_SAMPLING_STEPS};
use obidiff::evalharness::{build_items, score_study, Label};
use obidiff::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyBundleRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub split: String,
    pub gate_threshold: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub steps: usize,
    pub dual_mask: bool,
}

impl Default for StudyBundleRun {
    fn default() -> Self {
        Self {
            out: "runs/study".into(),
            manifest: "data/manifest.json".into(),
            checkpoint: "runs/diffusion/diffusion.bin".into(),
            seed: 0,
            split: "val".into(),
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            n_real: 50,
            n_generated: 50,
            steps: DEFAULT_SAMPLING_STEPS,
            dual_mask: true,
        }
    }
}

/// Real rubbings and generated images from disjoint pairs where the split is
/// large enough; item order is shuffled by `seed`.
pub fn study_bundle(args: &CommonArgs, env: &[(String, String)]) -> Result<()> {
    let cfg: StudyBundleRun = resolve(args.config.as_deref(), env, &args.overrides())?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let sessions = cfg.out.join(SESSIONS_DIR);
    if sessions.exists() && std::fs::read_dir(&sessions)?.next().is_some() {
        bail!("{} already holds study sessions; bundle into a fresh directory", cfg.out.display());
    }
    write_resolved(&cfg.out, "study-bundle", &cfg)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let pairs = split_pairs(&manifest, &cfg.split, cfg.gate_threshold)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let pick = |k: usize| &pairs[order[k % order.len()]];

    let real: Vec<GrayImage> = (0..cfg.n_real).map(|k| pick(k).style.clone()).collect();
    let (mut model, _, sched) = open_generator(&cfg.checkpoint)?;
    let mut generated = Vec::with_capacity(cfg.n_generated);
    let sources: Vec<_> = (0..cfg.n_generated).map(|j| pick(cfg.n_real + j)).collect();
    for (c, chunk) in sources.chunks(32).enumerate() {
        let g: Vec<&GrayImage> = chunk.iter().map(|p| &p.glyph).collect();
        let s: Vec<&GrayImage> = chunk.iter().map(|p| &p.style).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|j| cfg.seed.wrapping_add((c * 32 + j) as u64)).collect();
        generated.extend(generate_personalized_batch(&mut model, &g, &s, cfg.dual_mask, &sched, cfg.steps, &seeds)?);
    }

    let real_keys: Vec<String> = (0..real.len()).map(|i| i.to_string()).collect();
    let gen_keys: Vec<String> = (0..generated.len()).map(|i| i.to_string()).collect();
    let mut items = build_items(&real_keys, &gen_keys, cfg.seed);
    std::fs::create_dir_all(cfg.out.join("images"))?;
    for item in &mut items {
        let idx: usize = item.image_path.parse().expect("keys are indices");
        let img = match item.truth {
            Label::Real => &real[idx],
            Label::Generated => &generated[idx],
        };
        item.image_path = format!("images/{}.png", item.item_id);
        img.save_png(cfg.out.join(&item.image_path))?;
    }
    let bundle = StudyBundle {
        dir: cfg.out.clone(),
        info: BundleInfo { version: BUNDLE_VERSION, seed: cfg.seed, n_real: real.len(), n_generated: generated.len(), items },
    };
    bundle.save()?;
    println!("bundle with {} items in {}", bundle.info.items.len(), cfg.out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyServeRun {
    pub bundle: PathBuf,
    pub host: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
}

impl Default for StudyServeRun {
    fn default() -> Self {
        Self { bundle: "runs/study".into(), host: "127.0.0.1".into(), port: 8080, static_dir: None }
    }
}

pub fn study_serve(args: &ServeArgs, env: &[(String, String)]) -> Result<()> {
    let mut flags = args.common.overrides();
    if let Some(b) = &args.bundle {
        flags.push(("bundle", path_value(b)));
    }
    if let Some(p) = args.port {
        flags.push(("port", Value::from(p)));
    }
    if let Some(d) = &args.static_dir {
        flags.push(("static_dir", path_value(d)));
    }
    let cfg: StudyServeRun = resolve(args.common.config.as_deref(), env, &flags)?;
    let bundle = StudyBundle::load(&cfg.bundle)?;
    write_resolved(&cfg.bundle, "study-serve", &cfg)?;
    let app = router(Arc::new(AppState::new(bundle)), cfg.static_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port))
            .await
            .with_context(|| format!("binding {}:{}", cfg.host, cfg.port))?;
        println!("serving {} on http://{}", cfg.bundle.display(), listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyScoreRun {
    pub bundle: PathBuf,
    /// Scores every complete session when unset.
    pub session: Option<String>,
    /// Also writes `<session>.report.json` here.
    pub out: Option<PathBuf>,
}

impl Default for StudyScoreRun {
    fn default() -> Self {
        Self { bundle: "runs/study".into(), session: None, out: None }
    }
}

/// Prints one report per line, byte-identical to the server's report body.
pub fn study_score(args: &ScoreArgs, env: &[(String, String)]) -> Result<()> {
    let mut flags = args.common.overrides();
    if let Some(b) = &args.bundle {
        flags.push(("bundle", path_value(b)));
    }
    if let Some(s) = &args.session {
        flags.push(("session", Value::String(s.clone())));
    }
    let cfg: StudyScoreRun = resolve(args.common.config.as_deref(), env, &flags)?;
    let bundle = StudyBundle::load(&cfg.bundle)?;
    if let Some(out) = &cfg.out {
        write_resolved(out, "study-score", &cfg)?;
    }
    let ids = match &cfg.session {
        Some(id) => vec![id.clone()],
        None => bundle.session_ids()?,
    };
    let mut scored = 0;
    for id in &ids {
        let session = bundle.load_session(id)?;
        let report = match score_study(&session) {
            Ok(r) => r,
            Err(e) if cfg.session.is_none() => {
                eprintln!("skipping {id}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let body = report_json(&report)?;
        if let Some(out) = &cfg.out {
            std::fs::write(out.join(format!("{id}.report.json")), &body)?;
        }
        println!("{body}");
        scored += 1;
    }
    if scored == 0 {
        bail!("no complete sessions in {}", cfg.bundle.display());
    }
    Ok(())
}
