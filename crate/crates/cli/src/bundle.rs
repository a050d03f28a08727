//! Study bundle on disk: `bundle.json` (item order with hidden truth labels),
//! `images/`, and `sessions/` holding one header and one append-only
//! response log per participant session.

use anyhow::{anyhow, bail, Context, Result};
use obidiff::evalharness::{StudyItem, StudyReport, StudyResponse, StudySession};
use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const SESSIONS_DIR: &str = "sessions";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub version: u32,
    pub seed: u64,
    pub n_real: usize,
    pub n_generated: usize,
    /// Image paths are relative to the bundle directory.
    pub items: Vec<StudyItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SessionHeader {
    session_id: String,
    created_at: f64,
}

#[derive(Clone, Debug)]
pub struct StudyBundle {
    pub dir: PathBuf,
    pub info: BundleInfo,
}

impl StudyBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let info: BundleInfo = obidiff::error::parse_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        if info.version != BUNDLE_VERSION {
            bail!("{}: unsupported bundle version {}", path.display(), info.version);
        }
        Ok(Self { dir: dir.to_path_buf(), info })
    }

    pub fn save(&self) -> Result<()> {
        crate::config::write_json(&self.dir.join(BUNDLE_FILE), &self.info)
    }

    pub fn item(&self, item_id: &str) -> Option<&StudyItem> {
        self.info.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn image_path(&self, item: &StudyItem) -> PathBuf {
        self.dir.join(&item.image_path)
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.info.items.iter().map(|i| i.item_id.clone()).collect()
    }

    fn sessions_dir(&self) -> PathBuf {
        self.dir.join(SESSIONS_DIR)
    }

    fn header_path(&self, id: &str) -> Result<PathBuf> {
        check_session_id(id)?;
        Ok(self.sessions_dir().join(format!("{id}.json")))
    }

    fn log_path(&self, id: &str) -> Result<PathBuf> {
        check_session_id(id)?;
        Ok(self.sessions_dir().join(format!("{id}.responses.jsonl")))
    }

    pub fn has_session(&self, id: &str) -> bool {
        self.header_path(id).is_ok_and(|p| p.exists())
    }

    pub fn new_session(&self, created_at: f64) -> Result<StudySession> {
        fs::create_dir_all(self.sessions_dir())?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let header = SessionHeader { session_id: id.clone(), created_at };
        crate::config::write_json(&self.header_path(&id)?, &header)?;
        fs::File::create(self.log_path(&id)?)?;
        Ok(StudySession::new(id, created_at, self.info.items.clone()))
    }

    /// Rebuilds a session from its header and response log. The first answer
    /// per item wins. A final line cut short by a crash is ignored.
    pub fn load_session(&self, id: &str) -> Result<StudySession> {
        let hp = self.header_path(id)?;
        if !hp.exists() {
            bail!("unknown session {id}");
        }
        let header: SessionHeader = serde_json::from_str(&fs::read_to_string(&hp)?)?;
        let mut session = StudySession::new(header.session_id, header.created_at, self.info.items.clone());
        let log_path = self.log_path(id)?;
        let text = match fs::read_to_string(&log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let lines: Vec<&str> = text.split('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let resp: StudyResponse = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(anyhow!("{} line {}: {e}", log_path.display(), i + 1)),
            };
            session.record(resp).with_context(|| format!("{} line {}", log_path.display(), i + 1))?;
        }
        Ok(session)
    }

    /// One line per accepted response.
    pub fn append_response(&self, id: &str, resp: &StudyResponse) -> Result<()> {
        let mut line = serde_json::to_string(resp)?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).create(true).open(self.log_path(id)?)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let dir = self.sessions_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let id = name.strip_suffix(".json")?;
                check_session_id(id).ok().map(|_| id.to_string())
            })
            .collect();
        ids.sort();
        Ok(ids)
    }
}

fn check_session_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > 64 || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        bail!("malformed session id {id:?}");
    }
    Ok(())
}

/// The exact bytes both the server and `study-score` emit for a report.
pub fn report_json(report: &StudyReport) -> Result<String> {
    Ok(serde_json::to_string(report)?)
}
