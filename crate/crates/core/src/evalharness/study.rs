use crate::error::{invalid, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_STUDY_ITEMS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub image_path: String,
    pub truth: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResponse {
    pub item_id: String,
    pub choice: Label,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub session_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub duration_s: f64,
    pub n_items: usize,
}

/// Outcome of recording a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recorded {
    New,
    /// The item was already answered; the first answer is kept.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub session_id: String,
    pub created_at: f64,
    pub items: Vec<StudyItem>,
    pub responses: BTreeMap<String, StudyResponse>,
}

impl StudySession {
    pub fn new(session_id: impl Into<String>, created_at: f64, items: Vec<StudyItem>) -> Self {
        Self { session_id: session_id.into(), created_at, items, responses: BTreeMap::new() }
    }

    pub fn item(&self, item_id: &str) -> Option<&StudyItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn record(&mut self, response: StudyResponse) -> Result<Recorded> {
        if self.item(&response.item_id).is_none() {
            return Err(invalid(format!("unknown item {:?}", response.item_id)));
        }
        if self.responses.contains_key(&response.item_id) {
            return Ok(Recorded::Duplicate);
        }
        self.responses.insert(response.item_id.clone(), response);
        Ok(Recorded::New)
    }

    pub fn unanswered(&self) -> Vec<String> {
        self.items.iter().filter(|i| !self.responses.contains_key(&i.item_id)).map(|i| i.item_id.clone()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.unanswered().is_empty()
    }
}

/// Confusion counts with "generated" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: Label, choice: Label) {
        match (truth, choice) {
            (Label::Generated, Label::Generated) => self.tp += 1,
            (Label::Real, Label::Generated) => self.fp += 1,
            (Label::Generated, Label::Real) => self.fn_ += 1,
            (Label::Real, Label::Real) => self.tn += 1,
        }
    }

    /// (precision, recall, F1); a ratio with an empty denominator is 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

/// Scores a completed session. Duration runs from session creation to the
/// latest response.
pub fn score_study(session: &StudySession) -> Result<StudyReport> {
    let missing = session.unanswered();
    if !missing.is_empty() {
        return Err(Error::IncompleteSession(missing));
    }
    let mut c = Confusion::default();
    let mut last = session.created_at;
    for item in &session.items {
        let resp = &session.responses[&item.item_id];
        c.add(item.truth, resp.choice);
        last = last.max(resp.timestamp);
    }
    let (precision, recall, f1) = c.scores();
    Ok(StudyReport {
        session_id: session.session_id.clone(),
        precision,
        recall,
        f1,
        duration_s: last - session.created_at,
        n_items: session.items.len(),
    })
}

/// Unweighted mean of per-session metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyAggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub duration_s: f64,
    pub sessions: usize,
}

pub fn aggregate_reports(reports: &[StudyReport]) -> Result<StudyAggregate> {
    if reports.is_empty() {
        return Err(invalid("no reports to aggregate"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&StudyReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(StudyAggregate {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        duration_s: mean(|r| r.duration_s),
        sessions: reports.len(),
    })
}

/// Interleaves real and generated images into a seeded item order. Item ids
/// are positional (`item_000`, ...) so they reveal nothing about the truth.
pub fn build_items(real: &[String], generated: &[String], seed: u64) -> Vec<StudyItem> {
    let mut all: Vec<(String, Label)> = real
        .iter()
        .map(|p| (p.clone(), Label::Real))
        .chain(generated.iter().map(|p| (p.clone(), Label::Generated)))
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.into_iter()
        .enumerate()
        .map(|(i, (image_path, truth))| StudyItem { item_id: format!("item_{i:03}"), image_path, truth })
        .collect()
}
