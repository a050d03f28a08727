//! Run configuration: struct defaults, then the `--config` file, then
//! `OBIDIFF_` environment variables, then command-line flags.

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "OBIDIFF_";
pub const LOCK_FILE: &str = ".obidiff.lock";

// Flags every subcommand accepts.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file; a previously written `*.resolved.json` reruns a command exactly.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        let mut v = Vec::new();
        if let Some(s) = self.seed {
            v.push(("seed", Value::from(s)));
        }
        if let Some(o) = &self.out {
            v.push(("out", path_value(o)));
        }
        v
    }
}

pub fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Builds a config of type `C`. Environment keys map onto nested fields with
/// `__` as the separator: `OBIDIFF_TRAIN__STEPS=500` sets `train.steps`.
/// Unknown environment keys are skipped with a warning; unknown keys in the
/// file or flags are errors.
pub fn resolve<C>(file: Option<&Path>, env: &[(String, String)], flags: &[(&str, Value)]) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(C::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let layer: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !layer.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        merge(&mut value, layer);
    }
    let mut env: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        match lookup(&mut value, &path) {
            Some(slot) => *slot = env_value(slot, raw).with_context(|| format!("environment variable {key}"))?,
            None => eprintln!("warning: {key} does not name a setting of this command, ignored"),
        }
    }
    for (key, v) in flags {
        let slot = value
            .as_object_mut()
            .and_then(|m| m.get_mut(*key))
            .ok_or_else(|| anyhow!("--{} does not apply to this command", key.replace('_', "-")))?;
        *slot = v.clone();
    }
    Ok(obidiff::error::from_json_value(value)?)
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn lookup<'a>(value: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    path.iter().try_fold(value, |v, k| v.as_object_mut()?.get_mut(k))
}

/// String settings take the raw text; everything else is parsed as JSON.
fn env_value(current: &Value, raw: &str) -> Result<Value> {
    if current.is_string() {
        return Ok(Value::String(raw.to_string()));
    }
    if current.is_null() {
        return Ok(serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())));
    }
    serde_json::from_str(raw).with_context(|| format!("{raw:?} is not valid JSON"))
}

/// Writes `<out>/<command>.resolved.json`.
pub fn write_resolved<C: Serialize>(out: &Path, command: &str, config: &C) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{command}.resolved.json"));
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is in use by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        steps: usize,
        lr: f64,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        out: String,
        seed: u64,
        train: Inner,
        note: Option<String>,
    }

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seed": 3, "train": {"steps": 10}}"#).unwrap();
        let c: Demo = resolve(Some(&file), &env(&[("OBIDIFF_TRAIN__LR", "0.5"), ("OBIDIFF_SEED", "4")]), &[]).unwrap();
        assert_eq!(c, Demo { out: String::new(), seed: 4, train: Inner { steps: 10, lr: 0.5 }, note: None });
        let c: Demo = resolve(Some(&file), &env(&[("OBIDIFF_SEED", "4")]), &[("seed", Value::from(9))]).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn strings_and_nulls_from_env() {
        let c: Demo = resolve(None, &env(&[("OBIDIFF_OUT", "123"), ("OBIDIFF_NOTE", "hi")]), &[]).unwrap();
        assert_eq!(c.out, "123");
        assert_eq!(c.note.as_deref(), Some("hi"));
    }

    #[test]
    fn unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"train": {"stepz": 10}}"#).unwrap();
        let err = resolve::<Demo>(Some(&file), &[], &[]).unwrap_err().to_string();
        assert!(err.contains("/train"), "{err}");
        assert!(resolve::<Demo>(None, &env(&[("OBIDIFF_UNRELATED", "1")]), &[]).is_ok());
        assert!(resolve::<Demo>(None, &[], &[("port", Value::from(1))]).is_err());
        assert!(resolve::<Demo>(None, &env(&[("OBIDIFF_SEED", "x")]), &[]).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
