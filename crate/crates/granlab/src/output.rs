//! Report envelopes, JSON and CSV writers, directory summaries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use granlab_core::trainer::{SweepRow, TrainLog};
use serde::{Deserialize, Serialize};

/// Crate version plus `git describe` output at build time.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("GRANLAB_GIT_DESCRIBE"), ")");

pub fn version() -> String {
    VERSION.to_string()
}

/// Wrapper written around every JSON result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub pass: bool,
    pub result: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(kind: &str, config: &impl Serialize, seeds: Vec<u64>, pass: bool, result: T) -> Self {
        Self {
            kind: kind.to_string(),
            version: version(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seeds,
            pass,
            result,
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "train_loss", "eval_loss"])?;
    for r in &log.records {
        w.write_record([r.step.to_string(), r.lr.to_string(), r.train_loss.to_string(), r.eval_loss.to_string()])?;
    }
    w.flush()
}

pub const SWEEP_COLUMNS: [&str; 10] =
    ["label", "m", "k", "w", "d", "route_bias", "lr", "final_eval_loss", "normalized_loss", "diverged"];

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        let s = &r.student;
        w.write_record([
            r.label.clone(),
            s.m.to_string(),
            s.k.to_string(),
            s.w.to_string(),
            s.d.to_string(),
            s.route_bias.to_string(),
            r.lr.to_string(),
            r.final_eval_loss.to_string(),
            r.normalized_loss.to_string(),
            r.diverged.to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub file: String,
    pub kind: String,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub unreadable: Vec<(String, String)>,
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# granlab summary\n\n| file | kind | pass |\n|---|---|---|\n");
        for r in &self.rows {
            let pass = match r.pass {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            };
            out.push_str(&format!("| {} | {} | {} |\n", r.file, r.kind, pass));
        }
        if !self.unreadable.is_empty() {
            out.push_str("\n## unreadable\n\n");
            for (f, e) in &self.unreadable {
                out.push_str(&format!("- {f}: {e}\n"));
            }
        }
        out
    }
}

/// Reads every `*.json` file in `dir` (sorted by name).
pub fn summarize_dir(dir: &Path) -> io::Result<Summary> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut s = Summary::default();
    for path in files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(v) => s.rows.push(SummaryRow {
                file: name,
                kind: v.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown").to_string(),
                pass: v.get("pass").and_then(|p| p.as_bool()),
            }),
            Err(e) => s.unreadable.push((name, e)),
        }
    }
    Ok(s)
}
