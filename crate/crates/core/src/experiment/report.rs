//! Run bookkeeping: the per-run record, the output-directory lock, and the
//! consolidated report assembled from stored artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const AUDIT_FILE: &str = "audit.json";
pub const EVAL_FILE: &str = "eval.json";
pub const STAGE2_FILE: &str = "stage2/report.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub subcommand: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub phases: Vec<PhaseTiming>,
    pub artifacts: Vec<String>,
    pub verdicts: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(subcommand: &str, config_fingerprint: String, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config_fingerprint,
            seed,
            phases: Vec::new(),
            artifacts: Vec::new(),
            verdicts: BTreeMap::new(),
        }
    }

    /// Written once, at the end of the run.
    pub fn write(self, out: &Path) -> Result<PathBuf> {
        let path = out.join(format!("run-record-{}.json", self.subcommand));
        write_json(&path, &self)?;
        Ok(path)
    }
}

/// Exclusive ownership of an output directory for the life of a run.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".pairlat.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn read_artifact(dir: &Path, name: &str) -> Result<Option<Value>> {
    let path = dir.join(name);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, "json", e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&path, e)),
    }
}

fn num(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv(header: &str, rows: Vec<Vec<String>>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Assemble `report.json` and flat CSV tables from whatever artifacts are in
/// `dir`. Missing artifacts are listed under `gaps`. Output depends only on
/// the artifacts.
pub fn emit_report(dir: &Path) -> Result<Value> {
    let sources = [("audit", AUDIT_FILE), ("eval", EVAL_FILE), ("stage2", STAGE2_FILE), ("ablation", ABLATION_FILE)];
    let mut sections = serde_json::Map::new();
    let mut gaps = Vec::new();
    for (key, file) in sources {
        match read_artifact(dir, file)? {
            Some(v) => {
                sections.insert(key.into(), v);
            }
            None => gaps.push(Value::String(key.into())),
        }
    }
    let mut tables = Vec::new();
    if let Some(Value::Array(mods)) = sections.get("audit").and_then(|a| a.get("modalities")) {
        let rows = mods
            .iter()
            .map(|m| {
                let fp = &m["first_point"];
                vec![num(&m["modality"]), num(&m["verdict"]), num(&fp["eig_min"]), num(&fp["eig_max"]), num(&m["min_eig_ratio"]), num(&m["max_residual"])]
            })
            .collect();
        let text = csv("modality,verdict,eig_min,eig_max,min_eig_ratio,max_residual", rows);
        write_atomic(&dir.join("report-gram.csv"), text.as_bytes())?;
        tables.push(Value::String("report-gram.csv".into()));
    }
    if let Some(Value::Array(mods)) = sections.get("eval").and_then(|a| a.get("modalities")) {
        let rows = mods
            .iter()
            .map(|m| vec![num(&m["modality"]), num(&m["block_r2"]["mean"]), num(&m["leakage_r2"]["mean"]), num(&m["mcc"]["mcc"])])
            .collect();
        write_atomic(&dir.join("report-recovery.csv"), csv("modality,block_r2,leakage_r2,mcc", rows).as_bytes())?;
        tables.push(Value::String("report-recovery.csv".into()));
    }
    if let Some(ab) = sections.get("ablation") {
        let seeds: Vec<String> = ab["seeds"].as_array().map(|s| s.iter().map(num).collect()).unwrap_or_default();
        let mut rows = Vec::new();
        for v in ab["variants"].as_array().into_iter().flatten() {
            for (k, s) in v["scores"].as_array().into_iter().flatten().enumerate() {
                rows.push(vec![format!("\"{}\"", num(&v["name"])), seeds.get(k).cloned().unwrap_or_default(), num(s)]);
            }
        }
        write_atomic(&dir.join("report-ablation.csv"), csv("variant,seed,accuracy", rows).as_bytes())?;
        tables.push(Value::String("report-ablation.csv".into()));
    }
    let report = serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "sections": Value::Object(sections),
        "gaps": gaps,
        "tables": tables,
    });
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
