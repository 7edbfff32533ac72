//! Experiment configuration, presets, overrides, and the phase pipeline
//! shared by the command line and the acceptance tests.

pub mod pipeline;
pub mod report;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::AuditSettings;
use crate::error::{Error, Result};
use crate::scm::WorldConfig;
use crate::stage1::Stage1Config;
use crate::stage2::{ProbeConfig, Stage2Config};

pub use pipeline::{
    build_world, evaluate_phase, masks_for, run_ablation, stage1_phase, stage2_phase, train_backbones,
    transfer_score, EdgeSplits, EvalReport, ModalityEval, Stage2Report, World,
};
pub use report::{emit_report, OutputLock, PhaseTiming, RunRecord, REPORT_SCHEMA_VERSION};

pub const PRESETS: [(&str, &str); 3] = [
    ("fig2", include_str!("../../presets/fig2.toml")),
    ("fig2-dropedge", include_str!("../../presets/fig2-dropedge.toml")),
    ("chain5", include_str!("../../presets/chain5.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`; available: {}", preset_names().join(", "))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub rows_per_edge: usize,
    /// Train / fit / score fractions of every edge's rows.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { rows_per_edge: 20_000, split: [0.8, 0.1, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Threshold for the support of a fitted map's Jacobian.
    pub map_tau0: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { map_tau0: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Smallest accepted gap, in accuracy points, between consecutive
    /// variants of the expected chain.
    pub min_gap: f64,
    /// Largest accepted distance of the contrastive-only variant from chance.
    pub chance_tolerance: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], min_gap: 2.0, chance_tolerance: 5.0 }
    }
}

fn default_name() -> String {
    "custom".into()
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub world: WorldConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub audit: AuditSettings,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, what: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Parse `key.path=value`; the value is read as TOML and falls back to a
/// bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{}` crosses the non-table key `{p}`", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Build from an optional preset, an optional config file body, and
    /// `key=value` overrides, in that order of precedence (last wins). A
    /// `preset = "name"` entry in the file selects the base preset.
    pub fn assemble(preset: Option<&str>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut file_table = match file {
            Some(text) => parse_table(text, "config file")?,
            None => toml::Table::new(),
        };
        let file_preset = match file_table.remove("preset") {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => return Err(Error::Config(format!("`preset` must be a string, got {other}"))),
            None => None,
        };
        let base_name = preset.map(str::to_string).or(file_preset);
        let mut table = match &base_name {
            Some(name) => parse_table(preset_source(name)?, name)?,
            None => toml::Table::new(),
        };
        merge_tables(&mut table, file_table);
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::assemble(Some(name), None, &[])
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        let spec = self.world.latent_spec()?;
        self.world.scm_spec(&spec)?;
        self.world.correspondences(&spec)?;
        self.world.label_column(&spec)?;
        let s = &self.data.split;
        if s.iter().any(|f| !(*f > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split must be three positive fractions summing to 1, got {s:?}")));
        }
        if self.data.rows_per_edge < 20 {
            return Err(Error::Config("data.rows_per_edge must be at least 20".into()));
        }
        let m = self.world.modalities;
        let j = self.stage2.source0()?;
        let ts = self.stage2.targets0()?;
        if j >= m || ts.iter().any(|&t| t >= m) {
            return Err(Error::Config(format!("stage2 modalities must lie in 1..={m}")));
        }
        let g = self.world.graph()?;
        for &t in &ts {
            if !g.has_edge(crate::scm::Edge::new(j, t)) || j == t {
                return Err(Error::Config(format!(
                    "stage2 transfer {} → {} needs the edge {{{}, {}}}",
                    j + 1,
                    t + 1,
                    j.min(t) + 1,
                    j.max(t) + 1
                )));
            }
        }
        Ok(())
    }

    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 over the canonical JSON of the effective configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
