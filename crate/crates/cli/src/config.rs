//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ctsnm_core::discrete_mimic::OnsetScenario;
use ctsnm_core::simulate::{merge_json, Scenario, ScenarioKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub overwrite: bool,
    /// Built-in scenario name or path to a scenario JSON file.
    pub scenario: Option<String>,
    /// Path to a shift-model JSON file.
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub n: Option<usize>,
    pub psi: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub atol: f64,
    pub rtol: f64,
    pub times: Option<Vec<f64>>,
    pub levels: Vec<u32>,
    pub subjects: usize,
    pub onset: OnsetScenario,
    pub bound: bool,
    pub builtin: Option<String>,
    pub tree: Option<PathBuf>,
    pub regime: Option<String>,
    pub search_lo: f64,
    pub search_hi: f64,
    pub grid_points: usize,
    pub level: u32,
    pub sweep: Vec<u32>,
    pub min_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("out"),
            threads: None,
            overwrite: false,
            scenario: None,
            model: None,
            data: None,
            n: None,
            psi: None,
            alpha: None,
            atol: 1e-10,
            rtol: 1e-8,
            times: None,
            levels: (2..=8).collect(),
            subjects: 16,
            onset: OnsetScenario::default(),
            bound: true,
            builtin: None,
            tree: None,
            regime: None,
            search_lo: -2.0,
            search_hi: 3.0,
            grid_points: 41,
            level: 2,
            sweep: vec![1, 2, 3],
            min_size: 2,
        }
    }
}

impl RunConfig {
    /// `defaults < file < flags`, merged key by key.
    pub fn resolve(file: Option<&Path>, flags: Map<String, Value>) -> anyhow::Result<Self> {
        let mut merged = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let overlay: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !overlay.is_object() {
                bail!("config {} must hold a JSON object", path.display());
            }
            merge_json(&mut merged, overlay);
        }
        merge_json(&mut merged, Value::Object(flags));
        serde_json::from_value(merged).context("invalid configuration")
    }

    pub fn scenario(&self) -> anyhow::Result<Scenario> {
        let spec = self.scenario.as_deref().context("no scenario given (--scenario)")?;
        if let Some(kind) = builtin_kind(spec) {
            return Ok(Scenario::builtin(kind));
        }
        let text = std::fs::read_to_string(spec).with_context(|| format!("reading scenario {spec}"))?;
        Ok(Scenario::from_json(&text)?)
    }
}

fn builtin_kind(name: &str) -> Option<ScenarioKind> {
    Some(match name {
        "gvhd" | "gvhd_survival" => ScenarioKind::GvhdSurvival,
        "pcp" | "pcp_continuous" => ScenarioKind::PcpContinuous,
        "tree" | "discrete_tree" => ScenarioKind::DiscreteTree,
        "null" | "null_effect" => ScenarioKind::NullEffect,
        _ => return None,
    })
}

/// `a..b` (inclusive) or a comma list.
pub fn parse_levels(s: &str) -> Result<Vec<u32>, String> {
    let bad = || format!("invalid levels `{s}`; use `2..8` or `2,3,5`");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

pub fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("invalid number `{p}`")))
        .collect()
}
