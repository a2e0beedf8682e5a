//! Run configuration: one TOML or JSON document driving every subcommand.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{TermKind, TermSpec};
use crate::covariates::CovariateSpec;
use crate::error::{Error, Result};
use crate::fit::Criterion;
use crate::simulate::TruthSpec;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub events: Option<PathBuf>,
    pub native_range: Option<PathBuf>,
    pub strata: Option<PathBuf>,
    /// receiver universe for simulation runs (single `receiver` column)
    pub receivers: Option<PathBuf>,
    /// case-control dataset; defaults to `<out>/dataset.csv`
    pub dataset: Option<PathBuf>,
    /// fitted model; defaults to `<out>/fit.json`
    pub fit: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Distance,
    ReceiverAttribute,
    Group,
    Dyadic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub name: String,
    pub kind: TableKind,
    pub path: PathBuf,
}

fn default_m() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_grid() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_true")]
    pub matched: bool,
    #[serde(default)]
    pub criterion: Criterion,
    /// observation window; defaults to the event year range
    pub window: Option<(i32, i32)>,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_one")]
    pub n_reps: usize,
    pub window: (i32, i32),
    pub truth: TruthSpec,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// candidate models as subsets of the configured term names
    pub candidates: Vec<Vec<String>>,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub threads: Option<usize>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub tables: Vec<TableConfig>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    pub simulation: Option<SimulationConfig>,
    pub report: Option<ReportConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Which subcommand is validating the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Simulate,
    Sample,
    Fit,
    Baseline,
    Gof,
    Report,
}

impl RunConfig {
    /// Parse TOML or JSON, sniffing by extension then falling back.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed: std::result::Result<RunConfig, String> = if is_json {
            serde_json::from_str(&raw).map_err(|e| e.to_string())
        } else {
            toml::from_str(&raw).map_err(|e| e.to_string())
        };
        match parsed {
            Ok(c) => Ok(c),
            Err(first) => {
                // accept either format regardless of extension
                let other: std::result::Result<RunConfig, String> = if is_json {
                    toml::from_str(&raw).map_err(|e| e.to_string())
                } else {
                    serde_json::from_str(&raw).map_err(|e| e.to_string())
                };
                other.map_err(|second| {
                    Error::Config(vec![format!("{}: {first}", path.display()), second])
                })
            }
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.out.join("dataset.csv"))
    }

    pub fn fit_path(&self) -> PathBuf {
        self.paths
            .fit
            .clone()
            .unwrap_or_else(|| self.out.join("fit.json"))
    }

    /// Collect every problem at once; empty means valid for `mode`.
    /// Path existence is checked only for the paths the mode actually reads,
    /// so one config can drive the whole pipeline before earlier stages have
    /// produced their outputs.
    pub fn validate(&self, mode: RunMode) -> Vec<String> {
        let mut problems = Vec::new();
        if self.model.m < 2 {
            problems.push(format!("model.m must be at least 2, got {}", self.model.m));
        }
        let table_names: BTreeSet<&str> = self.tables.iter().map(|t| t.name.as_str()).collect();
        if table_names.len() != self.tables.len() {
            problems.push("duplicate table names".into());
        }
        let reads_tables = matches!(mode, RunMode::Simulate | RunMode::Sample);
        if reads_tables {
            for t in &self.tables {
                if !t.path.exists() {
                    problems.push(format!(
                        "table '{}': path {} does not exist",
                        t.name,
                        t.path.display()
                    ));
                }
            }
        }
        let mut cov_names: BTreeSet<&str> = BTreeSet::new();
        for c in &self.covariates {
            if !cov_names.insert(c.name.as_str()) {
                problems.push(format!("duplicate covariate name '{}'", c.name));
            }
            let table = match &c.kind {
                crate::covariates::CovariateKind::StaticDyadic { table }
                | crate::covariates::CovariateKind::MinOverInvaded { table }
                | crate::covariates::CovariateKind::MinAbsDiffOverInvaded { table }
                | crate::covariates::CovariateKind::GroupIndicator { table } => Some(table),
                crate::covariates::CovariateKind::LastArrival { .. } => None,
            };
            if let Some(table) = table {
                if !table_names.contains(table.as_str()) {
                    problems.push(format!(
                        "covariate '{}' references unknown table '{table}'",
                        c.name
                    ));
                }
            }
        }
        let mut term_names: BTreeSet<&str> = BTreeSet::new();
        for term in &self.model.terms {
            if !term_names.insert(term.name.as_str()) {
                problems.push(format!("duplicate term name '{}'", term.name));
            }
            match &term.kind {
                TermKind::Linear { covariate } | TermKind::TimeVarying { covariate, .. } => {
                    if !cov_names.contains(covariate.as_str()) {
                        problems.push(format!(
                            "term '{}' references unknown covariate '{covariate}'",
                            term.name
                        ));
                    }
                }
                TermKind::RandomEffect { factor, .. } => {
                    if factor != "sender"
                        && factor != "receiver"
                        && !cov_names.contains(factor.as_str())
                    {
                        problems.push(format!(
                            "term '{}' references unknown factor '{factor}'",
                            term.name
                        ));
                    }
                }
            }
        }
        let check_exists = |problems: &mut Vec<String>, p: &Option<PathBuf>, what: &str| {
            if let Some(p) = p {
                if !p.exists() {
                    problems.push(format!("{what}: path {} does not exist", p.display()));
                }
            }
        };

        // exactly one driving input per run mode: simulation runs need the
        // simulation block, data runs need the events path
        match mode {
            RunMode::Simulate => {
                check_exists(&mut problems, &self.paths.strata, "paths.strata");
                check_exists(&mut problems, &self.paths.receivers, "paths.receivers");
                check_exists(&mut problems, &self.paths.native_range, "paths.native_range");
                let Some(sim) = &self.simulation else {
                    problems.push("simulate: config has no [simulation] block".into());
                    return problems;
                };
                if sim.n_reps < 1 {
                    problems.push("simulation.n_reps must be at least 1".into());
                }
                if sim.window.0 > sim.window.1 {
                    problems.push("simulation.window is reversed".into());
                }
                if self.paths.strata.is_none() {
                    problems.push("simulate: paths.strata (sender universe) is required".into());
                }
                if self.paths.receivers.is_none() {
                    problems.push("simulate: paths.receivers (receiver universe) is required".into());
                }
                if let Err(e) = sim.truth.validate(sim.window) {
                    problems.push(format!("simulation.truth: {e}"));
                }
            }
            RunMode::Sample => {
                if self.paths.events.is_none() {
                    problems.push(
                        "sample: paths.events is required (point it at a replication file to sample simulated data)"
                            .into(),
                    );
                }
                check_exists(&mut problems, &self.paths.events, "paths.events");
                check_exists(&mut problems, &self.paths.strata, "paths.strata");
                check_exists(&mut problems, &self.paths.native_range, "paths.native_range");
            }
            RunMode::Fit | RunMode::Report => {
                if self.model.terms.is_empty() {
                    problems.push("fit: model.terms is empty".into());
                }
                check_exists(&mut problems, &Some(self.dataset_path()), "dataset");
                if mode == RunMode::Report {
                    match &self.report {
                        None => problems.push("report: config has no [report] block".into()),
                        Some(r) => {
                            if r.candidates.is_empty() {
                                problems.push("report.candidates is empty".into());
                            }
                            for (i, cand) in r.candidates.iter().enumerate() {
                                for name in cand {
                                    if !term_names.contains(name.as_str()) {
                                        problems.push(format!(
                                            "report.candidates[{i}] references unknown term '{name}'"
                                        ));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            RunMode::Baseline | RunMode::Gof => {
                check_exists(&mut problems, &Some(self.dataset_path()), "dataset");
                check_exists(&mut problems, &Some(self.fit_path()), "fit");
            }
        }
        problems
    }
}
