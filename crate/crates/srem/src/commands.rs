//! Subcommand implementations: simulate, sample, fit, baseline, gof, report.
//!
//! Every command validates its config, produces its artifacts under the
//! output directory, and writes a manifest recording the tool version, the
//! config hash, the seed, and the sha256 of each input it read. Identical
//! inputs and seeds reproduce identical outputs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline::{breslow_matched, breslow_pooled, write_baseline_csv};
use crate::basis::{TermKind, TermSpec};
use crate::config::{RunConfig, RunMode, TableConfig, TableKind};
use crate::covariates::CovariateEngine;
use crate::error::{Error, Result};
use crate::events::{
    build_risk_set, read_events_csv, read_native_csv, read_receivers_csv, read_strata_csv,
    remove_missing_origin, Actors, Dyad, Event, EventSequence, History, LoadReport, RiskSet,
};
use crate::fit::{
    evaluate_tv_effect, fit_smooth_rem, write_curve_csv, FitOptions, FitResult, SmoothCurve,
};
use crate::gof::{gof_report, write_gof_csv, GofSummary};
use crate::sampling::{
    build_case_control_dataset, read_dataset_csv, write_dataset_csv, CaseControlDataset,
};
use crate::simulate::{run_replications, SimWorld};
use crate::tables::{
    read_attribute_csv, read_distance_csv, read_dyadic_csv, read_group_csv, TableSet,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_report: Option<LoadReport>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(crate::sampling::hex_string(&h.finalize()))
}

pub struct CommandContext {
    pub config: RunConfig,
    pub config_sha256: String,
}

impl CommandContext {
    pub fn load(config_path: &Path) -> Result<Self> {
        let config = RunConfig::load(config_path)?;
        let config_sha256 = sha256_file(config_path)?;
        Ok(CommandContext { config, config_sha256 })
    }

    fn validated(&self, mode: RunMode) -> Result<()> {
        let problems = self.config.validate(mode);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn manifest(
        &self,
        command: &str,
        inputs: BTreeMap<String, String>,
        outputs: Vec<String>,
        load_report: Option<LoadReport>,
    ) -> Manifest {
        Manifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_sha256: self.config_sha256.clone(),
            seed: self.config.seed,
            inputs,
            outputs,
            load_report,
        }
    }

    fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        let path = self.config.out.join(format!("{}.manifest.json", manifest.command));
        let json = serde_json::to_string_pretty(manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

/// Resolved model inputs shared by the sampling and simulation paths.
pub struct World {
    pub actors: Actors,
    pub native: Vec<Dyad>,
    pub tables: TableSet,
    pub report: LoadReport,
    pub inputs: BTreeMap<String, String>,
}

fn load_tables(
    configs: &[TableConfig],
    actors: &Actors,
    report: &mut LoadReport,
    inputs: &mut BTreeMap<String, String>,
) -> Result<TableSet> {
    let mut tables = TableSet::default();
    for t in configs {
        inputs.insert(t.path.display().to_string(), sha256_file(&t.path)?);
        match t.kind {
            TableKind::Distance => {
                tables
                    .distances
                    .insert(t.name.clone(), read_distance_csv(&t.path, actors, report)?);
            }
            TableKind::ReceiverAttribute => {
                tables
                    .attributes
                    .insert(t.name.clone(), read_attribute_csv(&t.path, actors, report)?);
            }
            TableKind::Group => {
                tables
                    .groups
                    .insert(t.name.clone(), read_group_csv(&t.path, actors, report)?);
            }
            TableKind::Dyadic => {
                tables
                    .dyadic
                    .insert(t.name.clone(), read_dyadic_csv(&t.path, actors, report)?);
            }
        }
    }
    Ok(tables)
}

fn load_native(
    config: &RunConfig,
    actors: &Actors,
    report: &mut LoadReport,
    inputs: &mut BTreeMap<String, String>,
) -> Result<Vec<Dyad>> {
    match &config.paths.native_range {
        None => Ok(Vec::new()),
        Some(path) => {
            inputs.insert(path.display().to_string(), sha256_file(path)?);
            let raw = read_native_csv(path)?;
            Ok(crate::events::resolve_native(actors, &raw, report))
        }
    }
}

/// World for event-data runs: the actor universe comes from the events file.
fn load_event_world(config: &RunConfig) -> Result<(World, Vec<Event>, (i32, i32))> {
    let events_path = config
        .paths
        .events
        .as_ref()
        .expect("validated: events path present");
    let mut inputs = BTreeMap::new();
    inputs.insert(events_path.display().to_string(), sha256_file(events_path)?);
    let raw = read_events_csv(events_path)?;
    if raw.rows.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no events",
            events_path.display()
        )));
    }
    let mut senders: Vec<String> = raw.rows.iter().map(|r| r.0.clone()).collect();
    senders.sort();
    senders.dedup();
    let mut receivers: Vec<String> = raw.rows.iter().map(|r| r.1.clone()).collect();
    receivers.sort();
    receivers.dedup();
    let strata: HashMap<String, String> = match &config.paths.strata {
        Some(path) => {
            inputs.insert(path.display().to_string(), sha256_file(path)?);
            let full = read_strata_csv(path)?;
            let mut restricted = HashMap::new();
            for s in &senders {
                match full.get(s) {
                    Some(g) => {
                        restricted.insert(s.clone(), g.clone());
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "sender '{s}' appears in events but has no stratum"
                        )))
                    }
                }
            }
            restricted
        }
        None => senders.iter().map(|s| (s.clone(), "all".to_string())).collect(),
    };
    let actors = Actors::new(senders, receivers, &strata)?;
    let mut report = LoadReport::default();
    let native = load_native(config, &actors, &mut report, &mut inputs)?;
    let tables = load_tables(&config.tables, &actors, &mut report, &mut inputs)?;

    let events: Vec<Event> = raw
        .rows
        .iter()
        .map(|(s, r, year, rank)| Event {
            dyad: Dyad::new(
                actors.sender(s).expect("sender interned from events"),
                actors.receiver(r).expect("receiver interned from events"),
            ),
            year: *year,
            rank: *rank,
        })
        .collect();
    let window = config.model.window.unwrap_or_else(|| {
        let min = events.iter().map(|e| e.year).min().unwrap();
        let max = events.iter().map(|e| e.year).max().unwrap();
        (min, max)
    });
    Ok((
        World { actors, native, tables, report, inputs },
        events,
        window,
    ))
}

/// World for simulation runs: the universe comes from the strata and
/// receivers files.
fn load_sim_world(config: &RunConfig) -> Result<World> {
    let strata_path = config.paths.strata.as_ref().expect("validated");
    let receivers_path = config.paths.receivers.as_ref().expect("validated");
    let mut inputs = BTreeMap::new();
    inputs.insert(strata_path.display().to_string(), sha256_file(strata_path)?);
    inputs.insert(
        receivers_path.display().to_string(),
        sha256_file(receivers_path)?,
    );
    let strata = read_strata_csv(strata_path)?;
    let mut senders: Vec<String> = strata.keys().cloned().collect();
    senders.sort();
    let mut receivers = read_receivers_csv(receivers_path)?;
    receivers.sort();
    receivers.dedup();
    let actors = Actors::new(senders, receivers, &strata)?;
    let mut report = LoadReport::default();
    let native = load_native(config, &actors, &mut report, &mut inputs)?;
    let tables = load_tables(&config.tables, &actors, &mut report, &mut inputs)?;
    Ok(World { actors, native, tables, report, inputs })
}

fn prepared_risk_set(
    world: &World,
    engine: &CovariateEngine<'_>,
    window_start: i32,
    report: &mut LoadReport,
) -> Result<(RiskSet, History)> {
    let mut risk_set = build_risk_set(&world.actors, &world.native)?;
    let history = History::with_native(&world.actors, &world.native, window_start);
    if engine.any_needs_origin() {
        report.missing_origin_removed =
            remove_missing_origin(&mut risk_set, &history, &world.actors);
    }
    Ok((risk_set, history))
}

fn ensure_out(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)
        .map_err(|e| Error::io(config.out.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub n_reps: usize,
    pub truth_hash: String,
    pub seeds: Vec<u64>,
    pub event_counts: Vec<usize>,
    pub files: Vec<String>,
}

pub fn cmd_simulate(ctx: &CommandContext) -> Result<SimulateSummary> {
    ctx.validated(RunMode::Simulate)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let sim = config.simulation.as_ref().expect("validated");
    let mut world = load_sim_world(config)?;
    let engine = CovariateEngine::new(&world.actors, &config.covariates, &world.tables)?;
    let sim_world = SimWorld {
        actors: &world.actors,
        native: &world.native,
        engine: &engine,
        window: sim.window,
    };
    let reps = run_replications(&sim.truth, &sim_world, sim.n_reps, config.seed)?;

    let rep_dir = config.out.join("replications");
    std::fs::create_dir_all(&rep_dir).map_err(|e| Error::io(rep_dir.display().to_string(), e))?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    let mut event_counts = Vec::new();
    for rep in &reps {
        let path = rep_dir.join(format!("rep_{:03}.events.csv", rep.index));
        write_events_csv(&rep.events, &world.actors, &path)?;
        files.push(path.display().to_string());
        seeds.push(rep.seed);
        event_counts.push(rep.events.len());
    }
    let summary = SimulateSummary {
        n_reps: sim.n_reps,
        truth_hash: sim.truth.hash(),
        seeds,
        event_counts,
        files: files.clone(),
    };
    let summary_path = config.out.join("simulate_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    let mut outputs = files.clone();
    outputs.push(summary_path.display().to_string());
    let manifest = ctx.manifest(
        "simulate",
        std::mem::take(&mut world.inputs),
        outputs,
        Some(world.report.clone()),
    );
    ctx.write_manifest(&manifest)?;
    Ok(summary)
}

pub fn write_events_csv(seq: &EventSequence, actors: &Actors, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(["sender", "receiver", "year", "rank"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for e in seq.events() {
        w.write_record([
            actors.sender_name(e.dyad.sender).to_string(),
            actors.receiver_name(e.dyad.receiver).to_string(),
            e.year.to_string(),
            e.rank.to_string(),
        ])
        .map_err(|err| Error::csv(path.display().to_string(), err))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn cmd_sample(ctx: &CommandContext) -> Result<PathBuf> {
    ctx.validated(RunMode::Sample)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let (mut world, events, window) = load_event_world(config)?;
    let engine = CovariateEngine::new(&world.actors, &config.covariates, &world.tables)?;
    let mut report = world.report.clone();
    let (risk_set, history) = prepared_risk_set(&world, &engine, window.0, &mut report)?;
    let sequence = EventSequence::new(events, window)?;
    let dataset = build_case_control_dataset(
        &sequence,
        risk_set,
        history,
        &engine,
        config.model.m,
        config.model.matched,
        config.seed,
    )?;
    let path = config.dataset_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    write_dataset_csv(&dataset, &path)?;
    let manifest = ctx.manifest(
        "sample",
        std::mem::take(&mut world.inputs),
        vec![
            path.display().to_string(),
            crate::sampling::sidecar_path(&path).display().to_string(),
        ],
        Some(report),
    );
    ctx.write_manifest(&manifest)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn fit_options(config: &RunConfig) -> FitOptions {
    FitOptions {
        criterion: config.model.criterion,
        ..FitOptions::default()
    }
}

fn curve_grid(dataset: &CaseControlDataset, points: usize) -> Vec<f64> {
    let years = dataset.event_years();
    let lo = *years.first().unwrap() as f64;
    let hi = *years.last().unwrap() as f64;
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn cmd_fit(ctx: &CommandContext) -> Result<PathBuf> {
    ctx.validated(RunMode::Fit)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let dataset_path = config.dataset_path();
    let dataset = read_dataset_csv(&dataset_path)?;
    let fit = fit_smooth_rem(&dataset, &config.model.terms, &fit_options(config))?;
    let fit_path = config.fit_path();
    std::fs::write(&fit_path, fit.to_json()?)
        .map_err(|e| Error::io(fit_path.display().to_string(), e))?;

    let mut outputs = vec![fit_path.display().to_string()];
    let grid_points = config.report.as_ref().map(|r| r.grid_points).unwrap_or(50);
    let grid = curve_grid(&dataset, grid_points);
    for term in &config.model.terms {
        if matches!(term.kind, TermKind::TimeVarying { .. }) {
            let curve = evaluate_tv_effect(&fit, &term.name, &grid)?;
            let path = config.out.join(format!("curve_{}.csv", term.name));
            write_curve_csv(&curve, &path)?;
            outputs.push(path.display().to_string());
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert(dataset_path.display().to_string(), sha256_file(&dataset_path)?);
    let manifest = ctx.manifest("fit", inputs, outputs, None);
    ctx.write_manifest(&manifest)?;
    Ok(fit_path)
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

pub fn cmd_baseline(ctx: &CommandContext) -> Result<PathBuf> {
    ctx.validated(RunMode::Baseline)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let dataset_path = config.dataset_path();
    let fit_path = config.fit_path();
    let dataset = read_dataset_csv(&dataset_path)?;
    let fit = FitResult::from_json(
        &std::fs::read_to_string(&fit_path)
            .map_err(|e| Error::io(fit_path.display().to_string(), e))?,
    )?;
    let mut estimates = breslow_matched(&fit, &dataset)?;
    estimates.push(breslow_pooled(&fit, &dataset)?);
    let path = config.out.join("baseline.csv");
    write_baseline_csv(&estimates, &path)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(dataset_path.display().to_string(), sha256_file(&dataset_path)?);
    inputs.insert(fit_path.display().to_string(), sha256_file(&fit_path)?);
    let manifest = ctx.manifest("baseline", inputs, vec![path.display().to_string()], None);
    ctx.write_manifest(&manifest)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// gof
// ---------------------------------------------------------------------------

pub fn cmd_gof(ctx: &CommandContext) -> Result<PathBuf> {
    ctx.validated(RunMode::Gof)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let dataset_path = config.dataset_path();
    let fit_path = config.fit_path();
    let dataset = read_dataset_csv(&dataset_path)?;
    let fit = FitResult::from_json(
        &std::fs::read_to_string(&fit_path)
            .map_err(|e| Error::io(fit_path.display().to_string(), e))?,
    )?;
    let report = gof_report(&fit, &dataset)?;
    let csv_path = config.out.join("gof.csv");
    write_gof_csv(&report, &csv_path)?;
    let summary_path = config.out.join("gof_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&report.summary)?)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(dataset_path.display().to_string(), sha256_file(&dataset_path)?);
    inputs.insert(fit_path.display().to_string(), sha256_file(&fit_path)?);
    let manifest = ctx.manifest(
        "gof",
        inputs,
        vec![csv_path.display().to_string(), summary_path.display().to_string()],
        None,
    );
    ctx.write_manifest(&manifest)?;
    Ok(csv_path)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AicRow {
    pub model_index: usize,
    pub terms: Vec<String>,
    pub d: usize,
    pub edf_corrected: f64,
    pub log_pl: f64,
    pub aic_corrected: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub aic_table: Vec<AicRow>,
    pub best_index: usize,
    pub curves: BTreeMap<String, SmoothCurve>,
    pub gof: GofSummary,
}

pub fn cmd_report(ctx: &CommandContext) -> Result<PathBuf> {
    use rayon::prelude::*;
    ctx.validated(RunMode::Report)?;
    let config = &ctx.config;
    ensure_out(config)?;
    let report_cfg = config.report.as_ref().expect("validated");
    let dataset_path = config.dataset_path();
    let dataset = read_dataset_csv(&dataset_path)?;
    let options = fit_options(config);

    let candidates: Vec<Vec<TermSpec>> = report_cfg
        .candidates
        .iter()
        .map(|names| {
            names
                .iter()
                .map(|n| {
                    config
                        .model
                        .terms
                        .iter()
                        .find(|t| &t.name == n)
                        .cloned()
                        .expect("validated: candidate names exist")
                })
                .collect()
        })
        .collect();

    let fits: Vec<Result<FitResult>> = candidates
        .par_iter()
        .map(|terms| fit_smooth_rem(&dataset, terms, &options))
        .collect();
    let mut rows = Vec::new();
    let mut fitted = Vec::new();
    for (i, (fit, names)) in fits.into_iter().zip(&report_cfg.candidates).enumerate() {
        let fit = fit.map_err(|e| {
            Error::Spec(format!("candidate model {i} ({}) failed: {e}", names.join("+")))
        })?;
        rows.push(AicRow {
            model_index: i,
            terms: names.clone(),
            d: fit.layout.d,
            edf_corrected: fit.edf_corrected,
            log_pl: fit.log_pl,
            aic_corrected: fit.aic_corrected,
            is_best: false,
        });
        fitted.push(fit);
    }
    let best_index = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.aic_corrected.partial_cmp(&b.1.aic_corrected).unwrap())
        .map(|(i, _)| i)
        .expect("validated: at least one candidate");
    rows[best_index].is_best = true;

    let table_path = config.out.join("report_aic.csv");
    {
        let mut w = csv::Writer::from_path(&table_path)
            .map_err(|e| Error::csv(table_path.display().to_string(), e))?;
        w.write_record(["model_index", "terms", "d", "edf_corrected", "log_pl", "aic_corrected", "is_best"])
            .map_err(|e| Error::csv(table_path.display().to_string(), e))?;
        for r in &rows {
            w.write_record([
                r.model_index.to_string(),
                r.terms.join("+"),
                r.d.to_string(),
                format!("{}", r.edf_corrected),
                format!("{}", r.log_pl),
                format!("{}", r.aic_corrected),
                r.is_best.to_string(),
            ])
            .map_err(|e| Error::csv(table_path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(table_path.display().to_string(), e))?;
    }

    let best = &fitted[best_index];
    let grid = curve_grid(&dataset, report_cfg.grid_points);
    let mut curves = BTreeMap::new();
    for spec in &candidates[best_index] {
        if matches!(spec.kind, TermKind::TimeVarying { .. }) {
            curves.insert(spec.name.clone(), evaluate_tv_effect(best, &spec.name, &grid)?);
        }
    }
    let gof = gof_report(best, &dataset)?.summary;
    let summary = ReportSummary { aic_table: rows, best_index, curves, gof };
    let path = config.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut inputs = BTreeMap::new();
    inputs.insert(dataset_path.display().to_string(), sha256_file(&dataset_path)?);
    let manifest = ctx.manifest(
        "report",
        inputs,
        vec![table_path.display().to_string(), path.display().to_string()],
        None,
    );
    ctx.write_manifest(&manifest)?;
    Ok(path)
}
