//! Non-parametric cumulative baseline hazard from the sampled cohort data.
//!
//! Matched estimator: per stratum g, each event in g contributes
//! 1 / (sum over its sampled set of exp(eta) * n_g(t_k)/m). Pooled estimator:
//! same form with n(t_k) in place of n_g, one curve over all strata; it
//! derives from the general sampled-cohort weights with cross-stratum sampled
//! sets assigned probability zero, which under uniform within-stratum
//! sampling makes every member's weight n(t)/m. Linear predictors are
//! rebuilt from the rows' absolute covariate values (differences cannot
//! recover per-dyad rates).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::sampling::{CaseControlDataset, CaseControlRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Matched,
    Pooled,
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineMode::Matched => f.write_str("matched"),
            BaselineMode::Pooled => f.write_str("pooled"),
        }
    }
}

/// One event's step in the estimated cumulative baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineStep {
    pub year: i32,
    pub event_index: usize,
    pub increment: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineEstimate {
    /// stratum name, or "pooled"
    pub stratum: String,
    pub mode: BaselineMode,
    pub steps: Vec<BaselineStep>,
}

impl BaselineEstimate {
    pub fn cumulative_at(&self, year: i32) -> f64 {
        let mut cum = 0.0;
        for s in &self.steps {
            if s.year > year {
                break;
            }
            cum = s.cumulative;
        }
        cum
    }
}

/// Per-event exponentiated linear predictors plus the risk counts, the only
/// inputs the estimators need.
#[derive(Debug, Clone)]
pub struct EventRates {
    pub event_index: usize,
    pub year: i32,
    pub stratum: String,
    /// exp(eta) for every member of the sampled set (case first)
    pub exp_eta: Vec<f64>,
    pub n_at_risk: usize,
    pub n_at_risk_stratum: usize,
}

fn eta_of_row(fit: &FitResult, r: &CaseControlRow, case: bool) -> f64 {
    if case {
        fit.eta_absolute(
            r.year as f64,
            &r.x_case,
            &r.case_sender,
            &r.case_receiver,
            &r.case_labels,
        )
    } else {
        fit.eta_absolute(
            r.year as f64,
            &r.x_ctrl,
            &r.ctrl_sender,
            &r.ctrl_receiver,
            &r.ctrl_labels,
        )
    }
}

/// Rebuild per-event sampled-set rates from the fitted coefficients.
pub fn event_rates(fit: &FitResult, dataset: &CaseControlDataset) -> Result<Vec<EventRates>> {
    let mut out = Vec::new();
    for group in dataset.event_groups() {
        let first = &group[0];
        if first.n_at_risk_stratum == 0 {
            return Err(Error::Data(format!(
                "event {} carries no stratum at-risk count",
                first.event_index
            )));
        }
        let mut exp_eta = Vec::with_capacity(group.len() + 1);
        let eta_case = eta_of_row(fit, first, true);
        exp_eta.push(eta_case.exp());
        for r in group {
            exp_eta.push(eta_of_row(fit, r, false).exp());
        }
        if let Some(bad) = exp_eta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite rate for event {} member {bad}",
                first.event_index
            )));
        }
        out.push(EventRates {
            event_index: first.event_index,
            year: first.year,
            stratum: first.stratum.clone(),
            exp_eta,
            n_at_risk: first.n_at_risk,
            n_at_risk_stratum: first.n_at_risk_stratum,
        });
    }
    Ok(out)
}

/// Core accumulation shared by both estimators; `m` is the sampled-set size.
pub fn baseline_from_rates(
    rates: &[EventRates],
    m: usize,
    mode: BaselineMode,
) -> Vec<BaselineEstimate> {
    let mut curves: BTreeMap<String, Vec<BaselineStep>> = BTreeMap::new();
    for ev in rates {
        let denom_sum: f64 = ev.exp_eta.iter().sum();
        let count = match mode {
            BaselineMode::Matched => ev.n_at_risk_stratum,
            BaselineMode::Pooled => ev.n_at_risk,
        };
        let increment = 1.0 / (denom_sum * count as f64 / m as f64);
        let key = match mode {
            BaselineMode::Matched => ev.stratum.clone(),
            BaselineMode::Pooled => "pooled".to_string(),
        };
        curves.entry(key).or_default().push(BaselineStep {
            year: ev.year,
            event_index: ev.event_index,
            increment,
            cumulative: 0.0,
        });
    }
    curves
        .into_iter()
        .map(|(stratum, mut steps)| {
            steps.sort_by_key(|s| (s.year, s.event_index));
            let mut cum = 0.0;
            for s in steps.iter_mut() {
                cum += s.increment;
                s.cumulative = cum;
            }
            BaselineEstimate { stratum, mode, steps }
        })
        .collect()
}

/// Matched estimator: one curve per stratum.
pub fn breslow_matched(
    fit: &FitResult,
    dataset: &CaseControlDataset,
) -> Result<Vec<BaselineEstimate>> {
    let rates = event_rates(fit, dataset)?;
    Ok(baseline_from_rates(&rates, dataset.m, BaselineMode::Matched))
}

/// Pooled estimator: a single curve across strata.
pub fn breslow_pooled(
    fit: &FitResult,
    dataset: &CaseControlDataset,
) -> Result<BaselineEstimate> {
    let rates = event_rates(fit, dataset)?;
    let mut curves = baseline_from_rates(&rates, dataset.m, BaselineMode::Pooled);
    Ok(curves.remove(0))
}

/// Export curves as `stratum,year,increment,cumulative,mode`, one row per
/// year with the year-end cumulative (events within a year are summed).
pub fn write_baseline_csv(estimates: &[BaselineEstimate], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(["stratum", "year", "increment", "cumulative", "mode"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for est in estimates {
        let mut by_year: BTreeMap<i32, (f64, f64)> = BTreeMap::new();
        for s in &est.steps {
            let e = by_year.entry(s.year).or_insert((0.0, 0.0));
            e.0 += s.increment;
            e.1 = s.cumulative;
        }
        for (year, (inc, cum)) in by_year {
            w.write_record([
                est.stratum.clone(),
                year.to_string(),
                format!("{inc}"),
                format!("{cum}"),
                est.mode.to_string(),
            ])
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
