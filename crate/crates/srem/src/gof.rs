//! Receiver-stratified martingale-residual goodness-of-fit statistics.
//!
//! For a receiver r0, each event contributes I[case receiver = r0] minus the
//! fitted share phi_k of the sampled set's total rate carried by members with
//! receiver r0 (the per-member sampling probabilities are uniform within a
//! set and cancel). The terminal statistic standardized by the plug-in
//! variance sum phi_k (1 - phi_k) is asymptotically standard normal under a
//! correct model; receivers are tested jointly with a Benjamini-Hochberg
//! correction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::baseline::event_rates;
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::sampling::CaseControlDataset;

/// Receivers with fewer events than this are reported but excluded from the
/// KS normality summary.
pub const MIN_EVENTS_FOR_KS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GofRow {
    pub receiver: String,
    /// events where this receiver was the case
    pub events: usize,
    pub g: f64,
    pub variance: f64,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    /// true when the variance estimate is zero (receiver untestable)
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GofSummary {
    /// KS distance of the standardized statistics from N(0,1)
    pub ks_distance: f64,
    pub ks_p_value: f64,
    /// receivers entering the KS summary (>= MIN_EVENTS_FOR_KS events)
    pub ks_receivers: usize,
    pub excluded_small: usize,
    pub rejections_raw_5pct: usize,
    pub rejections_fdr_5pct: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GofReport {
    pub rows: Vec<GofRow>,
    pub summary: GofSummary,
}

/// G_{r0}(tau) and its variance estimate for a single receiver.
pub fn martingale_gof_process(
    fit: &FitResult,
    dataset: &CaseControlDataset,
    receiver: &str,
) -> Result<(f64, f64)> {
    let per = per_receiver_stats(fit, dataset)?;
    Ok(per
        .get(receiver)
        .map(|s| (s.g, s.variance))
        .unwrap_or((0.0, 0.0)))
}

/// z = G / sqrt(variance); None (flagged) when the variance is zero.
pub fn standardized_statistic(g: f64, variance: f64) -> Option<f64> {
    if variance > 0.0 {
        Some(g / variance.sqrt())
    } else {
        None
    }
}

/// Benjamini-Hochberg step-up adjustment: monotone, capped at 1.
pub fn fdr_adjust(pvalues: &[f64]) -> Vec<f64> {
    let n = pvalues.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pvalues[a].partial_cmp(&pvalues[b]).unwrap());
    let mut q = vec![0.0; n];
    let mut running_min = 1.0_f64;
    for rank in (0..n).rev() {
        let idx = order[rank];
        let adj = (pvalues[idx] * n as f64 / (rank + 1) as f64).min(1.0);
        running_min = running_min.min(adj);
        q[idx] = running_min;
    }
    q
}

#[derive(Debug, Clone, Default)]
struct ReceiverAccum {
    g: f64,
    variance: f64,
    events: usize,
    present: bool,
}

fn per_receiver_stats(
    fit: &FitResult,
    dataset: &CaseControlDataset,
) -> Result<BTreeMap<String, ReceiverAccum>> {
    let rates = event_rates(fit, dataset)?;
    let groups = dataset.event_groups();
    let mut map: BTreeMap<String, ReceiverAccum> = BTreeMap::new();
    // every receiver ever present in a sampled set is tracked
    for group in &groups {
        for r in group.iter() {
            map.entry(r.case_receiver.clone()).or_default();
            map.entry(r.ctrl_receiver.clone()).or_default();
        }
    }
    for (ev, group) in rates.iter().zip(&groups) {
        let total: f64 = ev.exp_eta.iter().sum();
        let case_receiver = &group[0].case_receiver;
        // share of the set's rate per receiver present in this sampled set
        let mut shares: BTreeMap<&str, f64> = BTreeMap::new();
        *shares.entry(case_receiver.as_str()).or_insert(0.0) += ev.exp_eta[0];
        for (j, r) in group.iter().enumerate() {
            *shares.entry(r.ctrl_receiver.as_str()).or_insert(0.0) += ev.exp_eta[j + 1];
        }
        for (receiver, rate) in shares {
            let phi = rate / total;
            let s = map.get_mut(receiver).expect("receiver registered above");
            let indicator = if receiver == case_receiver { 1.0 } else { 0.0 };
            s.g += indicator - phi;
            s.variance += phi * (1.0 - phi);
            s.present = true;
        }
        map.get_mut(case_receiver.as_str())
            .expect("case receiver registered")
            .events += 1;
    }
    Ok(map)
}

/// Kolmogorov-Smirnov distance of a sample from the standard normal, with the
/// Stephens-corrected asymptotic p-value.
pub fn ks_normal(sample: &[f64]) -> (f64, f64) {
    if sample.is_empty() {
        return (0.0, 1.0);
    }
    let mut z: Vec<f64> = sample.to_vec();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = z.len() as f64;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut d = 0.0_f64;
    for (i, &v) in z.iter().enumerate() {
        let cdf = normal.cdf(v);
        d = d.max(((i + 1) as f64 / n - cdf).abs());
        d = d.max((cdf - i as f64 / n).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

/// Full per-receiver report with BH correction and the KS normality summary.
pub fn gof_report(fit: &FitResult, dataset: &CaseControlDataset) -> Result<GofReport> {
    let per = per_receiver_stats(fit, dataset)?;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut rows: Vec<GofRow> = Vec::with_capacity(per.len());
    for (receiver, s) in per {
        let z = standardized_statistic(s.g, s.variance);
        let p = z.map(|z| 2.0 * (1.0 - normal.cdf(z.abs())));
        rows.push(GofRow {
            receiver,
            events: s.events,
            g: s.g,
            variance: s.variance,
            z,
            p,
            q: None,
            flagged: z.is_none(),
        });
    }
    // BH across testable receivers
    let testable: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p.is_some()).collect();
    let pvals: Vec<f64> = testable.iter().map(|&i| rows[i].p.unwrap()).collect();
    let qvals = fdr_adjust(&pvals);
    for (&i, q) in testable.iter().zip(qvals) {
        rows[i].q = Some(q);
    }

    let ks_sample: Vec<f64> = rows
        .iter()
        .filter(|r| r.events >= MIN_EVENTS_FOR_KS)
        .filter_map(|r| r.z)
        .collect();
    let excluded_small = rows
        .iter()
        .filter(|r| r.z.is_some() && r.events < MIN_EVENTS_FOR_KS)
        .count();
    let (ks_distance, ks_p_value) = ks_normal(&ks_sample);
    let rejections_raw_5pct = rows.iter().filter(|r| r.p.is_some_and(|p| p < 0.05)).count();
    let rejections_fdr_5pct = rows.iter().filter(|r| r.q.is_some_and(|q| q < 0.05)).count();
    Ok(GofReport {
        summary: GofSummary {
            ks_distance,
            ks_p_value,
            ks_receivers: ks_sample.len(),
            excluded_small,
            rejections_raw_5pct,
            rejections_fdr_5pct,
        },
        rows,
    })
}

/// `receiver,events,G,variance,z,p,q,flag`
pub fn write_gof_csv(report: &GofReport, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(["receiver", "events", "G", "variance", "z", "p", "q", "flag"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.receiver.clone(),
            r.events.to_string(),
            format!("{}", r.g),
            format!("{}", r.variance),
            opt(r.z),
            opt(r.p),
            opt(r.q),
            if r.flagged { "zero_variance".into() } else { String::new() },
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
