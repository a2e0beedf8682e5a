//! Nested case-control sampling: per event, the case plus m-1 controls drawn
//! uniformly without replacement from the (optionally stratum-matched) risk
//! set, yielding the covariate-difference rows of the sampled partial
//! likelihood.
//!
//! Controls are drawn on the risk set before the current event's dyad is
//! removed, with the case excluded explicitly; within a year, earlier-ranked
//! events leave the risk set before later-ranked events sample.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariates::{relabel_rare, CovariateEngine};
use crate::error::{Error, Result};
use crate::events::{
    apply_event, validate_sequence, Actors, Dyad, EventSequence, History, RiskSet,
};
use crate::rng::{substream, Domain};

/// The sampled risk set for one event.
#[derive(Debug, Clone)]
pub struct SampledRiskSet {
    pub event_index: usize,
    pub case: Dyad,
    pub controls: Vec<Dyad>,
    pub weight_per_control: f64,
    pub stratum: crate::events::StratumId,
}

/// Probability of any admissible control set: 1 / C(n'-1, m-1), where n' is
/// the relevant at-risk count. For m = 2 this is 1/(n-1).
pub fn control_set_probability(n_relevant: usize, m: usize) -> f64 {
    let mut c = 1.0;
    for i in 0..(m - 1) {
        c = c * (n_relevant - 1 - i) as f64 / (i + 1) as f64;
    }
    1.0 / c
}

/// Draw m-1 distinct controls for `case`, uniformly from the risk set
/// (restricted to the case's stratum when `matched`), excluding the case.
pub fn sample_controls(
    event_index: usize,
    case: Dyad,
    risk_set: &RiskSet,
    actors: &Actors,
    m: usize,
    matched: bool,
    rng: &mut impl Rng,
) -> Result<SampledRiskSet> {
    assert!(m >= 2, "m must be at least 2");
    let stratum = actors.stratum_of(case.sender);
    if !risk_set.contains(case) {
        return Err(Error::Sequencing(format!(
            "case dyad (sender {}, receiver {}) is not at risk at event {}",
            case.sender.0, case.receiver.0, event_index
        )));
    }
    let available = if matched {
        risk_set.n_stratum(stratum)
    } else {
        risk_set.n()
    };
    if available < m {
        return Err(Error::SamplingExhausted {
            event_index,
            available,
            requested: m,
        });
    }
    let mut controls = Vec::with_capacity(m - 1);
    let mut chosen: HashSet<Dyad> = HashSet::new();
    while controls.len() < m - 1 {
        let candidate = if matched {
            let slice = risk_set.stratum_slice(stratum);
            slice[rng.gen_range(0..slice.len())]
        } else {
            // pick a stratum proportional to its size, then uniform inside
            let mut idx = rng.gen_range(0..risk_set.n());
            let mut found = None;
            for g in 0..risk_set.n_strata() {
                let slice = risk_set.stratum_slice(crate::events::StratumId(g as u32));
                if idx < slice.len() {
                    found = Some(slice[idx]);
                    break;
                }
                idx -= slice.len();
            }
            found.expect("index within total risk-set size")
        };
        if candidate == case || chosen.contains(&candidate) {
            continue;
        }
        chosen.insert(candidate);
        controls.push(candidate);
    }
    Ok(SampledRiskSet {
        event_index,
        case,
        controls,
        weight_per_control: 1.0 / (m - 1) as f64,
        stratum,
    })
}

/// One case-control comparison row. Besides the covariate differences that
/// enter the likelihood, the row keeps the absolute covariate values, factor
/// labels and at-risk counts needed by the baseline and goodness-of-fit
/// estimators downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseControlRow {
    pub event_index: usize,
    pub year: i32,
    pub stratum: String,
    pub weight: f64,
    pub x_diff: Vec<f64>,
    pub x_case: Vec<f64>,
    pub x_ctrl: Vec<f64>,
    pub case_labels: Vec<String>,
    pub ctrl_labels: Vec<String>,
    pub case_sender: String,
    pub case_receiver: String,
    pub ctrl_sender: String,
    pub ctrl_receiver: String,
    /// n(t_k): dyads at risk when the event fired (case included)
    pub n_at_risk: usize,
    /// n_g(t_k): at-risk dyads in the case's stratum
    pub n_at_risk_stratum: usize,
}

/// Sidecar metadata identifying how a dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub m: usize,
    pub matched: bool,
    pub n_events: usize,
    pub window: (i32, i32),
    /// hash of covariate names and sampling settings
    pub spec_hash: String,
}

#[derive(Debug, Clone)]
pub struct CaseControlDataset {
    pub rows: Vec<CaseControlRow>,
    pub x_names: Vec<String>,
    pub label_names: Vec<String>,
    pub m: usize,
    pub matched: bool,
    pub seed: u64,
    pub n_events: usize,
    pub window: (i32, i32),
    /// stratum of every sender observed as case or control (random-effect
    /// blocks split by stratum need it)
    pub sender_strata: BTreeMap<String, String>,
}

impl CaseControlDataset {
    pub fn spec_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!(
            "m={};matched={};seed={};x={};labels={}",
            self.m,
            self.matched,
            self.seed,
            self.x_names.join(","),
            self.label_names.join(","),
        ));
        hex_string(&h.finalize())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.seed,
            m: self.m,
            matched: self.matched,
            n_events: self.n_events,
            window: self.window,
            spec_hash: self.spec_hash(),
        }
    }

    /// Unique event years in ascending order.
    pub fn event_years(&self) -> Vec<i32> {
        let mut years: Vec<i32> = self.rows.iter().map(|r| r.year).collect();
        years.sort_unstable();
        years.dedup();
        years
    }

    /// Rows grouped by event, in event order.
    pub fn event_groups(&self) -> Vec<&[CaseControlRow]> {
        let mut groups = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].event_index != self.rows[start].event_index {
                groups.push(&self.rows[start..i]);
                start = i;
            }
        }
        groups
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Replay the sequence and build the case-control dataset: for each event,
/// m-1 rows pairing the case with one sampled control, covariates evaluated
/// on the pre-event year snapshot. Deterministic given the seed; control
/// draws use per-event substreams so changing m leaves earlier events'
/// controls intact.
#[allow(clippy::too_many_arguments)]
pub fn build_case_control_dataset(
    sequence: &EventSequence,
    mut risk_set: RiskSet,
    mut history: History,
    engine: &CovariateEngine<'_>,
    m: usize,
    matched: bool,
    seed: u64,
) -> Result<CaseControlDataset> {
    let violations = validate_sequence(sequence.events(), &risk_set);
    if let Some(v) = violations.first() {
        return Err(Error::Sequencing(format!(
            "sequence invalid at event {}: {}",
            v.event_index, v.kind
        )));
    }
    let actors = engine.actors;
    let x_names = engine.x_names();
    let label_names = engine.label_names();
    let mut rows: Vec<CaseControlRow> = Vec::with_capacity(sequence.len() * (m - 1));
    let mut sender_strata: BTreeMap<String, String> = BTreeMap::new();

    let record_sender = |map: &mut BTreeMap<String, String>, d: Dyad| {
        let name = actors.sender_name(d.sender).to_string();
        let g = actors.stratum_name(actors.stratum_of(d.sender)).to_string();
        map.entry(name).or_insert(g);
    };

    for (k, event) in sequence.events().iter().enumerate() {
        let snapshot = engine.snapshot(&history, event.year);
        let mut rng = substream(seed, Domain::ControlSampling, k as u64);
        let sampled = sample_controls(k, event.dyad, &risk_set, actors, m, matched, &mut rng)?;
        let n_at_risk = risk_set.n();
        let n_at_risk_stratum = risk_set.n_stratum(sampled.stratum);
        let x_case = snapshot.x_values(event.dyad)?;
        let case_labels = snapshot.labels(event.dyad);
        record_sender(&mut sender_strata, event.dyad);
        for control in &sampled.controls {
            let x_ctrl = snapshot.x_values(*control)?;
            let ctrl_labels = snapshot.labels(*control);
            record_sender(&mut sender_strata, *control);
            let x_diff: Vec<f64> = x_case
                .iter()
                .zip(&x_ctrl)
                .map(|(c, t)| c - t)
                .collect();
            rows.push(CaseControlRow {
                event_index: k,
                year: event.year,
                stratum: actors.stratum_name(sampled.stratum).to_string(),
                weight: sampled.weight_per_control,
                x_diff,
                x_case: x_case.clone(),
                x_ctrl,
                case_labels: case_labels.clone(),
                ctrl_labels,
                case_sender: actors.sender_name(event.dyad.sender).to_string(),
                case_receiver: actors.receiver_name(event.dyad.receiver).to_string(),
                ctrl_sender: actors.sender_name(control.sender).to_string(),
                ctrl_receiver: actors.receiver_name(control.receiver).to_string(),
                n_at_risk,
                n_at_risk_stratum,
            });
        }
        apply_event(&mut risk_set, &mut history, event)?;
    }

    // rare-singleton relabeling across case and control columns jointly
    for (li, wants) in engine.label_relabel_flags().iter().enumerate() {
        if !wants {
            continue;
        }
        let mut case_col: Vec<String> = rows.iter().map(|r| r.case_labels[li].clone()).collect();
        let mut ctrl_col: Vec<String> = rows.iter().map(|r| r.ctrl_labels[li].clone()).collect();
        relabel_rare(&mut [&mut case_col, &mut ctrl_col]);
        for (r, (c, t)) in rows.iter_mut().zip(case_col.into_iter().zip(ctrl_col)) {
            r.case_labels[li] = c;
            r.ctrl_labels[li] = t;
        }
    }

    Ok(CaseControlDataset {
        rows,
        x_names,
        label_names,
        m,
        matched,
        seed,
        n_events: sequence.len(),
        window: sequence.window,
        sender_strata,
    })
}

// ---------------------------------------------------------------------------
// CSV round-trip
// ---------------------------------------------------------------------------

/// Write the dataset CSV plus its JSON sidecar (`<path>.meta.json`).
pub fn write_dataset_csv(dataset: &CaseControlDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    let mut header: Vec<String> = vec![
        "event_index".into(),
        "year".into(),
        "stratum".into(),
        "weight".into(),
    ];
    for n in &dataset.x_names {
        header.push(format!("x_diff_{n}"));
    }
    for n in &dataset.label_names {
        header.push(format!("case_label_{n}"));
        header.push(format!("control_label_{n}"));
    }
    for n in &dataset.x_names {
        header.push(format!("case_x_{n}"));
    }
    for n in &dataset.x_names {
        header.push(format!("ctrl_x_{n}"));
    }
    header.extend(
        [
            "case_sender",
            "case_receiver",
            "ctrl_sender",
            "ctrl_receiver",
            "n_at_risk",
            "n_at_risk_stratum",
        ]
        .map(String::from),
    );
    w.write_record(&header)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for r in &dataset.rows {
        let mut rec: Vec<String> = vec![
            r.event_index.to_string(),
            r.year.to_string(),
            r.stratum.clone(),
            fmt_f64(r.weight),
        ];
        rec.extend(r.x_diff.iter().map(|v| fmt_f64(*v)));
        for (c, t) in r.case_labels.iter().zip(&r.ctrl_labels) {
            rec.push(c.clone());
            rec.push(t.clone());
        }
        rec.extend(r.x_case.iter().map(|v| fmt_f64(*v)));
        rec.extend(r.x_ctrl.iter().map(|v| fmt_f64(*v)));
        rec.push(r.case_sender.clone());
        rec.push(r.case_receiver.clone());
        rec.push(r.ctrl_sender.clone());
        rec.push(r.ctrl_receiver.clone());
        rec.push(r.n_at_risk.to_string());
        rec.push(r.n_at_risk_stratum.to_string());
        w.write_record(&rec)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&dataset.meta())?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    std::path::PathBuf::from(p)
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v}")
}

/// Read a dataset CSV written by `write_dataset_csv` (sidecar required).
pub fn read_dataset_csv(path: &Path) -> Result<CaseControlDataset> {
    let meta_path = sidecar_path(path);
    let meta_raw = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .iter()
        .map(String::from)
        .collect();
    let x_names: Vec<String> = headers
        .iter()
        .filter_map(|h| h.strip_prefix("x_diff_").map(String::from))
        .collect();
    let label_names: Vec<String> = headers
        .iter()
        .filter_map(|h| h.strip_prefix("case_label_").map(String::from))
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let p = x_names.len();
    let idx_event = col("event_index")?;
    let idx_year = col("year")?;
    let idx_stratum = col("stratum")?;
    let idx_weight = col("weight")?;
    let idx_xdiff = col(&format!("x_diff_{}", x_names.first().map(String::as_str).unwrap_or("")))
        .unwrap_or(4);
    let idx_case_x = if p > 0 { col(&format!("case_x_{}", x_names[0]))? } else { 0 };
    let idx_ctrl_x = if p > 0 { col(&format!("ctrl_x_{}", x_names[0]))? } else { 0 };
    let idx_cs = col("case_sender")?;
    let idx_cr = col("case_receiver")?;
    let idx_ts = col("ctrl_sender")?;
    let idx_tr = col("ctrl_receiver")?;
    let idx_n = col("n_at_risk")?;
    let idx_ng = col("n_at_risk_stratum")?;
    let label_idx: Vec<(usize, usize)> = label_names
        .iter()
        .map(|n| {
            Ok((
                col(&format!("case_label_{n}"))?,
                col(&format!("control_label_{n}"))?,
            ))
        })
        .collect::<Result<_>>()?;

    let parse_f = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Data(format!("{}: bad float '{s}'", path.display())))
    };
    let mut rows = Vec::new();
    let mut sender_strata: BTreeMap<String, String> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let x_diff: Vec<f64> = (0..p).map(|j| parse_f(get(idx_xdiff + j))).collect::<Result<_>>()?;
        let x_case: Vec<f64> = (0..p).map(|j| parse_f(get(idx_case_x + j))).collect::<Result<_>>()?;
        let x_ctrl: Vec<f64> = (0..p).map(|j| parse_f(get(idx_ctrl_x + j))).collect::<Result<_>>()?;
        let case_labels: Vec<String> = label_idx.iter().map(|&(c, _)| get(c).to_string()).collect();
        let ctrl_labels: Vec<String> = label_idx.iter().map(|&(_, t)| get(t).to_string()).collect();
        let stratum = get(idx_stratum).to_string();
        let row = CaseControlRow {
            event_index: get(idx_event)
                .parse()
                .map_err(|_| Error::Data("bad event_index".into()))?,
            year: get(idx_year).parse().map_err(|_| Error::Data("bad year".into()))?,
            stratum: stratum.clone(),
            weight: parse_f(get(idx_weight))?,
            x_diff,
            x_case,
            x_ctrl,
            case_labels,
            ctrl_labels,
            case_sender: get(idx_cs).to_string(),
            case_receiver: get(idx_cr).to_string(),
            ctrl_sender: get(idx_ts).to_string(),
            ctrl_receiver: get(idx_tr).to_string(),
            n_at_risk: get(idx_n).parse().map_err(|_| Error::Data("bad n_at_risk".into()))?,
            n_at_risk_stratum: get(idx_ng)
                .parse()
                .map_err(|_| Error::Data("bad n_at_risk_stratum".into()))?,
        };
        // matched sampling: control sender shares the case's stratum; record
        // both senders under the row stratum, control under its own when the
        // dataset is unmatched (then the stratum column still names the case's)
        sender_strata
            .entry(row.case_sender.clone())
            .or_insert_with(|| stratum.clone());
        if meta.matched {
            sender_strata
                .entry(row.ctrl_sender.clone())
                .or_insert_with(|| stratum.clone());
        }
        rows.push(row);
    }
    let n_events = meta.n_events;
    Ok(CaseControlDataset {
        rows,
        x_names,
        label_names,
        m: meta.m,
        matched: meta.matched,
        seed: meta.seed,
        n_events,
        window: meta.window,
        sender_strata,
    })
}
