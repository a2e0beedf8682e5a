//! Endogenous dyadic covariates and random-effect factor labels, computed
//! from history snapshots at discrete years.
//!
//! Every evaluation is a pure function of (dyad, year, tables, history before
//! year): snapshots never see events of their own year, so replays are
//! deterministic and within-year event order cannot leak into covariates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Actors, Dyad, History, ReceiverId, SenderId};
use crate::tables::{AttributeTable, DistanceTable, GroupTable, TableSet};

pub const RARE_LABEL: &str = "Rare interaction";
pub const NOVELTY_LABEL: &str = "Novelty";

/// Elementwise transform applied after aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// log(x + offset); offset defaults to 1 so zero distances stay defined.
    Log {
        offset: f64,
    },
    Log1p,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log { offset } => (x + offset).ln(),
            Transform::Log1p => x.ln_1p(),
        }
    }
}

/// How one covariate is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateKind {
    /// Direct (sender, receiver) lookup with carry-forward years; absent
    /// pairs read 0 (precomputed flow-style tables).
    StaticDyadic { table: String },
    /// Min over regions occupied by the sender of distance(occupied, receiver).
    MinOverInvaded { table: String },
    /// Min over occupied regions of |attr(receiver, year) - attr(occupied, year)|.
    MinAbsDiffOverInvaded { table: String },
    /// 1 iff the sender occupies any region in the receiver's group.
    GroupIndicator { table: String },
    /// Factor label pairing the sender with the receiver's most recent arrival.
    LastArrival {
        #[serde(default = "default_true")]
        relabel_rare: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
    #[serde(default)]
    pub transform: Transform,
}

impl CovariateSpec {
    pub fn is_numeric(&self) -> bool {
        !matches!(self.kind, CovariateKind::LastArrival { .. })
    }

    pub fn needs_origin(&self) -> bool {
        matches!(
            self.kind,
            CovariateKind::MinOverInvaded { .. } | CovariateKind::MinAbsDiffOverInvaded { .. }
        )
    }
}

// ---------------------------------------------------------------------------
// Core evaluations
// ---------------------------------------------------------------------------

/// Minimum distance from `receiver` to a region occupied by `sender` before
/// `year`. Errors with MissingOrigin when the sender occupies nothing.
pub fn eval_min_over_invaded(
    sender: SenderId,
    receiver: ReceiverId,
    year: i32,
    table: &DistanceTable,
    history: &History,
    actors: &Actors,
    transform: Transform,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    for occupied in history.occupied_before(sender, year) {
        let d = table.get(occupied, receiver)?;
        best = Some(match best {
            None => d,
            Some(b) => b.min(d),
        });
    }
    match best {
        Some(d) => Ok(transform.apply(d)),
        None => Err(Error::MissingOrigin {
            sender: actors.sender_name(sender).to_string(),
            year,
        }),
    }
}

/// Minimum |attribute difference| between `receiver` and the sender's
/// occupied regions at `year`.
pub fn eval_min_abs_diff(
    sender: SenderId,
    receiver: ReceiverId,
    year: i32,
    table: &AttributeTable,
    history: &History,
    actors: &Actors,
    transform: Transform,
) -> Result<f64> {
    let target = table.get(receiver, year)?;
    let mut best: Option<f64> = None;
    for occupied in history.occupied_before(sender, year) {
        let diff = (table.get(occupied, year)? - target).abs();
        best = Some(match best {
            None => diff,
            Some(b) => b.min(diff),
        });
    }
    match best {
        Some(d) => Ok(transform.apply(d)),
        None => Err(Error::MissingOrigin {
            sender: actors.sender_name(sender).to_string(),
            year,
        }),
    }
}

/// 1 iff the sender occupies, before `year`, any region sharing the
/// receiver's group; independent receivers always give 0.
pub fn eval_group_indicator(
    sender: SenderId,
    receiver: ReceiverId,
    year: i32,
    table: &GroupTable,
    history: &History,
) -> f64 {
    let Some(group) = table.group(receiver) else {
        return 0.0;
    };
    for occupied in history.occupied_before(sender, year) {
        if table.group(occupied) == Some(group) {
            return 1.0;
        }
    }
    0.0
}

/// "sender.last": the sender paired with the most recent arrival in the
/// receiver strictly before `year`; "Novelty" when the receiver has none.
pub fn last_arrival_label(
    sender: SenderId,
    receiver: ReceiverId,
    year: i32,
    history: &History,
    actors: &Actors,
) -> String {
    match history.last_arrival_before(receiver, year) {
        Some(a) => format!(
            "{}.{}",
            actors.sender_name(sender),
            actors.sender_name(a.sender)
        ),
        None => NOVELTY_LABEL.to_string(),
    }
}

/// Replace every label whose frequency across all given columns is exactly 1
/// with the rare-interaction category. Idempotent: the rare category itself
/// maps back to itself.
pub fn relabel_rare(columns: &mut [&mut [String]]) {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for col in columns.iter() {
        for label in col.iter() {
            *freq.entry(label.clone()).or_insert(0) += 1;
        }
    }
    for col in columns.iter_mut() {
        for label in col.iter_mut() {
            if label != RARE_LABEL && freq[label.as_str()] == 1 {
                *label = RARE_LABEL.to_string();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Engine: evaluates a covariate spec list against history snapshots
// ---------------------------------------------------------------------------

pub struct CovariateEngine<'a> {
    pub actors: &'a Actors,
    pub specs: &'a [CovariateSpec],
    pub tables: &'a TableSet,
}

impl<'a> CovariateEngine<'a> {
    pub fn new(actors: &'a Actors, specs: &'a [CovariateSpec], tables: &'a TableSet) -> Result<Self> {
        for spec in specs {
            let ok = match &spec.kind {
                CovariateKind::StaticDyadic { table } => tables.dyadic.contains_key(table),
                CovariateKind::MinOverInvaded { table } => tables.distances.contains_key(table),
                CovariateKind::MinAbsDiffOverInvaded { table } => {
                    tables.attributes.contains_key(table)
                }
                CovariateKind::GroupIndicator { table } => tables.groups.contains_key(table),
                CovariateKind::LastArrival { .. } => true,
            };
            if !ok {
                return Err(Error::Spec(format!(
                    "covariate '{}' references a table that was not loaded",
                    spec.name
                )));
            }
        }
        Ok(CovariateEngine { actors, specs, tables })
    }

    /// Names of the numeric covariates, in spec order.
    pub fn x_names(&self) -> Vec<String> {
        self.specs
            .iter()
            .filter(|s| s.is_numeric())
            .map(|s| s.name.clone())
            .collect()
    }

    /// Names of the label (factor) covariates, in spec order.
    pub fn label_names(&self) -> Vec<String> {
        self.specs
            .iter()
            .filter(|s| !s.is_numeric())
            .map(|s| s.name.clone())
            .collect()
    }

    /// Which label covariates want the rare-singleton relabeling pass.
    pub fn label_relabel_flags(&self) -> Vec<bool> {
        self.specs
            .iter()
            .filter_map(|s| match s.kind {
                CovariateKind::LastArrival { relabel_rare } => Some(relabel_rare),
                _ => None,
            })
            .collect()
    }

    pub fn any_needs_origin(&self) -> bool {
        self.specs.iter().any(|s| s.needs_origin())
    }

    /// Immutable year view; safe to share across threads.
    pub fn snapshot(&'a self, history: &'a History, year: i32) -> Snapshot<'a> {
        Snapshot { engine: self, history, year }
    }
}

/// A view of the covariate process at one calendar year, built only from
/// history strictly before that year.
pub struct Snapshot<'a> {
    engine: &'a CovariateEngine<'a>,
    history: &'a History,
    pub year: i32,
}

impl<'a> Snapshot<'a> {
    /// Numeric covariate vector for a dyad, in spec order.
    pub fn x_values(&self, dyad: Dyad) -> Result<Vec<f64>> {
        let e = self.engine;
        let mut out = Vec::with_capacity(e.specs.len());
        for spec in e.specs {
            match &spec.kind {
                CovariateKind::StaticDyadic { table } => {
                    let v = e.tables.dyadic[table].get(dyad, self.year);
                    out.push(spec.transform.apply(v));
                }
                CovariateKind::MinOverInvaded { table } => {
                    out.push(eval_min_over_invaded(
                        dyad.sender,
                        dyad.receiver,
                        self.year,
                        &e.tables.distances[table],
                        self.history,
                        e.actors,
                        spec.transform,
                    )?);
                }
                CovariateKind::MinAbsDiffOverInvaded { table } => {
                    out.push(eval_min_abs_diff(
                        dyad.sender,
                        dyad.receiver,
                        self.year,
                        &e.tables.attributes[table],
                        self.history,
                        e.actors,
                        spec.transform,
                    )?);
                }
                CovariateKind::GroupIndicator { table } => {
                    out.push(eval_group_indicator(
                        dyad.sender,
                        dyad.receiver,
                        self.year,
                        &e.tables.groups[table],
                        self.history,
                    ));
                }
                CovariateKind::LastArrival { .. } => {}
            }
        }
        Ok(out)
    }

    /// Factor labels for a dyad, in spec order.
    pub fn labels(&self, dyad: Dyad) -> Vec<String> {
        let e = self.engine;
        e.specs
            .iter()
            .filter(|s| !s.is_numeric())
            .map(|_| {
                last_arrival_label(dyad.sender, dyad.receiver, self.year, self.history, e.actors)
            })
            .collect()
    }
}
