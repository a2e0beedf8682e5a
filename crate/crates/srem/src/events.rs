//! Relational event graph: actors, dyads, the evolving risk set, and the
//! event history (filtration).
//!
//! The graph is bimodal: senders and receivers live in disjoint id spaces,
//! enforced by the `SenderId` / `ReceiverId` newtypes and by a name-overlap
//! check when the registry is built. Events are non-recurrent: once a dyad
//! fires it leaves the risk set for good.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SenderId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReceiverId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumId(pub u32);

/// A directed sender -> receiver pair, the unit at risk of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dyad {
    pub sender: SenderId,
    pub receiver: ReceiverId,
}

impl Dyad {
    pub fn new(sender: SenderId, receiver: ReceiverId) -> Self {
        Dyad { sender, receiver }
    }
}

/// One time-stamped event. `rank` orders events sharing a year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub dyad: Dyad,
    pub year: i32,
    pub rank: u32,
}

/// Actor registry: interned sender / receiver names plus the sender -> stratum map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Actors {
    sender_names: Vec<String>,
    receiver_names: Vec<String>,
    sender_index: HashMap<String, SenderId>,
    receiver_index: HashMap<String, ReceiverId>,
    /// stratum of each sender, indexed by SenderId
    sender_stratum: Vec<StratumId>,
    stratum_names: Vec<String>,
}

impl Actors {
    /// Build the registry. `strata` must assign a stratum to every sender;
    /// sender and receiver name sets must be disjoint (bipartite graph).
    pub fn new(
        senders: Vec<String>,
        receivers: Vec<String>,
        strata: &HashMap<String, String>,
    ) -> Result<Self> {
        let receiver_set: HashSet<&String> = receivers.iter().collect();
        for s in &senders {
            if receiver_set.contains(s) {
                return Err(Error::Validation(format!(
                    "actor id '{s}' appears in both the sender and receiver sets"
                )));
            }
        }
        let mut sender_index = HashMap::new();
        for (i, name) in senders.iter().enumerate() {
            if sender_index.insert(name.clone(), SenderId(i as u32)).is_some() {
                return Err(Error::Validation(format!("duplicate sender id '{name}'")));
            }
        }
        let mut receiver_index = HashMap::new();
        for (i, name) in receivers.iter().enumerate() {
            if receiver_index
                .insert(name.clone(), ReceiverId(i as u32))
                .is_some()
            {
                return Err(Error::Validation(format!("duplicate receiver id '{name}'")));
            }
        }
        for key in strata.keys() {
            if !sender_index.contains_key(key) {
                return Err(Error::Validation(format!(
                    "strata map references unknown sender '{key}'"
                )));
            }
        }
        let mut stratum_names: Vec<String> = Vec::new();
        let mut stratum_index: HashMap<&str, StratumId> = HashMap::new();
        let mut sender_stratum = Vec::with_capacity(senders.len());
        for name in &senders {
            let label = strata.get(name).ok_or_else(|| {
                Error::Validation(format!("sender '{name}' has no stratum assignment"))
            })?;
            let id = *stratum_index.entry(label.as_str()).or_insert_with(|| {
                stratum_names.push(label.clone());
                StratumId(stratum_names.len() as u32 - 1)
            });
            sender_stratum.push(id);
        }
        Ok(Actors {
            sender_names: senders,
            receiver_names: receivers,
            sender_index,
            receiver_index,
            sender_stratum,
            stratum_names,
        })
    }

    /// Registry with every sender in a single stratum.
    pub fn single_stratum(senders: Vec<String>, receivers: Vec<String>) -> Result<Self> {
        let strata: HashMap<String, String> = senders
            .iter()
            .map(|s| (s.clone(), "all".to_string()))
            .collect();
        Actors::new(senders, receivers, &strata)
    }

    pub fn n_senders(&self) -> usize {
        self.sender_names.len()
    }

    pub fn n_receivers(&self) -> usize {
        self.receiver_names.len()
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_names.len()
    }

    pub fn sender(&self, name: &str) -> Option<SenderId> {
        self.sender_index.get(name).copied()
    }

    pub fn receiver(&self, name: &str) -> Option<ReceiverId> {
        self.receiver_index.get(name).copied()
    }

    pub fn sender_name(&self, id: SenderId) -> &str {
        &self.sender_names[id.0 as usize]
    }

    pub fn receiver_name(&self, id: ReceiverId) -> &str {
        &self.receiver_names[id.0 as usize]
    }

    pub fn stratum_of(&self, sender: SenderId) -> StratumId {
        self.sender_stratum[sender.0 as usize]
    }

    pub fn stratum_name(&self, id: StratumId) -> &str {
        &self.stratum_names[id.0 as usize]
    }

    pub fn stratum_by_name(&self, name: &str) -> Option<StratumId> {
        self.stratum_names
            .iter()
            .position(|n| n == name)
            .map(|i| StratumId(i as u32))
    }

    pub fn sender_ids(&self) -> impl Iterator<Item = SenderId> {
        (0..self.sender_names.len() as u32).map(SenderId)
    }

    pub fn receiver_ids(&self) -> impl Iterator<Item = ReceiverId> {
        (0..self.receiver_names.len() as u32).map(ReceiverId)
    }
}

/// Ordered, validated event list over an observation window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventSequence {
    events: Vec<Event>,
    pub window: (i32, i32),
}

impl EventSequence {
    /// Sorts stably by (year, rank) and enforces the type invariants:
    /// years in window, ranks unique within a year, dyads non-recurrent.
    pub fn new(mut events: Vec<Event>, window: (i32, i32)) -> Result<Self> {
        events.sort_by_key(|e| (e.year, e.rank));
        let mut seen_rank: HashSet<(i32, u32)> = HashSet::new();
        let mut seen_dyad: HashSet<Dyad> = HashSet::new();
        for e in &events {
            if e.year < window.0 || e.year > window.1 {
                return Err(Error::Validation(format!(
                    "event year {} outside observation window [{}, {}]",
                    e.year, window.0, window.1
                )));
            }
            if !seen_rank.insert((e.year, e.rank)) {
                return Err(Error::Validation(format!(
                    "duplicate within-year rank {} in year {}",
                    e.rank, e.year
                )));
            }
            if !seen_dyad.insert(e.dyad) {
                return Err(Error::Validation(format!(
                    "dyad ({}, {}) occurs more than once",
                    e.dyad.sender.0, e.dyad.receiver.0
                )));
            }
        }
        Ok(EventSequence { events, window })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// The evolving set of at-risk dyads, partitioned by sender stratum.
///
/// Storage is a contiguous array per stratum plus a position index, so
/// uniform sampling and removal (swap-delete) are both O(1).
#[derive(Debug, Clone)]
pub struct RiskSet {
    strata: Vec<Vec<Dyad>>,
    index: HashMap<Dyad, (StratumId, u32)>,
}

impl RiskSet {
    fn with_strata(n_strata: usize) -> Self {
        RiskSet {
            strata: vec![Vec::new(); n_strata],
            index: HashMap::new(),
        }
    }

    /// Total dyads currently at risk, n(t).
    pub fn n(&self) -> usize {
        self.index.len()
    }

    /// Dyads at risk in stratum g, n_g(t).
    pub fn n_stratum(&self, g: StratumId) -> usize {
        self.strata[g.0 as usize].len()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn contains(&self, dyad: Dyad) -> bool {
        self.index.contains_key(&dyad)
    }

    pub fn stratum_slice(&self, g: StratumId) -> &[Dyad] {
        &self.strata[g.0 as usize]
    }

    /// Position of a dyad inside its stratum array, if at risk.
    pub fn position(&self, dyad: Dyad) -> Option<(StratumId, usize)> {
        self.index.get(&dyad).map(|&(g, p)| (g, p as usize))
    }

    fn insert(&mut self, dyad: Dyad, g: StratumId) {
        let v = &mut self.strata[g.0 as usize];
        self.index.insert(dyad, (g, v.len() as u32));
        v.push(dyad);
    }

    /// Swap-delete; returns the stratum and the index the dyad occupied.
    pub fn remove(&mut self, dyad: Dyad) -> Result<(StratumId, usize)> {
        let (g, pos) = self.index.remove(&dyad).ok_or_else(|| {
            Error::Sequencing(format!(
                "dyad (sender {}, receiver {}) is not at risk (duplicate or excluded event)",
                dyad.sender.0, dyad.receiver.0
            ))
        })?;
        let v = &mut self.strata[g.0 as usize];
        let pos = pos as usize;
        let last = v.len() - 1;
        v.swap(pos, last);
        v.pop();
        if pos < v.len() {
            let moved = v[pos];
            self.index.insert(moved, (g, pos as u32));
        }
        Ok((g, pos))
    }
}

/// Arrival record inside a receiver's history. Seeds are native-range
/// occupations dated at the window start; they are visible at every query year.
#[derive(Debug, Clone, Copy)]
pub struct Arrival {
    pub sender: SenderId,
    pub year: i32,
    pub rank: u32,
    pub seed: bool,
}

/// Occupation record inside a sender's history.
#[derive(Debug, Clone, Copy)]
pub struct Occupation {
    pub receiver: ReceiverId,
    pub year: i32,
    pub seed: bool,
}

/// Event history with filtration semantics: a query at year t sees the
/// native range plus all events with year strictly before t.
#[derive(Debug, Clone)]
pub struct History {
    /// per receiver: seeds first (input order), then events in replay order
    receiver_arrivals: Vec<Vec<Arrival>>,
    /// per sender: seeds first, then events in replay order
    sender_occupied: Vec<Vec<Occupation>>,
    t_start: i32,
}

impl History {
    /// Empty history seeded with the native range.
    pub fn with_native(actors: &Actors, native: &[Dyad], t_start: i32) -> Self {
        let mut h = History {
            receiver_arrivals: vec![Vec::new(); actors.n_receivers()],
            sender_occupied: vec![Vec::new(); actors.n_senders()],
            t_start,
        };
        for (i, d) in native.iter().enumerate() {
            h.receiver_arrivals[d.receiver.0 as usize].push(Arrival {
                sender: d.sender,
                year: t_start,
                rank: i as u32,
                seed: true,
            });
            h.sender_occupied[d.sender.0 as usize].push(Occupation {
                receiver: d.receiver,
                year: t_start,
                seed: true,
            });
        }
        h
    }

    pub fn t_start(&self) -> i32 {
        self.t_start
    }

    pub fn record(&mut self, event: &Event) {
        self.receiver_arrivals[event.dyad.receiver.0 as usize].push(Arrival {
            sender: event.dyad.sender,
            year: event.year,
            rank: event.rank,
            seed: false,
        });
        self.sender_occupied[event.dyad.sender.0 as usize].push(Occupation {
            receiver: event.dyad.receiver,
            year: event.year,
            seed: false,
        });
    }

    /// Receivers occupied by `sender` strictly before `year` (seeds always count).
    pub fn occupied_before(
        &self,
        sender: SenderId,
        year: i32,
    ) -> impl Iterator<Item = ReceiverId> + '_ {
        self.sender_occupied[sender.0 as usize]
            .iter()
            .take_while(move |o| o.seed || o.year < year)
            .map(|o| o.receiver)
    }

    pub fn has_origin(&self, sender: SenderId, year: i32) -> bool {
        self.occupied_before(sender, year).next().is_some()
    }

    /// Most recent arrival in `receiver` strictly before `year`; ties within
    /// the last visible year break by within-year rank, and real events beat
    /// native seeds.
    pub fn last_arrival_before(&self, receiver: ReceiverId, year: i32) -> Option<&Arrival> {
        let arr = &self.receiver_arrivals[receiver.0 as usize];
        // visible records form a prefix: seeds first, then events sorted by
        // (year, rank) in replay order
        let end = arr.partition_point(|a| a.seed || a.year < year);
        if end == 0 {
            None
        } else {
            Some(&arr[end - 1])
        }
    }

    /// All arrivals in `receiver` strictly before `year`.
    pub fn arrivals_before(&self, receiver: ReceiverId, year: i32) -> &[Arrival] {
        let arr = &self.receiver_arrivals[receiver.0 as usize];
        let end = arr.partition_point(|a| a.seed || a.year < year);
        &arr[..end]
    }
}

/// What went wrong with one event in a candidate sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// Event is earlier (by year, rank) than its predecessor.
    OutOfOrder,
    /// Dyad already fired earlier in the sequence.
    Recurrent,
    /// Dyad is not in the initial risk set (native-range or unknown).
    Excluded,
    /// Same (year, rank) as another event.
    DuplicateRank,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::OutOfOrder => "out of order",
            ViolationKind::Recurrent => "recurrent dyad",
            ViolationKind::Excluded => "dyad excluded from risk set",
            ViolationKind::DuplicateRank => "duplicate within-year rank",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub event_index: usize,
    pub event: Event,
    pub kind: ViolationKind,
}

/// Check a raw event list against ordering, non-recurrence, and exclusion
/// rules. Violations are data, not failures; an empty list means valid.
pub fn validate_sequence(events: &[Event], initial: &RiskSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fired: HashSet<Dyad> = HashSet::new();
    let mut ranks: HashSet<(i32, u32)> = HashSet::new();
    let mut prev: Option<(i32, u32)> = None;
    for (i, e) in events.iter().enumerate() {
        if let Some(p) = prev {
            if (e.year, e.rank) < p {
                out.push(Violation {
                    event_index: i,
                    event: *e,
                    kind: ViolationKind::OutOfOrder,
                });
            }
        }
        prev = Some((e.year, e.rank));
        if !ranks.insert((e.year, e.rank)) {
            out.push(Violation {
                event_index: i,
                event: *e,
                kind: ViolationKind::DuplicateRank,
            });
        }
        if !fired.insert(e.dyad) {
            out.push(Violation {
                event_index: i,
                event: *e,
                kind: ViolationKind::Recurrent,
            });
        } else if !initial.contains(e.dyad) {
            out.push(Violation {
                event_index: i,
                event: *e,
                kind: ViolationKind::Excluded,
            });
        }
    }
    out
}

/// Counters from assembling model inputs out of broader source files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    /// native-range rows naming actors absent from the registry
    pub native_unknown_dropped: usize,
    /// native-range rows repeated in the input
    pub native_duplicates: usize,
    /// table rows (distance / attribute / group / dyadic) naming unknown regions or senders
    pub table_unknown_dropped: usize,
    /// dyads removed at build time because their sender has no native origin
    pub missing_origin_removed: usize,
}

/// Build the initial risk set: (senders x receivers) \ native_range,
/// partitioned by sender stratum.
pub fn build_risk_set(actors: &Actors, native: &[Dyad]) -> Result<RiskSet> {
    let mut excluded: HashSet<Dyad> = HashSet::new();
    for d in native {
        if d.sender.0 as usize >= actors.n_senders() {
            return Err(Error::Validation(format!(
                "native range references unknown sender id {}",
                d.sender.0
            )));
        }
        if d.receiver.0 as usize >= actors.n_receivers() {
            return Err(Error::Validation(format!(
                "native range references unknown receiver id {}",
                d.receiver.0
            )));
        }
        excluded.insert(*d);
    }
    let mut rs = RiskSet::with_strata(actors.n_strata());
    for s in actors.sender_ids() {
        let g = actors.stratum_of(s);
        for r in actors.receiver_ids() {
            let d = Dyad::new(s, r);
            if !excluded.contains(&d) {
                rs.insert(d, g);
            }
        }
    }
    Ok(rs)
}

/// Drop every dyad whose sender has no native-range origin; returns how many
/// dyads were removed. Meant for model specs with origin-dependent covariates.
pub fn remove_missing_origin(
    risk_set: &mut RiskSet,
    history: &History,
    actors: &Actors,
) -> usize {
    let mut removed = 0;
    for s in actors.sender_ids() {
        if !history.has_origin(s, history.t_start) {
            for r in actors.receiver_ids() {
                let d = Dyad::new(s, r);
                if risk_set.contains(d) {
                    risk_set.remove(d).expect("contained dyad removes cleanly");
                    removed += 1;
                }
            }
        }
    }
    removed
}

/// Apply one event: remove its dyad from the risk set and append it to the
/// history. Errors if the dyad is not currently at risk.
pub fn apply_event(risk_set: &mut RiskSet, history: &mut History, event: &Event) -> Result<()> {
    risk_set.remove(event.dyad)?;
    history.record(event);
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV loaders
// ---------------------------------------------------------------------------

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))
}

fn header_positions(
    rdr: &mut csv::Reader<std::fs::File>,
    path: &Path,
    required: &[&str],
    optional: &[&str],
) -> Result<HashMap<String, usize>> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    let mut map = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        map.insert(h.to_string(), i);
    }
    for r in required {
        if !map.contains_key(*r) {
            return Err(Error::Data(format!(
                "{}: missing required column '{r}'",
                path.display()
            )));
        }
    }
    let _ = optional;
    Ok(map)
}

/// Raw events file: `sender,receiver,year[,rank]`. Missing ranks are assigned
/// by input order within each year.
#[derive(Debug, Clone)]
pub struct RawEvents {
    pub rows: Vec<(String, String, i32, u32)>,
}

pub fn read_events_csv(path: &Path) -> Result<RawEvents> {
    let mut rdr = open_reader(path)?;
    let cols = header_positions(&mut rdr, path, &["sender", "receiver", "year"], &["rank"])?;
    let rank_col = cols.get("rank").copied();
    let mut rows = Vec::new();
    let mut next_rank: HashMap<i32, u32> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        let sender = rec[cols["sender"]].to_string();
        let receiver = rec[cols["receiver"]].to_string();
        let year: i32 = rec[cols["year"]].parse().map_err(|_| {
            Error::Data(format!(
                "{}: row {}: year '{}' is not an integer",
                path.display(),
                line + 2,
                &rec[cols["year"]]
            ))
        })?;
        let rank = match rank_col {
            Some(c) if !rec[c].is_empty() => rec[c].parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: rank '{}' is not an integer",
                    path.display(),
                    line + 2,
                    &rec[c]
                ))
            })?,
            _ => {
                let r = next_rank.entry(year).or_insert(0);
                let v = *r;
                *r += 1;
                v
            }
        };
        rows.push((sender, receiver, year, rank));
    }
    Ok(RawEvents { rows })
}

/// Native-range file: `sender,receiver`.
pub fn read_native_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = open_reader(path)?;
    let cols = header_positions(&mut rdr, path, &["sender", "receiver"], &[])?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        rows.push((rec[cols["sender"]].to_string(), rec[cols["receiver"]].to_string()));
    }
    Ok(rows)
}

/// Strata file: `sender,stratum`.
pub fn read_strata_csv(path: &Path) -> Result<HashMap<String, String>> {
    let mut rdr = open_reader(path)?;
    let cols = header_positions(&mut rdr, path, &["sender", "stratum"], &[])?;
    let mut map = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        map.insert(rec[cols["sender"]].to_string(), rec[cols["stratum"]].to_string());
    }
    Ok(map)
}

/// Receivers file: single `receiver` column (simulation universe input).
pub fn read_receivers_csv(path: &Path) -> Result<Vec<String>> {
    let mut rdr = open_reader(path)?;
    let cols = header_positions(&mut rdr, path, &["receiver"], &[])?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        rows.push(rec[cols["receiver"]].to_string());
    }
    Ok(rows)
}

/// Resolve raw name pairs to dyads, silently dropping pairs that reference
/// unknown actors (the sources are broader than the modeled network) and
/// counting them in the report. Duplicates are deduplicated and counted.
pub fn resolve_native(
    actors: &Actors,
    raw: &[(String, String)],
    report: &mut LoadReport,
) -> Vec<Dyad> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (s, r) in raw {
        match (actors.sender(s), actors.receiver(r)) {
            (Some(s), Some(r)) => {
                let d = Dyad::new(s, r);
                if seen.insert(d) {
                    out.push(d);
                } else {
                    report.native_duplicates += 1;
                }
            }
            _ => report.native_unknown_dropped += 1,
        }
    }
    out
}
