//! Exogenous input tables backing covariate evaluation.
//!
//! Region-keyed tables are resolved against the receiver registry; rows that
//! name regions or senders outside the modeled network are dropped and
//! counted in the load report, since the upstream sources are broader than
//! the network.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{Actors, Dyad, LoadReport, ReceiverId};

/// Symmetric region-to-region distances with a zero diagonal.
#[derive(Debug, Clone, Default)]
pub struct DistanceTable {
    values: HashMap<(ReceiverId, ReceiverId), f64>,
}

impl DistanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: ReceiverId, b: ReceiverId, value: f64) -> Result<()> {
        if value < 0.0 {
            return Err(Error::Data(format!(
                "distance between regions {} and {} is negative ({value})",
                a.0, b.0
            )));
        }
        if a == b && value != 0.0 {
            return Err(Error::Data(format!(
                "distance diagonal for region {} must be zero, got {value}",
                a.0
            )));
        }
        self.values.insert((a, b), value);
        self.values.insert((b, a), value);
        Ok(())
    }

    pub fn get(&self, a: ReceiverId, b: ReceiverId) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        self.values.get(&(a, b)).copied().ok_or_else(|| {
            Error::Data(format!(
                "distance table has no entry for regions ({}, {})",
                a.0, b.0
            ))
        })
    }
}

/// Per-region yearly attribute (e.g. near-surface temperature). Lookup uses
/// the latest year not greater than the query year, falling back to the
/// earliest record when the query precedes the series.
#[derive(Debug, Clone, Default)]
pub struct AttributeTable {
    per_region: HashMap<ReceiverId, Vec<(i32, f64)>>,
}

impl AttributeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region: ReceiverId, year: i32, value: f64) {
        self.per_region.entry(region).or_default().push((year, value));
    }

    pub fn finish(&mut self) {
        for v in self.per_region.values_mut() {
            v.sort_by_key(|(y, _)| *y);
            v.dedup_by_key(|(y, _)| *y);
        }
    }

    pub fn get(&self, region: ReceiverId, year: i32) -> Result<f64> {
        let series = self.per_region.get(&region).ok_or_else(|| {
            Error::Data(format!("attribute table has no entries for region {}", region.0))
        })?;
        let pos = series.partition_point(|(y, _)| *y <= year);
        if pos == 0 {
            Ok(series[0].1)
        } else {
            Ok(series[pos - 1].1)
        }
    }
}

/// Region -> group membership; `None` marks an independent region.
#[derive(Debug, Clone, Default)]
pub struct GroupTable {
    groups: HashMap<ReceiverId, Option<u32>>,
    group_names: Vec<String>,
}

impl GroupTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region: ReceiverId, group: Option<&str>) {
        let id = group.map(|g| {
            if let Some(i) = self.group_names.iter().position(|n| n == g) {
                i as u32
            } else {
                self.group_names.push(g.to_string());
                self.group_names.len() as u32 - 1
            }
        });
        self.groups.insert(region, id);
    }

    /// Group of a region; unlisted regions count as independent.
    pub fn group(&self, region: ReceiverId) -> Option<u32> {
        self.groups.get(&region).copied().flatten()
    }
}

/// Dyad-keyed yearly values (e.g. precomputed flow sums). Lookup carries the
/// latest year not greater than the query year forward; a pair never
/// mentioned, or mentioned only later, yields 0.
#[derive(Debug, Clone, Default)]
pub struct DyadicTable {
    per_dyad: HashMap<Dyad, Vec<(i32, f64)>>,
}

impl DyadicTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dyad: Dyad, year: i32, value: f64) {
        self.per_dyad.entry(dyad).or_default().push((year, value));
    }

    pub fn finish(&mut self) {
        for v in self.per_dyad.values_mut() {
            v.sort_by_key(|(y, _)| *y);
            v.dedup_by_key(|(y, _)| *y);
        }
    }

    pub fn get(&self, dyad: Dyad, year: i32) -> f64 {
        match self.per_dyad.get(&dyad) {
            None => 0.0,
            Some(series) => {
                let pos = series.partition_point(|(y, _)| *y <= year);
                if pos == 0 {
                    0.0
                } else {
                    series[pos - 1].1
                }
            }
        }
    }
}

/// All loaded tables, keyed by the names covariate specs refer to.
#[derive(Debug, Clone, Default)]
pub struct TableSet {
    pub distances: HashMap<String, DistanceTable>,
    pub attributes: HashMap<String, AttributeTable>,
    pub groups: HashMap<String, GroupTable>,
    pub dyadic: HashMap<String, DyadicTable>,
}

// ---------------------------------------------------------------------------
// CSV loaders
// ---------------------------------------------------------------------------

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field.parse().map_err(|_| {
        Error::Data(format!(
            "{}: row {}: '{}' is not a number",
            path.display(),
            line + 2,
            field
        ))
    })
}

fn parse_i32(path: &Path, line: usize, field: &str) -> Result<i32> {
    field.parse().map_err(|_| {
        Error::Data(format!(
            "{}: row {}: '{}' is not an integer",
            path.display(),
            line + 2,
            field
        ))
    })
}

/// `region_a,region_b,value`
pub fn read_distance_csv(
    path: &Path,
    actors: &Actors,
    report: &mut LoadReport,
) -> Result<DistanceTable> {
    let mut rdr = reader(path)?;
    let mut table = DistanceTable::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        match (actors.receiver(&rec[0]), actors.receiver(&rec[1])) {
            (Some(a), Some(b)) => table.insert(a, b, parse_f64(path, line, &rec[2])?)?,
            _ => report.table_unknown_dropped += 1,
        }
    }
    Ok(table)
}

/// `region,year,value`
pub fn read_attribute_csv(
    path: &Path,
    actors: &Actors,
    report: &mut LoadReport,
) -> Result<AttributeTable> {
    let mut rdr = reader(path)?;
    let mut table = AttributeTable::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        match actors.receiver(&rec[0]) {
            Some(region) => table.insert(
                region,
                parse_i32(path, line, &rec[1])?,
                parse_f64(path, line, &rec[2])?,
            ),
            None => report.table_unknown_dropped += 1,
        }
    }
    table.finish();
    Ok(table)
}

/// `region,group` where the literal `independent` marks no group.
pub fn read_group_csv(
    path: &Path,
    actors: &Actors,
    report: &mut LoadReport,
) -> Result<GroupTable> {
    let mut rdr = reader(path)?;
    let mut table = GroupTable::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        match actors.receiver(&rec[0]) {
            Some(region) => {
                let group = if rec[1].eq_ignore_ascii_case("independent") {
                    None
                } else {
                    Some(&rec[1])
                };
                table.insert(region, group);
            }
            None => report.table_unknown_dropped += 1,
        }
    }
    Ok(table)
}

/// `sender,receiver,year,value`
pub fn read_dyadic_csv(
    path: &Path,
    actors: &Actors,
    report: &mut LoadReport,
) -> Result<DyadicTable> {
    let mut rdr = reader(path)?;
    let mut table = DyadicTable::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        match (actors.sender(&rec[0]), actors.receiver(&rec[1])) {
            (Some(s), Some(r)) => table.insert(
                Dyad::new(s, r),
                parse_i32(path, line, &rec[2])?,
                parse_f64(path, line, &rec[3])?,
            ),
            _ => report.table_unknown_dropped += 1,
        }
    }
    table.finish();
    Ok(table)
}
