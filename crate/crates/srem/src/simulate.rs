//! Ground-truth invasion-process simulation: exponential interarrival times
//! under a total hazard that updates at integer year boundaries, multinomial
//! dyad selection, non-recurrent removal.
//!
//! A draw that crosses a year boundary advances the hazard year by one and is
//! discarded without sampling an event; by memorylessness this realizes the
//! discretized process exactly. Per-dyad rates are cached per year and
//! corrected incrementally on removal.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::covariates::CovariateEngine;
use crate::error::{Error, Result};
use crate::events::{
    build_risk_set, remove_missing_origin, Actors, Dyad, Event, EventSequence, History, RiskSet,
    StratumId,
};
use crate::rng::{substream, Domain};

/// Piecewise-linear tabulation over years.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct YearCurve(pub Vec<(i32, f64)>);

impl YearCurve {
    pub fn constant(value: f64, window: (i32, i32)) -> Self {
        YearCurve(vec![(window.0, value), (window.1, value)])
    }

    pub fn validate_cover(&self, window: (i32, i32), name: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Validation(format!("{name}: empty year curve")));
        }
        let mut sorted = self.0.clone();
        sorted.sort_by_key(|(y, _)| *y);
        if sorted.first().unwrap().0 > window.0 || sorted.last().unwrap().0 < window.1 {
            return Err(Error::Validation(format!(
                "{name}: curve must cover [{}, {}]",
                window.0, window.1
            )));
        }
        Ok(())
    }

    pub fn at(&self, year: i32) -> f64 {
        let mut pts = self.0.clone();
        pts.sort_by_key(|(y, _)| *y);
        let y = year;
        if y <= pts[0].0 {
            return pts[0].1;
        }
        if y >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let hi = pts.partition_point(|(py, _)| *py <= y);
        let (y0, v0) = pts[hi - 1];
        let (y1, v1) = pts[hi];
        if y == y0 {
            v0
        } else {
            v0 + (v1 - v0) * (y - y0) as f64 / (y1 - y0) as f64
        }
    }
}

/// True baseline hazard, optionally stratified.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BaselineTruth {
    Common(YearCurve),
    PerStratum(BTreeMap<String, YearCurve>),
}

/// True random-effect specification for one factor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RandomEffectTruth {
    /// "sender" or "receiver"
    pub factor: String,
    /// fixed per-actor values; wins over sd when present
    #[serde(default)]
    pub values: Option<BTreeMap<String, f64>>,
    /// draw values ~ N(0, sd^2) once per replication
    #[serde(default)]
    pub sd: Option<f64>,
    /// stratum-specific sds (sender factors only)
    #[serde(default)]
    pub sd_by_stratum: Option<BTreeMap<String, f64>>,
}

/// The data-generating intensity: baseline, fixed and time-varying covariate
/// effects, and random intercepts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthSpec {
    pub baseline: BaselineTruth,
    #[serde(default)]
    pub linear: Vec<(String, f64)>,
    #[serde(default)]
    pub time_varying: Vec<(String, YearCurve)>,
    #[serde(default)]
    pub random_effects: Vec<RandomEffectTruth>,
}

impl TruthSpec {
    pub fn validate(&self, window: (i32, i32)) -> Result<()> {
        match &self.baseline {
            BaselineTruth::Common(c) => {
                c.validate_cover(window, "baseline")?;
                if c.0.iter().any(|(_, v)| *v <= 0.0) {
                    return Err(Error::Validation("baseline must be positive".into()));
                }
            }
            BaselineTruth::PerStratum(map) => {
                for (g, c) in map {
                    c.validate_cover(window, &format!("baseline[{g}]"))?;
                    if c.0.iter().any(|(_, v)| *v <= 0.0) {
                        return Err(Error::Validation(format!("baseline[{g}] must be positive")));
                    }
                }
            }
        }
        for (name, c) in &self.time_varying {
            c.validate_cover(window, &format!("time_varying[{name}]"))?;
        }
        for re in &self.random_effects {
            if re.factor != "sender" && re.factor != "receiver" {
                return Err(Error::Validation(format!(
                    "random-effect factor must be sender or receiver, got '{}'",
                    re.factor
                )));
            }
            if re.sd_by_stratum.is_some() && re.factor != "sender" {
                return Err(Error::Validation(
                    "stratum-specific sds only apply to sender factors".into(),
                ));
            }
            if re.values.is_none() && re.sd.is_none() && re.sd_by_stratum.is_none() {
                return Err(Error::Validation(format!(
                    "random effect on '{}' needs values, sd, or sd_by_stratum",
                    re.factor
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("truth serializes"));
        crate::sampling::hex_string(&h.finalize())
    }
}

/// Random-effect values realized for one replication.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RealizedEffects {
    pub sender_b: Vec<f64>,
    pub receiver_b: Vec<f64>,
}

/// Draw (or copy) the per-actor random-effect values for one replication.
pub fn realize_effects(
    truth: &TruthSpec,
    actors: &Actors,
    rng: &mut impl Rng,
) -> RealizedEffects {
    let mut sender_b = vec![0.0; actors.n_senders()];
    let mut receiver_b = vec![0.0; actors.n_receivers()];
    let draw_normal = |rng: &mut dyn rand::RngCore, sd: f64| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0f64);
        let u2: f64 = rng.gen_range(0.0..1.0f64);
        sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for re in &truth.random_effects {
        let is_sender = re.factor == "sender";
        let n = if is_sender { actors.n_senders() } else { actors.n_receivers() };
        for i in 0..n {
            let name = if is_sender {
                actors.sender_name(crate::events::SenderId(i as u32))
            } else {
                actors.receiver_name(crate::events::ReceiverId(i as u32))
            };
            let value = if let Some(values) = &re.values {
                values.get(name).copied().unwrap_or(0.0)
            } else if let Some(by_stratum) = &re.sd_by_stratum {
                let g = actors.stratum_name(actors.stratum_of(crate::events::SenderId(i as u32)));
                let sd = by_stratum.get(g).copied().unwrap_or(0.0);
                draw_normal(rng, sd)
            } else {
                draw_normal(rng, re.sd.unwrap_or(0.0))
            };
            if is_sender {
                sender_b[i] += value;
            } else {
                receiver_b[i] += value;
            }
        }
    }
    RealizedEffects { sender_b, receiver_b }
}

struct RateModel<'a> {
    truth: &'a TruthSpec,
    realized: &'a RealizedEffects,
    actors: &'a Actors,
    /// covariate name -> index into the engine's numeric vector
    linear_idx: Vec<(usize, f64)>,
    tv_idx: Vec<(usize, &'a YearCurve)>,
}

impl<'a> RateModel<'a> {
    fn new(
        truth: &'a TruthSpec,
        realized: &'a RealizedEffects,
        actors: &'a Actors,
        engine: &CovariateEngine<'_>,
    ) -> Result<Self> {
        let x_names = engine.x_names();
        let find = |name: &str| -> Result<usize> {
            x_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Spec(format!("truth references unknown covariate '{name}'")))
        };
        let linear_idx = truth
            .linear
            .iter()
            .map(|(n, b)| Ok((find(n)?, *b)))
            .collect::<Result<_>>()?;
        let tv_idx = truth
            .time_varying
            .iter()
            .map(|(n, c)| Ok((find(n)?, c)))
            .collect::<Result<_>>()?;
        Ok(RateModel { truth, realized, actors, linear_idx, tv_idx })
    }

    fn baseline(&self, stratum: StratumId, year: i32) -> f64 {
        match &self.truth.baseline {
            BaselineTruth::Common(c) => c.at(year),
            BaselineTruth::PerStratum(map) => map
                .get(self.actors.stratum_name(stratum))
                .map(|c| c.at(year))
                .unwrap_or(0.0),
        }
    }

    fn rate(&self, dyad: Dyad, year: i32, x: &[f64]) -> f64 {
        let g = self.actors.stratum_of(dyad.sender);
        let mut eta = 0.0;
        for (i, beta) in &self.linear_idx {
            eta += beta * x[*i];
        }
        for (i, curve) in &self.tv_idx {
            eta += curve.at(year) * x[*i];
        }
        eta += self.realized.sender_b[dyad.sender.0 as usize];
        eta += self.realized.receiver_b[dyad.receiver.0 as usize];
        self.baseline(g, year) * eta.exp()
    }
}

/// One simulated invasion process.
pub fn simulate_sequence(
    truth: &TruthSpec,
    realized: &RealizedEffects,
    engine: &CovariateEngine<'_>,
    mut risk_set: RiskSet,
    mut history: History,
    window: (i32, i32),
    rng: &mut impl Rng,
) -> Result<EventSequence> {
    truth.validate(window)?;
    let actors = engine.actors;
    let model = RateModel::new(truth, realized, actors, engine)?;
    let mut events: Vec<Event> = Vec::new();
    let mut year = window.0;
    let mut t = window.0 as f64;
    let mut rank_in_year: u32 = 0;

    // per-stratum rate arrays mirroring the risk-set storage
    let mut rates: Vec<Vec<f64>> = Vec::new();
    let mut total = 0.0;
    let recompute = |risk_set: &RiskSet,
                     history: &History,
                     year: i32,
                     rates: &mut Vec<Vec<f64>>,
                     total: &mut f64|
     -> Result<()> {
        let snapshot = engine.snapshot(history, year);
        rates.clear();
        *total = 0.0;
        for g in 0..risk_set.n_strata() {
            let slice = risk_set.stratum_slice(StratumId(g as u32));
            let mut v = Vec::with_capacity(slice.len());
            for &dyad in slice {
                let x = snapshot.x_values(dyad)?;
                let r = model.rate(dyad, year, &x);
                *total += r;
                v.push(r);
            }
            rates.push(v);
        }
        Ok(())
    };
    recompute(&risk_set, &history, year, &mut rates, &mut total)?;

    loop {
        if risk_set.n() == 0 || year > window.1 {
            break; // exhausted risk set is a clean early stop
        }
        if total <= 0.0 {
            year += 1;
            if year > window.1 {
                break;
            }
            t = year as f64;
            rank_in_year = 0;
            recompute(&risk_set, &history, year, &mut rates, &mut total)?;
            continue;
        }
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let dt = -u.ln() / total;
        let t_next = t + dt;
        if (t_next.floor() as i64) > year as i64 {
            // crossed a year boundary: update the hazard, discard the draw
            year += 1;
            if year > window.1 {
                break;
            }
            t = year as f64;
            rank_in_year = 0;
            recompute(&risk_set, &history, year, &mut rates, &mut total)?;
            continue;
        }
        t = t_next;
        // multinomial selection proportional to the cached rates
        let mut target = rng.gen_range(0.0..1.0) * total;
        let mut picked: Option<(usize, usize)> = None;
        'scan: for (g, v) in rates.iter().enumerate() {
            for (i, &r) in v.iter().enumerate() {
                if r <= 0.0 {
                    continue;
                }
                picked = Some((g, i));
                target -= r;
                if target <= 0.0 {
                    break 'scan;
                }
            }
        }
        let Some((g, i)) = picked else {
            // all residual rates zero; treat as an empty year
            total = 0.0;
            continue;
        };
        let dyad = risk_set.stratum_slice(StratumId(g as u32))[i];
        let event = Event { dyad, year, rank: rank_in_year };
        rank_in_year += 1;
        let (rg, pos) = risk_set.remove(dyad)?;
        debug_assert_eq!(rg.0 as usize, g);
        let v = &mut rates[g];
        total -= v[pos];
        v.swap_remove(pos);
        history.record(&event);
        events.push(event);
    }
    EventSequence::new(events, window)
}

/// One replication's output.
#[derive(Debug, Clone)]
pub struct SimReplication {
    pub index: usize,
    pub seed: u64,
    pub events: EventSequence,
    pub realized: RealizedEffects,
}

/// Inputs shared by every replication.
pub struct SimWorld<'a> {
    pub actors: &'a Actors,
    pub native: &'a [Dyad],
    pub engine: &'a CovariateEngine<'a>,
    pub window: (i32, i32),
}

/// Independent replications with derived seeds; random effects are redrawn
/// per replication when sds are given. Deterministic in `base_seed`.
pub fn run_replications(
    truth: &TruthSpec,
    world: &SimWorld<'_>,
    n_reps: usize,
    base_seed: u64,
) -> Result<Vec<SimReplication>> {
    use rayon::prelude::*;
    truth.validate(world.window)?;
    let mut base_risk = build_risk_set(world.actors, world.native)?;
    if world.engine.any_needs_origin() {
        let history = History::with_native(world.actors, world.native, world.window.0);
        remove_missing_origin(&mut base_risk, &history, world.actors);
    }
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut re_rng = substream(base_seed, Domain::RandomEffects, rep as u64);
            let realized = realize_effects(truth, world.actors, &mut re_rng);
            let mut sim_rng = substream(base_seed, Domain::Simulation, rep as u64);
            let events = simulate_sequence(
                truth,
                &realized,
                world.engine,
                base_risk.clone(),
                History::with_native(world.actors, world.native, world.window.0),
                world.window,
                &mut sim_rng,
            )?;
            Ok(SimReplication {
                index: rep,
                seed: crate::rng::substream_seed(base_seed, Domain::Simulation, rep as u64),
                events,
                realized,
            })
        })
        .collect()
}
