//! Balanced unit × time × outcome panels.
//!
//! Panels are built from long-format records (`unit,time,outcome,value`).
//! Missing cells are never imputed silently: [`ingest_long`] rejects them,
//! and the explicit [`interpolate_gaps`] / [`enforce_balanced_support`]
//! passes report exactly what they filled or dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{CellRef, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Share,
    PerCapita,
    #[default]
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    /// Sign alignment factor, `+1` or `-1`.
    pub sign: i8,
    #[serde(default)]
    pub kind: OutcomeKind,
}

impl OutcomeSpec {
    pub fn new(name: impl Into<String>, sign: i8, kind: OutcomeKind) -> Result<Self> {
        let name = name.into();
        if sign != 1 && sign != -1 {
            return Err(Error::invalid(format!(
                "sign for outcome `{name}` must be +1 or -1, got {sign}"
            )));
        }
        Ok(Self { name, sign, kind })
    }

    pub fn raw(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            sign: 1,
            kind: OutcomeKind::Raw,
        }
    }
}

/// One row of a long-format file. `value: None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub value: Option<f64>,
}

impl LongRecord {
    pub fn new(
        unit: impl Into<String>,
        time: impl Into<String>,
        outcome: impl Into<String>,
        value: Option<f64>,
    ) -> Self {
        Self {
            unit: unit.into(),
            time: time.into(),
            outcome: outcome.into(),
            value,
        }
    }

    fn cell(&self) -> CellRef {
        CellRef {
            unit: self.unit.clone(),
            time: self.time.clone(),
            outcome: self.outcome.clone(),
        }
    }
}

/// Dense panel `Y[i][t][k]`. The treated unit is always stored at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<String>,
    times: Vec<String>,
    time_coords: Vec<f64>,
    outcomes: Vec<OutcomeSpec>,
    values: Vec<f64>,
    t0: usize,
    first_post_partial: bool,
}

impl Panel {
    /// Builds a panel from a flat `[unit][time][outcome]` array.
    ///
    /// `treated` is moved to position 0; the remaining units keep their
    /// relative order. `t0` is the number of pre-treatment periods.
    pub fn new(
        units: Vec<String>,
        times: Vec<String>,
        outcomes: Vec<OutcomeSpec>,
        values: Vec<f64>,
        treated: &str,
        t0: usize,
    ) -> Result<Self> {
        let (times, time_coords) = {
            let axis = TimeAxis::from_sorted(&times)?;
            (axis.labels, axis.coords)
        };
        let (n, t, k) = (units.len(), times.len(), outcomes.len());
        if values.len() != n * t * k {
            return Err(Error::shape(format!(
                "values has {} entries, expected {n}×{t}×{k}",
                values.len()
            )));
        }
        if k == 0 {
            return Err(Error::invalid("panel needs at least one outcome"));
        }
        let mut seen = HashSet::new();
        for o in &outcomes {
            if o.sign != 1 && o.sign != -1 {
                return Err(Error::invalid(format!("bad sign for outcome `{}`", o.name)));
            }
            if !seen.insert(o.name.as_str()) {
                return Err(Error::invalid(format!("duplicate outcome name `{}`", o.name)));
            }
        }
        let mut seen = HashSet::new();
        for u in &units {
            if !seen.insert(u.as_str()) {
                return Err(Error::invalid(format!("duplicate unit label `{u}`")));
            }
        }
        if t0 < 1 || t0 >= t {
            return Err(Error::invalid(format!(
                "t0 = {t0} must satisfy 1 <= t0 < {t}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, rem) = (pos / (t * k), pos % (t * k));
            return Err(Error::MissingCells(vec![CellRef {
                unit: units[i].clone(),
                time: times[rem / k].clone(),
                outcome: outcomes[rem % k].name.clone(),
            }]));
        }
        let treated_idx = units
            .iter()
            .position(|u| u == treated)
            .ok_or_else(|| Error::invalid(format!("treated unit `{treated}` not in panel")))?;
        if n < 2 {
            return Err(Error::invalid("panel needs at least one donor"));
        }

        let mut order: Vec<usize> = vec![treated_idx];
        order.extend((0..n).filter(|&i| i != treated_idx));
        let block = t * k;
        let mut reordered = Vec::with_capacity(values.len());
        for &i in &order {
            reordered.extend_from_slice(&values[i * block..(i + 1) * block]);
        }
        let units = order.iter().map(|&i| units[i].clone()).collect();

        Ok(Self {
            units,
            times,
            time_coords,
            outcomes,
            values: reordered,
            t0,
            first_post_partial: false,
        })
    }

    /// Builds a panel by evaluating `f(unit, time, outcome)` on every cell.
    pub fn from_fn(
        units: Vec<String>,
        times: Vec<String>,
        outcomes: Vec<OutcomeSpec>,
        treated: &str,
        t0: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (n, t, k) = (units.len(), times.len(), outcomes.len());
        let mut values = Vec::with_capacity(n * t * k);
        for i in 0..n {
            for s in 0..t {
                for o in 0..k {
                    values.push(f(i, s, o));
                }
            }
        }
        Self::new(units, times, outcomes, values, treated, t0)
    }

    #[inline]
    fn idx(&self, i: usize, t: usize, k: usize) -> usize {
        (i * self.times.len() + t) * self.outcomes.len() + k
    }

    #[inline]
    pub fn value(&self, unit: usize, time: usize, outcome: usize) -> f64 {
        self.values[self.idx(unit, time, outcome)]
    }

    pub fn series(&self, unit: usize, outcome: usize) -> Vec<f64> {
        (0..self.n_times())
            .map(|t| self.value(unit, t, outcome))
            .collect()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn treated_label(&self) -> &str {
        &self.units[0]
    }

    pub fn donor_labels(&self) -> &[String] {
        &self.units[1..]
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn time_coords(&self) -> &[f64] {
        &self.time_coords
    }

    pub fn outcomes(&self) -> &[OutcomeSpec] {
        &self.outcomes
    }

    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcomes.iter().position(|o| o.name == name)
    }

    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.units.iter().position(|u| u == label)
    }

    pub fn signs(&self) -> Vec<i8> {
        self.outcomes.iter().map(|o| o.sign).collect()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_donors(&self) -> usize {
        self.units.len() - 1
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// Number of pre-treatment periods.
    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn n_post(&self) -> usize {
        self.times.len() - self.t0
    }

    /// Reporting-only flag: the first post period is only partially exposed.
    pub fn first_post_partial(&self) -> bool {
        self.first_post_partial
    }

    pub fn with_partial_exposure(mut self, partial: bool) -> Self {
        self.first_post_partial = partial;
        self
    }

    /// Replaces outcome metadata (signs, kinds). Names must match by position.
    pub fn with_outcome_specs(mut self, specs: Vec<OutcomeSpec>) -> Result<Self> {
        if specs.len() != self.outcomes.len() {
            return Err(Error::shape(format!(
                "{} outcome specs for {} outcomes",
                specs.len(),
                self.outcomes.len()
            )));
        }
        let mut by_name: HashMap<&str, &OutcomeSpec> = HashMap::new();
        for s in &specs {
            OutcomeSpec::new(s.name.clone(), s.sign, s.kind)?;
            if by_name.insert(s.name.as_str(), s).is_some() {
                return Err(Error::invalid(format!("duplicate outcome spec `{}`", s.name)));
            }
        }
        let mut out = Vec::with_capacity(specs.len());
        for o in &self.outcomes {
            let s = by_name
                .get(o.name.as_str())
                .ok_or_else(|| Error::invalid(format!("no spec for outcome `{}`", o.name)))?;
            out.push((*s).clone());
        }
        self.outcomes = out;
        Ok(self)
    }

    /// Returns a copy with every cell passed through `f(unit, time, outcome, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, usize, f64) -> f64) -> Panel {
        let mut out = self.clone();
        for i in 0..self.n_units() {
            for t in 0..self.n_times() {
                for k in 0..self.n_outcomes() {
                    let idx = self.idx(i, t, k);
                    out.values[idx] = f(i, t, k, self.values[idx]);
                }
            }
        }
        out
    }

    /// Keeps the treated unit plus the listed donors (indices into `units()`).
    pub fn select_units(&self, keep: &[usize]) -> Result<Panel> {
        let mut idx: Vec<usize> = vec![0];
        for &u in keep {
            if u == 0 || u >= self.n_units() {
                return Err(Error::invalid(format!("bad donor index {u}")));
            }
            if !idx.contains(&u) {
                idx.push(u);
            }
        }
        if idx.len() < 2 {
            return Err(Error::invalid("selection leaves no donors"));
        }
        let block = self.n_times() * self.n_outcomes();
        let mut values = Vec::with_capacity(idx.len() * block);
        for &i in &idx {
            values.extend_from_slice(&self.values[i * block..(i + 1) * block]);
        }
        Ok(Panel {
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            values,
            ..self.clone()
        })
    }

    /// Keeps the treated unit and the donors with the given labels.
    pub fn select_donors_by_label(&self, labels: &[String]) -> Result<Panel> {
        let keep = labels
            .iter()
            .map(|l| {
                self.unit_index(l)
                    .filter(|&i| i > 0)
                    .ok_or_else(|| Error::invalid(format!("donor `{l}` not in panel")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_units(&keep)
    }

    /// Flat value storage, `[unit][time][outcome]` with the treated unit first.
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

// ---------------------------------------------------------------------------
// Time axis

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LabelKind {
    Integer,
    Quarter,
    Date,
    Text,
}

fn parse_quarter(s: &str) -> Option<(i32, u32)> {
    let s = s.trim();
    let (y, q) = s.split_once(['Q', 'q'])?;
    let y = y.trim_end_matches(['-', ' ']).parse::<i32>().ok()?;
    let q = q.parse::<u32>().ok()?;
    (1..=4).contains(&q).then_some((y, q))
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn classify(labels: &[String]) -> LabelKind {
    if labels.iter().all(|l| l.trim().parse::<i64>().is_ok()) {
        LabelKind::Integer
    } else if labels.iter().all(|l| parse_quarter(l).is_some()) {
        LabelKind::Quarter
    } else if labels.iter().all(|l| parse_date(l).is_some()) {
        LabelKind::Date
    } else {
        LabelKind::Text
    }
}

/// Ordered period labels with numeric coordinates for time-based interpolation.
struct TimeAxis {
    labels: Vec<String>,
    coords: Vec<f64>,
}

impl TimeAxis {
    fn coords_for(kind: LabelKind, labels: &[String]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| match kind {
                LabelKind::Integer => l.trim().parse::<i64>().unwrap() as f64,
                LabelKind::Quarter => {
                    let (y, q) = parse_quarter(l).unwrap();
                    f64::from(y) * 4.0 + f64::from(q - 1)
                }
                LabelKind::Date => f64::from(parse_date(l).unwrap().num_days_from_ce()),
                LabelKind::Text => i as f64,
            })
            .collect()
    }

    /// Sorts an unordered set of labels.
    fn from_unordered<'a>(labels: impl IntoIterator<Item = &'a String>) -> Result<Self> {
        let mut v: Vec<String> = labels.into_iter().cloned().collect();
        v.sort();
        v.dedup();
        let kind = classify(&v);
        let mut keyed: Vec<(f64, String)> = Self::coords_for(kind, &v).into_iter().zip(v).collect();
        if kind != LabelKind::Text {
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let (coords, labels): (Vec<f64>, Vec<String>) = keyed.into_iter().unzip();
        Self::check(labels, coords)
    }

    /// Validates labels that are expected to be already in order.
    fn from_sorted(labels: &[String]) -> Result<Self> {
        let kind = classify(labels);
        let coords = Self::coords_for(kind, labels);
        if kind == LabelKind::Text && labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("period labels are not strictly increasing"));
        }
        Self::check(labels.to_vec(), coords)
    }

    fn check(labels: Vec<String>, coords: Vec<f64>) -> Result<Self> {
        if let Some(w) = coords.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "period labels `{}` and `{}` are not strictly increasing",
                labels[w],
                labels[w + 1]
            )));
        }
        Ok(Self { labels, coords })
    }
}

// ---------------------------------------------------------------------------
// Ingestion

fn first_appearance<'a>(items: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in items {
        if seen.insert(s.as_str()) {
            out.push(s.clone());
        }
    }
    out
}

/// Builds a [`Panel`] from long records.
///
/// Periods are ordered on parsed labels (integers, `YYYYQn` quarters, ISO
/// dates, or plain lexicographic order). The `cutoff` period is the first
/// post-treatment period, so `t0` counts the periods strictly before it.
/// Units and outcomes keep first-appearance order, except that the treated
/// unit moves to the front.
pub fn ingest_long(records: &[LongRecord], treated: &str, cutoff: &str) -> Result<Panel> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert((r.unit.as_str(), r.time.as_str(), r.outcome.as_str())) {
            return Err(Error::DuplicateRecord(r.cell()));
        }
    }
    let units = first_appearance(records.iter().map(|r| &r.unit));
    let outcomes = first_appearance(records.iter().map(|r| &r.outcome));
    let axis = TimeAxis::from_unordered(records.iter().map(|r| &r.time))?;
    let t0 = axis
        .labels
        .iter()
        .position(|t| t == cutoff)
        .ok_or_else(|| Error::CutoffNotFound(cutoff.to_string()))?;
    if !units.iter().any(|u| u == treated) {
        return Err(Error::invalid(format!("treated unit `{treated}` has no records")));
    }

    let unit_idx: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let time_idx: HashMap<&str, usize> =
        axis.labels.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let out_idx: HashMap<&str, usize> =
        outcomes.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let (n, t, k) = (units.len(), axis.labels.len(), outcomes.len());
    let mut grid: Vec<Option<f64>> = vec![None; n * t * k];
    for r in records {
        let idx = (unit_idx[r.unit.as_str()] * t + time_idx[r.time.as_str()]) * k
            + out_idx[r.outcome.as_str()];
        grid[idx] = r.value.filter(|v| v.is_finite());
    }

    let mut missing_series = Vec::new();
    for (i, u) in units.iter().enumerate() {
        for (o, name) in outcomes.iter().enumerate() {
            if (0..t).all(|s| grid[(i * t + s) * k + o].is_none()) {
                missing_series.push(format!("{u} ({name})"));
            }
        }
    }
    if !missing_series.is_empty() {
        return Err(Error::MissingSeries(missing_series));
    }

    let mut missing = Vec::new();
    for (i, u) in units.iter().enumerate() {
        for (s, time) in axis.labels.iter().enumerate() {
            for (o, name) in outcomes.iter().enumerate() {
                if grid[(i * t + s) * k + o].is_none() {
                    missing.push(CellRef {
                        unit: u.clone(),
                        time: time.clone(),
                        outcome: name.clone(),
                    });
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }

    Panel::new(
        units,
        axis.labels,
        outcomes.into_iter().map(OutcomeSpec::raw).collect(),
        grid.into_iter().map(|v| v.unwrap()).collect(),
        treated,
        t0,
    )
}

/// Flattens a panel back to long records (unit, then time, then outcome).
pub fn emit_long(panel: &Panel) -> Vec<LongRecord> {
    let mut out = Vec::with_capacity(panel.raw_values().len());
    for (i, u) in panel.units().iter().enumerate() {
        for (t, time) in panel.times().iter().enumerate() {
            for (k, o) in panel.outcomes().iter().enumerate() {
                out.push(LongRecord::new(
                    u.clone(),
                    time.clone(),
                    o.name.clone(),
                    Some(panel.value(i, t, k)),
                ));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gap filling and balanced support

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub records: Vec<LongRecord>,
    pub filled: Vec<CellRef>,
    /// Gaps left open because they lack bracketing observations on their
    /// side of the boundary.
    pub unfilled: Vec<CellRef>,
}

/// Linear interpolation of interior gaps on the time axis.
///
/// `boundary` is the first post-treatment period. Pre and post segments are
/// interpolated separately so no value is ever filled using an observation
/// from the other side. Observed cells are never modified; absent
/// (unit, time, outcome) combinations are treated as missing.
pub fn interpolate_gaps(records: &[LongRecord], boundary: &str) -> Result<Interpolation> {
    let axis = TimeAxis::from_unordered(records.iter().map(|r| &r.time))?;
    let b = axis
        .labels
        .iter()
        .position(|t| t == boundary)
        .ok_or_else(|| Error::CutoffNotFound(boundary.to_string()))?;
    let t = axis.labels.len();
    let time_idx: HashMap<&str, usize> =
        axis.labels.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();

    let mut series: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for r in records {
        let key = (r.unit.clone(), r.outcome.clone());
        let entry = series.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            vec![None; t]
        });
        entry[time_idx[r.time.as_str()]] = r.value.filter(|v| v.is_finite());
    }

    let mut fills: HashMap<(String, String, usize), f64> = HashMap::new();
    let mut filled = Vec::new();
    let mut unfilled = Vec::new();
    for key in &order {
        let s = &series[key];
        for (lo, hi) in [(0, b), (b, t)] {
            for idx in lo..hi {
                if s[idx].is_some() {
                    continue;
                }
                let left = (lo..idx).rev().find(|&j| s[j].is_some());
                let right = (idx + 1..hi).find(|&j| s[j].is_some());
                let cell = CellRef {
                    unit: key.0.clone(),
                    time: axis.labels[idx].clone(),
                    outcome: key.1.clone(),
                };
                match (left, right) {
                    (Some(l), Some(r)) => {
                        let (xl, xr, x) = (axis.coords[l], axis.coords[r], axis.coords[idx]);
                        let (yl, yr) = (s[l].unwrap(), s[r].unwrap());
                        let v = yl + (yr - yl) * (x - xl) / (xr - xl);
                        fills.insert((key.0.clone(), key.1.clone(), idx), v);
                        filled.push(cell);
                    }
                    _ => unfilled.push(cell),
                }
            }
        }
    }

    let mut out: Vec<LongRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.value.is_none_or(|v| !v.is_finite()) {
                let key = (r.unit.clone(), r.outcome.clone(), time_idx[r.time.as_str()]);
                r.value = fills.remove(&key);
            }
            r
        })
        .collect();
    // Cells that were absent from the input entirely.
    let mut rest: Vec<_> = fills.into_iter().collect();
    rest.sort_by(|a, b| a.0.cmp(&b.0));
    for ((unit, outcome, idx), v) in rest {
        out.push(LongRecord::new(unit, axis.labels[idx].clone(), outcome, Some(v)));
    }
    Ok(Interpolation {
        records: out,
        filled,
        unfilled,
    })
}

#[derive(Debug, Clone)]
pub struct BalancedSupport {
    pub records: Vec<LongRecord>,
    /// Dropped `(unit, time)` pairs.
    pub dropped: Vec<(String, String)>,
}

/// Keeps only (unit, time) pairs where every outcome is observed.
pub fn enforce_balanced_support(records: &[LongRecord]) -> BalancedSupport {
    let outcomes: HashSet<&str> = records.iter().map(|r| r.outcome.as_str()).collect();
    let mut observed: HashMap<(&str, &str), HashSet<&str>> = HashMap::new();
    for r in records {
        let e = observed.entry((r.unit.as_str(), r.time.as_str())).or_default();
        if r.value.is_some_and(f64::is_finite) {
            e.insert(r.outcome.as_str());
        }
    }
    let complete = |u: &str, t: &str| observed[&(u, t)].len() == outcomes.len();

    let mut dropped = Vec::new();
    let mut reported = HashSet::new();
    let mut kept = Vec::new();
    for r in records {
        if complete(&r.unit, &r.time) {
            kept.push(r.clone());
        } else if reported.insert((r.unit.as_str(), r.time.as_str())) {
            dropped.push((r.unit.clone(), r.time.clone()));
        }
    }
    BalancedSupport {
        records: kept,
        dropped,
    }
}

// ---------------------------------------------------------------------------
// Outcome construction

/// Island-wide shares: `raw[i][t] / totals[t]`.
///
/// `totals` pairs each period label with the universe total for that period.
pub fn island_shares(raw: &[Vec<f64>], totals: &[(String, f64)]) -> Result<Vec<Vec<f64>>> {
    if let Some((label, _)) = totals.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::NonPositiveTotal(label.clone()));
    }
    raw.iter()
        .map(|row| {
            if row.len() != totals.len() {
                return Err(Error::shape(format!(
                    "series of length {} against {} totals",
                    row.len(),
                    totals.len()
                )));
            }
            Ok(row.iter().zip(totals).map(|(r, (_, tot))| r / tot).collect())
        })
        .collect()
}

/// Rates per 1,000 residents: `count / (population / 1000)`.
pub fn per_capita(counts: &[f64], population: f64) -> Result<Vec<f64>> {
    if !(population > 0.0) {
        return Err(Error::NonPositivePopulation(format!("{population}")));
    }
    let per_thousand = population / 1000.0;
    Ok(counts.iter().map(|c| c / per_thousand).collect())
}

/// Converts one outcome of a panel from counts to per-1,000 rates.
pub fn convert_per_capita(
    panel: &Panel,
    outcome: &str,
    population: &BTreeMap<String, f64>,
) -> Result<Panel> {
    let k = panel
        .outcome_index(outcome)
        .ok_or_else(|| Error::invalid(format!("unknown outcome `{outcome}`")))?;
    let mut pops = Vec::with_capacity(panel.n_units());
    for u in panel.units() {
        let p = *population
            .get(u)
            .ok_or_else(|| Error::invalid(format!("no population for unit `{u}`")))?;
        if !(p > 0.0) {
            return Err(Error::NonPositivePopulation(u.clone()));
        }
        pops.push(p);
    }
    Ok(panel.map_values(|i, _, kk, v| if kk == k { v / (pops[i] / 1000.0) } else { v }))
}

/// Converts one outcome of a panel from levels to shares of per-period totals.
pub fn convert_shares(panel: &Panel, outcome: &str, totals: &[(String, f64)]) -> Result<Panel> {
    let k = panel
        .outcome_index(outcome)
        .ok_or_else(|| Error::invalid(format!("unknown outcome `{outcome}`")))?;
    let by_time: HashMap<&str, f64> = totals.iter().map(|(t, v)| (t.as_str(), *v)).collect();
    let mut tot = Vec::with_capacity(panel.n_times());
    for t in panel.times() {
        let v = *by_time
            .get(t.as_str())
            .ok_or_else(|| Error::invalid(format!("no total for period `{t}`")))?;
        if !(v > 0.0) {
            return Err(Error::NonPositiveTotal(t.clone()));
        }
        tot.push(v);
    }
    Ok(panel.map_values(|_, t, kk, v| if kk == k { v / tot[t] } else { v }))
}

// ---------------------------------------------------------------------------
// CSV

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::invalid(format!(
            "expected CSV header `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_value(field: &str, line: u64) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    f.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid(format!("line {line}: cannot parse value `{f}`")))
}

/// Reads `unit,time,outcome,value`; an empty value is a missing cell.
pub fn read_long_csv<R: Read>(reader: R) -> Result<Vec<LongRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(rdr.headers()?, &["unit", "time", "outcome", "value"])?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 4 {
            return Err(Error::invalid(format!("line {line}: expected 4 fields")));
        }
        out.push(LongRecord::new(
            row[0].trim(),
            row[1].trim(),
            row[2].trim(),
            parse_value(&row[3], line)?,
        ));
    }
    Ok(out)
}

pub fn read_long_csv_path(path: impl AsRef<Path>) -> Result<Vec<LongRecord>> {
    read_long_csv(std::fs::File::open(path)?)
}

/// Writes long records with full round-trip float precision.
pub fn write_long_csv<W: Write>(records: &[LongRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "time", "outcome", "value"])?;
    for r in records {
        let v = r.value.map(|v| format!("{v:?}")).unwrap_or_default();
        w.write_record([r.unit.as_str(), r.time.as_str(), r.outcome.as_str(), v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `unit,population`.
pub fn read_population_csv<R: Read>(reader: R) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(rdr.headers()?, &["unit", "population"])?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let v = parse_value(&row[1], line)?
            .ok_or_else(|| Error::invalid(format!("line {line}: empty population")))?;
        out.insert(row[0].trim().to_string(), v);
    }
    Ok(out)
}

/// Reads `time,total`.
pub fn read_totals_csv<R: Read>(reader: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    check_header(rdr.headers()?, &["time", "total"])?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let v = parse_value(&row[1], line)?
            .ok_or_else(|| Error::invalid(format!("line {line}: empty total")))?;
        out.push((row[0].trim().to_string(), v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(units: &[&str], times: &[&str], outcomes: &[&str], f: impl Fn(usize, usize, usize) -> f64) -> Vec<LongRecord> {
        let mut out = Vec::new();
        for (i, u) in units.iter().enumerate() {
            for (t, s) in times.iter().enumerate() {
                for (k, o) in outcomes.iter().enumerate() {
                    out.push(LongRecord::new(*u, *s, *o, Some(f(i, t, k))));
                }
            }
        }
        out
    }

    fn quarters(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{}Q{}", 2019 + i / 4, i % 4 + 1)).collect()
    }

    #[test]
    fn quarterly_panel_splits_19_6() {
        let units: Vec<String> = (0..9).map(|i| format!("u{i}")).collect();
        let times = quarters(25);
        let outcomes: Vec<String> = (0..7).map(|k| format!("y{k}")).collect();
        let u: Vec<&str> = units.iter().map(String::as_str).collect();
        let t: Vec<&str> = times.iter().map(String::as_str).collect();
        let o: Vec<&str> = outcomes.iter().map(String::as_str).collect();
        let recs = grid(&u, &t, &o, |i, t, k| (i * 100 + t * 10 + k) as f64);
        assert_eq!(recs.len(), 1575);
        let p = ingest_long(&recs, "u0", &times[19]).unwrap();
        assert_eq!(p.t0(), 19);
        assert_eq!(p.n_post(), 6);
        assert_eq!(p.n_donors(), 8);
    }

    #[test]
    fn minimal_panel() {
        let recs = grid(&["a", "b"], &["1", "2", "3"], &["y"], |i, t, _| (i + t) as f64);
        let p = ingest_long(&recs, "b", "3").unwrap();
        assert_eq!(p.n_donors(), 1);
        assert_eq!(p.treated_label(), "b");
        assert_eq!(p.t0(), 2);
        assert_eq!(p.value(0, 1, 0), 2.0);
    }

    #[test]
    fn integer_labels_sort_numerically() {
        let recs = grid(&["a", "b"], &["10", "9", "11"], &["y"], |_, t, _| t as f64);
        let p = ingest_long(&recs, "a", "10").unwrap();
        assert_eq!(p.times(), &["9", "10", "11"]);
        assert_eq!(p.t0(), 1);
    }

    #[test]
    fn missing_cell_is_reported() {
        let mut recs = grid(&["a", "b"], &["1", "2", "3"], &["y", "z"], |_, _, _| 1.0);
        recs[3].value = None;
        match ingest_long(&recs, "a", "3") {
            Err(Error::MissingCells(cells)) => {
                assert_eq!(cells.len(), 1);
                assert_eq!(cells[0].unit, "a");
                assert_eq!(cells[0].time, "2");
                assert_eq!(cells[0].outcome, "z");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_cutoff_and_series_errors() {
        let mut recs = grid(&["a", "b"], &["1", "2", "3"], &["y"], |_, _, _| 1.0);
        recs.push(recs[0].clone());
        assert!(matches!(ingest_long(&recs, "a", "2"), Err(Error::DuplicateRecord(_))));
        recs.pop();
        assert!(matches!(ingest_long(&recs, "a", "7"), Err(Error::CutoffNotFound(_))));
        let mut recs = grid(&["a", "b"], &["1", "2", "3"], &["y", "z"], |_, _, _| 1.0);
        recs.retain(|r| !(r.unit == "b" && r.outcome == "z"));
        match ingest_long(&recs, "a", "2") {
            Err(Error::MissingSeries(v)) => assert_eq!(v, vec!["b (z)".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cutoff_at_first_period_rejected() {
        let recs = grid(&["a", "b"], &["1", "2"], &["y"], |_, _, _| 1.0);
        assert!(ingest_long(&recs, "a", "1").is_err());
    }

    #[test]
    fn interpolation_midpoint() {
        let mut recs = grid(&["a"], &["1", "2", "3", "4"], &["y"], |_, t, _| t as f64 + 1.0);
        recs[1].value = None;
        let out = interpolate_gaps(&recs, "4").unwrap();
        assert_eq!(out.filled.len(), 1);
        assert_eq!(out.records[1].value, Some(2.0));
    }

    #[test]
    fn interpolation_respects_boundary() {
        // Gap at the last pre period, post values present.
        let mut recs = grid(&["a"], &["1", "2", "3", "4", "5"], &["y"], |_, t, _| t as f64);
        recs[2].value = None;
        let out = interpolate_gaps(&recs, "4").unwrap();
        assert!(out.filled.is_empty());
        assert_eq!(out.unfilled.len(), 1);
        assert_eq!(out.records[2].value, None);
    }

    #[test]
    fn interpolation_uses_time_coordinates() {
        // Dates: uneven spacing, 2020-01-01 -> 2020-01-11 with gap at day 2.
        let times = ["2020-01-01", "2020-01-03", "2020-01-11", "2020-02-01"];
        let vals = [0.0, f64::NAN, 10.0, 3.0];
        let recs: Vec<_> = times
            .iter()
            .zip(vals)
            .map(|(t, v)| LongRecord::new("a", *t, "y", v.is_finite().then_some(v)))
            .collect();
        let out = interpolate_gaps(&recs, "2020-02-01").unwrap();
        assert!((out.records[1].value.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_gap_case_fills_one_cell() {
        let units = ["SJ", "Arecibo", "Bayamon"];
        let times = quarters(25);
        let t: Vec<&str> = times.iter().map(String::as_str).collect();
        let mut recs = grid(&units, &t, &["emp71", "emp72"], |i, t, k| (i + t + k) as f64);
        // Arecibo emp71 at 2023Q4 (index 19), neighbours on both sides within post.
        let pos = recs
            .iter()
            .position(|r| r.unit == "Arecibo" && r.time == "2023Q4" && r.outcome == "emp71")
            .unwrap();
        recs[pos].value = None;
        let out = interpolate_gaps(&recs, "2023Q3").unwrap();
        assert_eq!(out.filled.len(), 1);
        assert!(out.unfilled.is_empty());
        let bal = enforce_balanced_support(&out.records);
        assert!(bal.dropped.is_empty());
    }

    #[test]
    fn balanced_support_rules() {
        let recs = grid(&["a", "b"], &["1", "2", "3"], &["y", "z"], |_, _, _| 1.0);
        let out = enforce_balanced_support(&recs);
        assert_eq!(out.records, recs);
        assert!(out.dropped.is_empty());

        let mut recs2 = recs.clone();
        recs2.retain(|r| !(r.unit == "b" && r.time == "2" && r.outcome == "z"));
        let out = enforce_balanced_support(&recs2);
        assert_eq!(out.dropped, vec![("b".to_string(), "2".to_string())]);
        assert_eq!(out.records.len(), recs.len() - 2);
        assert!(enforce_balanced_support(&[]).records.is_empty());
    }

    #[test]
    fn shares_and_rates() {
        let totals = vec![("t1".to_string(), 4.0)];
        let s = island_shares(&[vec![1.0], vec![1.0], vec![2.0]], &totals).unwrap();
        assert_eq!(s, vec![vec![0.25], vec![0.25], vec![0.5]]);
        assert_eq!(island_shares(&[vec![4.0]], &totals).unwrap(), vec![vec![1.0]]);
        let bad = vec![("t1".to_string(), 1.0), ("t2".to_string(), 0.0)];
        match island_shares(&[vec![1.0, 1.0]], &bad) {
            Err(Error::NonPositiveTotal(t)) => assert_eq!(t, "t2"),
            other => panic!("unexpected {other:?}"),
        }

        let r = per_capita(&[342.259, 0.0, 57.6 * 342.259], 342_259.0).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - 57.6).abs() < 1e-12);
        assert!(per_capita(&[1.0], 0.0).is_err());
    }

    #[test]
    fn csv_roundtrip_with_missing() {
        let mut recs = grid(&["a", "b"], &["1", "2"], &["y"], |i, t, _| 0.1 * (i + t) as f64 + 1e-17);
        recs[1].value = None;
        let mut buf = Vec::new();
        write_long_csv(&recs, &mut buf).unwrap();
        let back = read_long_csv(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn bad_header_rejected() {
        let data = "unit,period,outcome,value\na,1,y,1\n";
        assert!(read_long_csv(data.as_bytes()).is_err());
    }
}
