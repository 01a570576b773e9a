//! Staged donor-pool screening with a full audit trail.
//!
//! Stages: (1) tolerance bounds on structural features, (2) sector-share gap
//! and movement matching, (3) missingness, (4) pre-period contamination scan,
//! (5) Granger non-causality plus trajectory proximity, (6) non-binding
//! concentration diagnostics. Every stage only removes candidates except
//! stage 6, which removes none.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::diagnostics::{self, ConcentrationReport, RidgeRow};
use crate::error::{Error, Result};
use crate::estimators;
use crate::optimize::SolveOptions;
use crate::panel::{LongRecord, Panel};
use crate::preprocess::{fit_transform, fit_transform_design, Design, SdKind};
use crate::stats;

pub type Metrics = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningReport {
    pub stage: u8,
    pub name: String,
    pub candidates_in: Vec<String>,
    pub candidates_out: Vec<String>,
    /// `metrics[candidate][metric]`.
    pub metrics: Metrics,
    pub thresholds_used: BTreeMap<String, f64>,
    pub relaxation_applied: bool,
    pub notes: Vec<String>,
}

impl ScreeningReport {
    fn new(stage: u8, name: &str, candidates_in: &[String]) -> Self {
        ScreeningReport {
            stage,
            name: name.to_string(),
            candidates_in: candidates_in.to_vec(),
            candidates_out: Vec::new(),
            metrics: BTreeMap::new(),
            thresholds_used: BTreeMap::new(),
            relaxation_applied: false,
            notes: Vec::new(),
        }
    }

    fn metric(&mut self, unit: &str, name: &str, value: f64) {
        self.metrics.entry(unit.to_string()).or_default().insert(name.to_string(), value);
    }

    fn threshold(&mut self, name: &str, value: f64) {
        self.thresholds_used.insert(name.to_string(), value);
    }

    pub fn removed(&self) -> Vec<String> {
        let out: BTreeSet<&String> = self.candidates_out.iter().collect();
        self.candidates_in.iter().filter(|c| !out.contains(c)).cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Stage 1

/// Unit × feature table for the tolerance filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub units: Vec<String>,
    pub features: Vec<String>,
    /// `values[unit][feature]`.
    pub values: Vec<Vec<f64>>,
}

impl FeatureTable {
    /// Reads `unit,feature1,feature2,...` CSV.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(Error::invalid("features CSV needs a unit column and at least one feature"));
        }
        let features = headers.iter().skip(1).map(String::from).collect();
        let mut units = Vec::new();
        let mut values = Vec::new();
        for row in rdr.records() {
            let row = row?;
            units.push(row[0].to_string());
            values.push(
                row.iter()
                    .skip(1)
                    .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad feature value `{v}` for `{}`", &row[0]))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(FeatureTable { units, features, values })
    }
}

/// Keeps candidates whose features fall inside `treated ± SD` (closed) on at
/// least `min_pass` features. The SD is the sample SD across all units.
pub fn tolerance_filter(table: &FeatureTable, treated: &str, candidates: &[String], min_pass: usize) -> Result<ScreeningReport> {
    if table.units.len() < 2 || table.features.is_empty() {
        return Err(Error::invalid("tolerance filter needs at least two units and one feature"));
    }
    let row = |u: &str| {
        table
            .units
            .iter()
            .position(|x| x == u)
            .map(|i| &table.values[i])
            .ok_or_else(|| Error::invalid(format!("unit `{u}` missing from feature table")))
    };
    let tr = row(treated)?;
    let mut rep = ScreeningReport::new(1, "tolerance_filter", candidates);
    rep.threshold("min_pass", min_pass as f64);
    let sds: Vec<f64> = (0..table.features.len())
        .map(|f| stats::sd(&table.values.iter().map(|r| r[f]).collect::<Vec<_>>(), 1))
        .collect();
    for (f, name) in table.features.iter().enumerate() {
        rep.threshold(&format!("{name}.lower"), tr[f] - sds[f]);
        rep.threshold(&format!("{name}.upper"), tr[f] + sds[f]);
        if sds[f] == 0.0 {
            rep.notes.push(format!("feature `{name}` is constant; only exact matches pass"));
        }
    }
    for c in candidates {
        let r = row(c)?;
        let mut passes = 0;
        for (f, name) in table.features.iter().enumerate() {
            let ok = (r[f] - tr[f]).abs() <= sds[f];
            rep.metric(c, &format!("pass.{name}"), f64::from(u8::from(ok)));
            passes += usize::from(ok);
        }
        rep.metric(c, "passes", passes as f64);
        if passes >= min_pass {
            rep.candidates_out.push(c.clone());
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapMoveParams {
    pub gamma0: f64,
    pub mu0: f64,
    /// Successively looser movement thresholds tried while the pool is short.
    pub relaxed_mu: Vec<f64>,
    pub min_pool: usize,
}

impl Default for GapMoveParams {
    fn default() -> Self {
        GapMoveParams { gamma0: 0.10, mu0: 0.80, relaxed_mu: vec![0.75, 0.70], min_pool: 15 }
    }
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &m in &idx[i..=j] {
            ranks[m] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Gap and movement matching on sector shares (outcomes of `shares`, pre
/// period only). Passing needs `Gap ≤ γ0` and `Move ≥ μ` in every sector.
pub fn gap_movement_filter(shares: &Panel, candidates: &[String], params: &GapMoveParams) -> Result<ScreeningReport> {
    let t0 = shares.t0();
    if t0 < 2 {
        return Err(Error::invalid("movement matching needs at least two pre periods"));
    }
    let mut rep = ScreeningReport::new(2, "gap_movement_filter", candidates);
    rep.threshold("gamma0", params.gamma0);
    rep.threshold("min_pool", params.min_pool as f64);
    let sgn = |x: f64| if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 };
    let mut worst_gap = Vec::new();
    let mut worst_move = Vec::new();
    let mut mean_gap = Vec::new();
    let mut mean_move = Vec::new();
    for c in candidates {
        let i = shares
            .unit_index(c)
            .filter(|&i| i > 0)
            .ok_or_else(|| Error::invalid(format!("candidate `{c}` missing from share panel")))?;
        let (mut g_all, mut m_all) = (Vec::new(), Vec::new());
        for (k, o) in shares.outcomes().iter().enumerate() {
            let a = shares.series(i, k);
            let b = shares.series(0, k);
            let gap = stats::mean(&(0..t0).map(|t| (a[t] - b[t]).abs()).collect::<Vec<_>>());
            let same = (1..t0).filter(|&t| sgn(a[t] - a[t - 1]) == sgn(b[t] - b[t - 1])).count();
            let mv = same as f64 / (t0 - 1) as f64;
            rep.metric(c, &format!("gap.{}", o.name), gap);
            rep.metric(c, &format!("move.{}", o.name), mv);
            g_all.push(gap);
            m_all.push(mv);
        }
        worst_gap.push(g_all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        worst_move.push(m_all.iter().copied().fold(f64::INFINITY, f64::min));
        mean_gap.push(stats::mean(&g_all));
        mean_move.push(stats::mean(&m_all));
    }
    let passing = |mu: f64| -> Vec<bool> {
        (0..candidates.len()).map(|n| worst_gap[n] <= params.gamma0 && worst_move[n] >= mu).collect()
    };
    let mut mu = params.mu0;
    let mut pass = passing(mu);
    let mut trace = vec![format!("mu = {mu}: {} pass", pass.iter().filter(|&&p| p).count())];
    for &next in &params.relaxed_mu {
        if pass.iter().filter(|&&p| p).count() >= params.min_pool {
            break;
        }
        mu = next;
        pass = passing(mu);
        rep.relaxation_applied = true;
        trace.push(format!("mu = {mu}: {} pass", pass.iter().filter(|&&p| p).count()));
    }
    rep.threshold("mu_applied", mu);
    let n_pass = pass.iter().filter(|&&p| p).count();
    if n_pass < params.min_pool {
        // Composite: average of the Gap rank (ascending) and Move rank (descending).
        let rg = average_ranks(&mean_gap);
        let neg: Vec<f64> = mean_move.iter().map(|m| -m).collect();
        let rm = average_ranks(&neg);
        let composite: Vec<f64> = rg.iter().zip(&rm).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut rest: Vec<usize> = (0..candidates.len()).filter(|&n| !pass[n]).collect();
        rest.sort_by(|&a, &b| composite[a].total_cmp(&composite[b]).then(a.cmp(&b)));
        let need = params.min_pool - n_pass;
        for &n in rest.iter().take(need) {
            pass[n] = true;
        }
        rep.relaxation_applied = true;
        trace.push(format!("fallback ranking added {}", need.min(rest.len())));
        for (n, c) in candidates.iter().enumerate() {
            rep.metric(c, "composite_rank", composite[n]);
        }
    }
    rep.notes.extend(trace);
    rep.candidates_out = candidates.iter().zip(&pass).filter(|(_, &p)| p).map(|(c, _)| c.clone()).collect();
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Stage 3

/// Drops candidates with more than `max_missing` missing cells in any single
/// outcome. Cells absent from `records` count as missing.
pub fn missingness_screen(records: &[LongRecord], candidates: &[String], max_missing: usize) -> Result<ScreeningReport> {
    let times: BTreeSet<&str> = records.iter().map(|r| r.time.as_str()).collect();
    let outcomes: BTreeSet<&str> = records.iter().map(|r| r.outcome.as_str()).collect();
    let mut present: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.value.is_some_and(f64::is_finite)) {
        *present.entry((r.unit.as_str(), r.outcome.as_str())).or_default() += 1;
    }
    let mut rep = ScreeningReport::new(3, "missingness_screen", candidates);
    rep.threshold("max_missing_per_outcome", max_missing as f64);
    for c in candidates {
        let mut worst = 0;
        for &o in &outcomes {
            let missing = times.len() - present.get(&(c.as_str(), o)).copied().unwrap_or(0);
            rep.metric(c, &format!("missing.{o}"), missing as f64);
            worst = worst.max(missing);
        }
        if worst <= max_missing {
            rep.candidates_out.push(c.clone());
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Stage 4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContaminationParams {
    /// Pseudo-cutoff period labels; empty means every feasible pre period.
    pub placebo_dates: Vec<String>,
    /// Inclusive `(from, to)` label windows whose dates are skipped.
    pub exclusion_windows: Vec<(String, String)>,
    pub ratio_threshold: f64,
    pub gap_threshold_sd: f64,
    pub min_consecutive: usize,
    /// Minimum pseudo-pre length; `None` means `max(4, ceil(0.4 * T0))`.
    pub min_pre: Option<usize>,
    pub min_post: usize,
}

impl Default for ContaminationParams {
    fn default() -> Self {
        ContaminationParams {
            placebo_dates: Vec::new(),
            exclusion_windows: Vec::new(),
            ratio_threshold: 1.5,
            gap_threshold_sd: 1.0,
            min_consecutive: 4,
            min_pre: None,
            min_post: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContaminationRun {
    pub donor: String,
    pub from: String,
    pub to: String,
    pub length: usize,
}

/// Longest run of consecutive time indices in a sorted index list.
fn longest_run(idx: &[usize]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    for i in 0..idx.len() {
        if i > 0 && idx[i] != idx[i - 1] + 1 {
            start = i;
        }
        let len = i - start + 1;
        if best.is_none_or(|(_, l)| len > l) {
            best = Some((idx[start], len));
        }
    }
    best
}

/// Pre-period in-time placebo scan of every candidate donor. Each candidate
/// is fit as if treated (averaged objective, the other candidates as donors)
/// at each pseudo-cutoff, with the pseudo-post window running to the end of
/// the true pre period. A date exceeds when the post/pre RMSPE ratio or the
/// median `|gap|/s` reaches its threshold; candidates with `min_consecutive`
/// consecutive exceeding dates are flagged. Flags are resolved one at a time,
/// most severe first, rescanning the remaining pool after each removal.
pub fn contamination_scan(panel: &Panel, candidates: &[String], params: &ContaminationParams) -> Result<(ScreeningReport, Vec<ContaminationRun>)> {
    let t0 = panel.t0();
    let mut rep = ScreeningReport::new(4, "contamination_scan", candidates);
    rep.threshold("ratio_threshold", params.ratio_threshold);
    rep.threshold("gap_threshold_sd", params.gap_threshold_sd);
    rep.threshold("min_consecutive", params.min_consecutive as f64);
    let idx: Vec<usize> = candidates
        .iter()
        .map(|c| panel.unit_index(c).filter(|&i| i > 0).ok_or_else(|| Error::invalid(format!("candidate `{c}` missing from panel"))))
        .collect::<Result<_>>()?;
    if idx.len() < 2 {
        rep.notes.push("fewer than two candidates; scan skipped".into());
        rep.candidates_out = candidates.to_vec();
        return Ok((rep, Vec::new()));
    }

    let window_of = |label: &str| panel.times().iter().position(|t| t == label);
    let mut excluded = BTreeSet::new();
    for (a, b) in &params.exclusion_windows {
        match (window_of(a), window_of(b)) {
            (Some(x), Some(y)) => excluded.extend(x.min(y)..=x.max(y)),
            _ => rep.notes.push(format!("exclusion window {a}..{b} not on the time axis; ignored")),
        }
    }
    let requested: Vec<usize> = if params.placebo_dates.is_empty() {
        (0..t0).collect()
    } else {
        params
            .placebo_dates
            .iter()
            .filter_map(|d| {
                let w = window_of(d);
                if w.is_none() {
                    rep.notes.push(format!("placebo date {d} not on the time axis; skipped"));
                }
                w
            })
            .collect()
    };
    let min_pre = params.min_pre.unwrap_or_else(|| ((0.4 * t0 as f64).ceil() as usize).max(4));
    rep.threshold("min_pre", min_pre as f64);
    let mut dates = Vec::new();
    for p in requested {
        if excluded.contains(&p) {
            continue;
        }
        if p < min_pre || p + params.min_post > t0 {
            if !params.placebo_dates.is_empty() {
                rep.notes.push(format!("placebo date {} leaves too few pseudo periods; skipped", panel.times()[p]));
            }
            continue;
        }
        dates.push(p);
    }
    dates.sort_unstable();
    dates.dedup();
    if dates.is_empty() {
        rep.notes.push("empty placebo grid; no donors flagged".into());
        rep.candidates_out = candidates.to_vec();
        return Ok((rep, Vec::new()));
    }

    // A broken donor also distorts the pseudo-fits of donors that lean on it,
    // so the most severe flagged donor is removed and the rest rescanned.
    let mut pool: Vec<usize> = (0..idx.len()).collect();
    let mut runs = Vec::new();
    let mut removed = BTreeSet::new();
    loop {
        let scans = scan_pool(panel, &idx, &pool, &dates)?;
        let mut worst: Option<(usize, f64, (usize, usize))> = None;
        for (&c, res) in pool.iter().zip(&scans) {
            let exceed: Vec<usize> = res
                .iter()
                .filter(|(_, r, m)| *r >= params.ratio_threshold || *m >= params.gap_threshold_sd)
                .map(|(p, _, _)| *p)
                .collect();
            if let Some(run) = longest_run(&exceed).filter(|r| r.1 >= params.min_consecutive) {
                let severity = res
                    .iter()
                    .map(|(_, r, m)| (r / params.ratio_threshold).max(m / params.gap_threshold_sd))
                    .fold(f64::NEG_INFINITY, f64::max);
                if worst.is_none_or(|w| severity > w.1) {
                    worst = Some((c, severity, run));
                }
            }
        }
        let last = worst.is_none() || pool.len() <= 2;
        for (&c, res) in pool.iter().zip(&scans) {
            if last || worst.is_some_and(|w| w.0 == c) {
                record_scan(&mut rep, panel, &candidates[c], res, params);
            }
        }
        let Some((c, severity, (start, len))) = worst else { break };
        runs.push(ContaminationRun {
            donor: candidates[c].clone(),
            from: panel.times()[start].clone(),
            to: panel.times()[start + len - 1].clone(),
            length: len,
        });
        removed.insert(c);
        rep.notes.push(format!("flagged {} (severity {severity:.3}); rescanning without it", candidates[c]));
        pool.retain(|&j| j != c);
        if last {
            for &j in &pool {
                rep.notes.push(format!("{}: no peers left to rescan against; retained", candidates[j]));
            }
            break;
        }
    }
    rep.candidates_out = (0..idx.len()).filter(|c| !removed.contains(c)).map(|c| candidates[c].clone()).collect();
    Ok((rep, runs))
}

/// `(date, ratio, median |gap|)` per date for each pooled candidate, fit on
/// the other pooled candidates.
fn scan_pool(panel: &Panel, idx: &[usize], pool: &[usize], dates: &[usize]) -> Result<Vec<Vec<(usize, f64, f64)>>> {
    let t0 = panel.t0();
    let opts = SolveOptions::default();
    pool.par_iter()
        .map(|&c| {
            let d = idx[c];
            let donors: Vec<usize> = pool.iter().filter(|&&j| j != c).map(|&j| idx[j]).collect();
            dates
                .iter()
                .map(|&p| {
                    let design = Design { treated: d, donors: donors.clone(), fit_len: p, horizon: t0 };
                    let pp = fit_transform_design(panel, &design, SdKind::Population)?;
                    let fit = estimators::fit_average_with(&pp, &opts)?;
                    let w = &fit.weights.for_outcome(0).weights;
                    let res: Vec<Vec<f64>> = (0..pp.n_outcomes()).map(|k| pp.residuals(k, w)).collect();
                    let pre: Vec<f64> = res.iter().flat_map(|r| r[..p].iter().copied()).collect();
                    let post: Vec<f64> = res.iter().flat_map(|r| r[p..].iter().copied()).collect();
                    let pre_rms = stats::rms(&pre);
                    let ratio = if pre_rms > 0.0 { stats::rms(&post) / pre_rms } else { f64::INFINITY };
                    let med = stats::median(&post.iter().map(|x| x.abs()).collect::<Vec<_>>());
                    Ok((p, ratio, med))
                })
                .collect()
        })
        .collect()
}

fn record_scan(rep: &mut ScreeningReport, panel: &Panel, c: &str, res: &[(usize, f64, f64)], params: &ContaminationParams) {
    for (p, r, m) in res {
        rep.metric(c, &format!("ratio@{}", panel.times()[*p]), *r);
        rep.metric(c, &format!("gap_sd@{}", panel.times()[*p]), *m);
    }
    let exceed: Vec<usize> = res
        .iter()
        .filter(|(_, r, m)| *r >= params.ratio_threshold || *m >= params.gap_threshold_sd)
        .map(|(p, _, _)| *p)
        .collect();
    rep.metric(c, "median_ratio", stats::median(&res.iter().map(|r| r.1).collect::<Vec<_>>()));
    rep.metric(c, "median_gap_sd", stats::median(&res.iter().map(|r| r.2).collect::<Vec<_>>()));
    rep.metric(c, "exceeding_dates", exceed.len() as f64);
    rep.metric(c, "longest_run", longest_run(&exceed).map_or(0, |r| r.1) as f64);
}

// ---------------------------------------------------------------------------
// Stage 5

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrangerOutcome {
    pub outcome: String,
    /// `None` when the regressors are collinear.
    pub p_value: Option<f64>,
    pub pass: Option<bool>,
}

fn ols_rss(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<f64> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = x.nrows().max(x.ncols()) as f64 * f64::EPSILON * smax.max(1.0);
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return None;
    }
    let beta = svd.solve(y, tol).ok()?;
    Some((y - x * beta).norm_squared())
}

/// Bivariate Granger F-test p-value: does `x` help predict `y` beyond `y`'s
/// own `lags` lags? `None` when the design is collinear or has no residual
/// degrees of freedom.
pub fn granger_p_value(y: &[f64], x: &[f64], lags: usize) -> Option<f64> {
    let t = y.len();
    if lags == 0 || t <= 3 * lags + 1 {
        return None;
    }
    let n = t - lags;
    let df2 = n - (1 + 2 * lags);
    let build = |with_x: bool| {
        let cols = 1 + lags + if with_x { lags } else { 0 };
        DMatrix::from_fn(n, cols, |r, c| {
            let s = r + lags;
            match c {
                0 => 1.0,
                c if c <= lags => y[s - c],
                c => x[s - (c - lags)],
            }
        })
    };
    let yv = DVector::from_iterator(n, y[lags..].iter().copied());
    let rss_u = ols_rss(&build(true), &yv)?;
    let rss_r = ols_rss(&build(false), &yv)?;
    let scale = yv.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if rss_u <= 1e-24 * scale {
        return Some(0.0);
    }
    let f = ((rss_r - rss_u).max(0.0) / lags as f64) / (rss_u / df2 as f64);
    let dist = FisherSnedecor::new(lags as f64, df2 as f64).ok()?;
    Some(1.0 - dist.cdf(f))
}

/// Granger pass per outcome for one donor on the pre period.
pub fn granger_outcomes(panel: &Panel, donor: usize, lags: usize, alpha: f64) -> Vec<GrangerOutcome> {
    let t0 = panel.t0();
    panel
        .outcomes()
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let y = &panel.series(0, k)[..t0];
            let x = &panel.series(donor, k)[..t0];
            let p = granger_p_value(y, x, lags);
            GrangerOutcome { outcome: o.name.clone(), p_value: p, pass: p.map(|p| p >= alpha) }
        })
        .collect()
}

/// Fraction of testable outcomes passing; `None` when none are testable.
pub fn granger_pass_rate(outcomes: &[GrangerOutcome]) -> Option<f64> {
    let tested: Vec<bool> = outcomes.iter().filter_map(|g| g.pass).collect();
    (!tested.is_empty()).then(|| tested.iter().filter(|&&p| p).count() as f64 / tested.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proximity {
    pub donor: String,
    pub d_mean: f64,
    pub d_slope: f64,
    pub combined: f64,
    pub rank: usize,
}

/// Combined distance `w_mean·D_mean + w_slope·D_slope` to the treated unit,
/// where each component is a Euclidean distance across outcomes of z-scored
/// pre means (resp. OLS pre-trend slopes). Z-scores use the mean and sample
/// SD across candidates. Ranked ascending; ties keep candidate order.
pub fn proximity_rank(panel: &Panel, candidates: &[usize], w_mean: f64, w_slope: f64) -> Result<(Vec<Proximity>, Vec<String>)> {
    if candidates.len() < 2 {
        return Err(Error::invalid("proximity ranking needs at least two donors"));
    }
    let t0 = panel.t0();
    let tt: Vec<f64> = (0..t0).map(|t| t as f64).collect();
    let feats = |i: usize| -> (Vec<f64>, Vec<f64>) {
        (0..panel.n_outcomes())
            .map(|k| {
                let s = &panel.series(i, k)[..t0];
                (stats::mean(s), stats::ols_slope(&tt, s))
            })
            .unzip()
    };
    let treated = feats(0);
    let donors: Vec<(Vec<f64>, Vec<f64>)> = candidates.iter().map(|&i| feats(i)).collect();
    let mut notes = Vec::new();
    let mut dist = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, name: &str| -> Vec<f64> {
        let k_n = pick(&treated).len();
        let mut d2 = vec![0.0; donors.len()];
        for k in 0..k_n {
            let col: Vec<f64> = donors.iter().map(|d| pick(d)[k]).collect();
            let (m, s) = (stats::mean(&col), stats::sd(&col, 1));
            if !(s > 0.0) {
                notes.push(format!("{name} component for outcome {k} has zero spread; z-scores set to 0"));
                continue;
            }
            let zt = (pick(&treated)[k] - m) / s;
            for (j, v) in col.iter().enumerate() {
                d2[j] += ((v - m) / s - zt).powi(2);
            }
        }
        d2.into_iter().map(f64::sqrt).collect()
    };
    let dm = dist(&|f| &f.0, "mean");
    let ds = dist(&|f| &f.1, "slope");
    let combined: Vec<f64> = dm.iter().zip(&ds).map(|(a, b)| w_mean * a + w_slope * b).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| combined[a].total_cmp(&combined[b]).then(a.cmp(&b)));
    let mut rank = vec![0; candidates.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    let out = candidates
        .iter()
        .enumerate()
        .map(|(j, &i)| Proximity {
            donor: panel.units()[i].clone(),
            d_mean: dm[j],
            d_slope: ds[j],
            combined: combined[j],
            rank: rank[j],
        })
        .collect();
    Ok((out, notes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignValidationParams {
    pub lags: usize,
    pub alpha: f64,
    pub min_pass_rate: f64,
    pub w_mean: f64,
    pub w_slope: f64,
    pub max_rank: usize,
}

impl Default for DesignValidationParams {
    fn default() -> Self {
        DesignValidationParams { lags: 1, alpha: 0.05, min_pass_rate: 0.70, w_mean: 0.6, w_slope: 0.4, max_rank: 7 }
    }
}

/// Stage 5: keep candidates whose Granger pass rate reaches `min_pass_rate`
/// and whose proximity rank is at most `max_rank`.
pub fn design_validation(panel: &Panel, candidates: &[String], params: &DesignValidationParams) -> Result<ScreeningReport> {
    let t0 = panel.t0();
    if t0 <= 2 * params.lags + 2 {
        return Err(Error::invalid(format!("Granger test with {} lag(s) needs T0 > {}", params.lags, 2 * params.lags + 2)));
    }
    let mut rep = ScreeningReport::new(5, "design_validation", candidates);
    rep.threshold("lags", params.lags as f64);
    rep.threshold("alpha", params.alpha);
    rep.threshold("min_pass_rate", params.min_pass_rate);
    rep.threshold("w_mean", params.w_mean);
    rep.threshold("w_slope", params.w_slope);
    rep.threshold("max_rank", params.max_rank as f64);
    let idx: Vec<usize> = candidates
        .iter()
        .map(|c| panel.unit_index(c).filter(|&i| i > 0).ok_or_else(|| Error::invalid(format!("candidate `{c}` missing from panel"))))
        .collect::<Result<_>>()?;
    let proximity = if idx.len() >= 2 {
        let (p, notes) = proximity_rank(panel, &idx, params.w_mean, params.w_slope)?;
        rep.notes.extend(notes);
        p
    } else {
        idx.iter()
            .map(|&i| Proximity { donor: panel.units()[i].clone(), d_mean: 0.0, d_slope: 0.0, combined: 0.0, rank: 1 })
            .collect()
    };
    for ((c, &i), prox) in candidates.iter().zip(&idx).zip(&proximity) {
        let g = granger_outcomes(panel, i, params.lags, params.alpha);
        for o in &g {
            match o.p_value {
                Some(p) => rep.metric(c, &format!("granger_p.{}", o.outcome), p),
                None => rep.notes.push(format!("{c}: outcome `{}` untestable (collinear); excluded from pass rate", o.outcome)),
            }
        }
        let rate = granger_pass_rate(&g);
        rep.metric(c, "granger_pass_rate", rate.unwrap_or(f64::NAN));
        rep.metric(c, "proximity_d_mean", prox.d_mean);
        rep.metric(c, "proximity_d_slope", prox.d_slope);
        rep.metric(c, "proximity_combined", prox.combined);
        rep.metric(c, "proximity_rank", prox.rank as f64);
        if rate.is_some_and(|r| r >= params.min_pass_rate) && prox.rank <= params.max_rank {
            rep.candidates_out.push(c.clone());
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Stage 6 and orchestration

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage6Report {
    pub weights: Vec<f64>,
    pub concentration: ConcentrationReport,
    pub ridge_grid: Vec<RidgeRow>,
}

/// Non-binding diagnostics on the final pool (average estimator).
pub fn pool_diagnostics(panel: &Panel, pool: &[String], lambdas: &[f64]) -> Result<(ScreeningReport, Stage6Report)> {
    let mut rep = ScreeningReport::new(6, "pool_diagnostics", pool);
    rep.candidates_out = pool.to_vec();
    let sub = panel.select_donors_by_label(pool)?;
    let pp = fit_transform(&sub)?;
    let fit = estimators::fit_average(&pp)?;
    let w = fit.weights.for_outcome(0).weights.clone();
    let concentration = diagnostics::concentration(&w, &pp)?;
    for (j, d) in pool.iter().enumerate() {
        rep.metric(d, "weight", w[j]);
        rep.metric(d, "leverage", concentration.leverage[j]);
        if let Some(c) = concentration.cosine[j] {
            rep.metric(d, "cosine", c);
        }
    }
    rep.threshold("n_eff", concentration.n_eff);
    let ridge = diagnostics::ridge_grid(&pp, lambdas)?;
    Ok((rep, Stage6Report { weights: w, concentration, ridge_grid: ridge }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Minimum features passed in stage 1; `None` skips the stage.
    pub tolerance_min_pass: Option<usize>,
    pub gap_movement: Option<GapMoveParams>,
    /// Maximum missing cells per outcome in stage 3; `None` skips the stage.
    pub max_missing_per_outcome: Option<usize>,
    pub contamination: Option<ContaminationParams>,
    pub design_validation: Option<DesignValidationParams>,
    /// Ridge grid for stage 6; `None` skips the stage.
    pub ridge_lambdas: Option<Vec<f64>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tolerance_min_pass: Some(4),
            gap_movement: Some(GapMoveParams::default()),
            max_missing_per_outcome: Some(2),
            contamination: Some(ContaminationParams::default()),
            design_validation: Some(DesignValidationParams::default()),
            ridge_lambdas: Some(diagnostics::DEFAULT_LAMBDAS.to_vec()),
        }
    }
}

impl PipelineConfig {
    /// Every stage disabled.
    pub fn none() -> Self {
        PipelineConfig {
            tolerance_min_pass: None,
            gap_movement: None,
            max_missing_per_outcome: None,
            contamination: None,
            design_validation: None,
            ridge_lambdas: None,
        }
    }
}

/// Data consumed by the pipeline. `panel` holds the balanced outcome panel
/// used by stages 4 to 6; the others are only needed by their stages.
#[derive(Debug, Clone, Default)]
pub struct ScreeningInputs<'a> {
    pub panel: Option<&'a Panel>,
    pub features: Option<&'a FeatureTable>,
    pub shares: Option<&'a Panel>,
    pub records: Option<&'a [LongRecord]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineResult {
    pub treated: String,
    pub initial: Vec<String>,
    pub reports: Vec<ScreeningReport>,
    pub contamination_runs: Vec<ContaminationRun>,
    pub stage6: Option<Stage6Report>,
    pub final_donors: Vec<String>,
}

fn need<'a, T: ?Sized>(x: Option<&'a T>, what: &str, stage: u8) -> Result<&'a T> {
    x.ok_or_else(|| Error::invalid(format!("stage {stage} needs {what}")))
}

/// Runs the enabled stages in order on the surviving candidates.
pub fn run_pipeline(inputs: &ScreeningInputs<'_>, treated: &str, candidates: &[String], cfg: &PipelineConfig) -> Result<PipelineResult> {
    let mut pool = candidates.to_vec();
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    let mut push = |rep: ScreeningReport, pool: &mut Vec<String>| -> Result<()> {
        if rep.candidates_out.is_empty() {
            return Err(Error::EmptyPool { stage: rep.stage, name: rep.name.clone() });
        }
        *pool = rep.candidates_out.clone();
        reports.push(rep);
        Ok(())
    };
    if let Some(min_pass) = cfg.tolerance_min_pass {
        push(tolerance_filter(need(inputs.features, "a feature table", 1)?, treated, &pool, min_pass)?, &mut pool)?;
    }
    if let Some(p) = &cfg.gap_movement {
        push(gap_movement_filter(need(inputs.shares, "a share panel", 2)?, &pool, p)?, &mut pool)?;
    }
    if let Some(m) = cfg.max_missing_per_outcome {
        push(missingness_screen(need(inputs.records, "long records", 3)?, &pool, m)?, &mut pool)?;
    }
    if let Some(p) = &cfg.contamination {
        let (rep, r) = contamination_scan(need(inputs.panel, "an outcome panel", 4)?, &pool, p)?;
        runs = r;
        push(rep, &mut pool)?;
    }
    if let Some(p) = &cfg.design_validation {
        push(design_validation(need(inputs.panel, "an outcome panel", 5)?, &pool, p)?, &mut pool)?;
    }
    let mut stage6 = None;
    if let Some(l) = &cfg.ridge_lambdas {
        let (rep, s6) = pool_diagnostics(need(inputs.panel, "an outcome panel", 6)?, &pool, l)?;
        push(rep, &mut pool)?;
        stage6 = Some(s6);
    }
    Ok(PipelineResult {
        treated: treated.to_string(),
        initial: candidates.to_vec(),
        reports,
        contamination_runs: runs,
        stage6,
        final_donors: pool,
    })
}
