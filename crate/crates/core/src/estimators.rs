//! Separate, averaged, concatenated and ν-combined synthetic control
//! estimators, intercept-shifted counterfactuals, and effect summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{self, SimplexQP, SolveOptions, WeightVector};
use crate::panel::Panel;
use crate::preprocess::{Design, PreprocessedPanel, TransformParams};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Separate,
    Average,
    Concatenated,
    Combined,
    /// Equal weights, no optimization.
    Uniform,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Separate => "separate",
            EstimatorKind::Average => "average",
            EstimatorKind::Concatenated => "concatenated",
            EstimatorKind::Combined => "combined",
            EstimatorKind::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuChoice {
    Fixed(f64),
    /// Scale-matching heuristic, see [`select_nu`].
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSpec {
    Separate,
    Average,
    Concatenated,
    Combined(NuChoice),
}

impl EstimatorSpec {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorSpec::Separate => EstimatorKind::Separate,
            EstimatorSpec::Average => EstimatorKind::Average,
            EstimatorSpec::Concatenated => EstimatorKind::Concatenated,
            EstimatorSpec::Combined(_) => EstimatorKind::Combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWeights {
    Common(WeightVector),
    /// One weight vector per outcome.
    Separate(Vec<WeightVector>),
}

impl FitWeights {
    pub fn for_outcome(&self, k: usize) -> &WeightVector {
        match self {
            FitWeights::Common(w) => w,
            FitWeights::Separate(ws) => &ws[k],
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            FitWeights::Common(w) => w.converged,
            FitWeights::Separate(ws) => ws.iter().all(|w| w.converged),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    pub weights: FitWeights,
    pub nu: Option<f64>,
    /// Averaged objective at the fitted weights.
    pub q_avg: f64,
    /// Concatenated objective at the fitted weights.
    pub q_cat: f64,
    pub per_outcome_rmspe: Vec<f64>,
    pub mean_rmspe: f64,
    pub donors: Vec<String>,
    pub outcomes: Vec<String>,
    pub design: Design,
    pub params: TransformParams,
}

impl FitResult {
    /// Per-donor `(min, max)` weight across outcomes for separate fits.
    pub fn separate_range(&self) -> Option<Vec<(f64, f64)>> {
        let FitWeights::Separate(ws) = &self.weights else {
            return None;
        };
        let n = self.donors.len();
        Some(
            (0..n)
                .map(|j| {
                    ws.iter().map(|w| w.weights[j]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                        (lo.min(x), hi.max(x))
                    })
                })
                .collect(),
        )
    }
}

/// Pre-period residuals `r_{t,k}` with outcome-specific weights.
fn pre_residuals(pp: &PreprocessedPanel, weights: &dyn Fn(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let t0 = pp.t0();
    (0..pp.n_outcomes())
        .map(|k| {
            let mut r = pp.residuals(k, &weights(k));
            r.truncate(t0);
            r
        })
        .collect()
}

fn q_avg_from(res: &[Vec<f64>]) -> f64 {
    let kf = res.len() as f64;
    let t0 = res[0].len();
    let avg: Vec<f64> = (0..t0).map(|t| res.iter().map(|r| r[t]).sum::<f64>() / kf).collect();
    stats::rms(&avg)
}

fn q_cat_from(res: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = res.iter().flatten().copied().collect();
    stats::rms(&flat)
}

/// `q_avg(w)`: RMS over pre periods of the cross-outcome mean residual.
pub fn q_avg(pp: &PreprocessedPanel, w: &[f64]) -> f64 {
    q_avg_from(&pre_residuals(pp, &|_| w.to_vec()))
}

/// `q_cat(w)`: RMS over all pre-period × outcome residuals.
pub fn q_cat(pp: &PreprocessedPanel, w: &[f64]) -> f64 {
    q_cat_from(&pre_residuals(pp, &|_| w.to_vec()))
}

/// Per-outcome pre-period RMSPE at `w`.
pub fn per_outcome_rmspe(pp: &PreprocessedPanel, w: &[f64]) -> Vec<f64> {
    pre_residuals(pp, &|_| w.to_vec()).iter().map(|r| stats::rms(r)).collect()
}

/// Evaluates every fit metric for the given weights without optimizing.
pub fn evaluate(pp: &PreprocessedPanel, estimator: EstimatorKind, weights: FitWeights, nu: Option<f64>) -> FitResult {
    let res = pre_residuals(pp, &|k| weights.for_outcome(k).weights.clone());
    let per: Vec<f64> = res.iter().map(|r| stats::rms(r)).collect();
    FitResult {
        estimator,
        q_avg: q_avg_from(&res),
        q_cat: q_cat_from(&res),
        mean_rmspe: stats::mean(&per),
        per_outcome_rmspe: per,
        weights,
        nu,
        donors: pp.donor_labels().to_vec(),
        outcomes: pp.outcomes().to_vec(),
        design: pp.design().clone(),
        params: pp.params().clone(),
    }
}

fn averaged_problem(pp: &PreprocessedPanel) -> Result<SimplexQP> {
    let (x, y) = pp.averaged_design();
    SimplexQP::new(x, y, 0.0)
}

fn concatenated_problem(pp: &PreprocessedPanel) -> Result<SimplexQP> {
    let (x, y) = pp.concatenated_design();
    SimplexQP::new(x, y, 0.0)
}

/// K independent simplex fits, one per outcome.
pub fn fit_separate(pp: &PreprocessedPanel) -> Result<FitResult> {
    fit_separate_with(pp, &SolveOptions::default())
}

pub fn fit_separate_with(pp: &PreprocessedPanel, opts: &SolveOptions) -> Result<FitResult> {
    let ws = (0..pp.n_outcomes())
        .map(|k| {
            let (x, y) = pp.outcome_design(k);
            let p = SimplexQP::new(x, y, 0.0).map_err(|e| {
                Error::Numerical(format!("separate fit for outcome `{}`: {e}", pp.outcomes()[k]))
            })?;
            Ok(optimize::solve_qp_simplex(&p, opts))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(pp, EstimatorKind::Separate, FitWeights::Separate(ws), None))
}

/// One common weight vector minimizing `q_avg`.
pub fn fit_average(pp: &PreprocessedPanel) -> Result<FitResult> {
    fit_average_with(pp, &SolveOptions::default())
}

pub fn fit_average_with(pp: &PreprocessedPanel, opts: &SolveOptions) -> Result<FitResult> {
    let w = optimize::solve_qp_simplex(&averaged_problem(pp)?, opts);
    Ok(evaluate(pp, EstimatorKind::Average, FitWeights::Common(w), None))
}

/// One common weight vector minimizing `q_cat`.
pub fn fit_concatenated(pp: &PreprocessedPanel) -> Result<FitResult> {
    fit_concatenated_with(pp, &SolveOptions::default())
}

pub fn fit_concatenated_with(pp: &PreprocessedPanel, opts: &SolveOptions) -> Result<FitResult> {
    let w = optimize::solve_qp_simplex(&concatenated_problem(pp)?, opts);
    Ok(evaluate(pp, EstimatorKind::Concatenated, FitWeights::Common(w), None))
}

/// `ν̂ = min{1, q_cat(γ̂_cat) / q_avg(γ̂_cat)}`, with `1` when `q_avg(γ̂_cat) = 0`.
pub fn select_nu(pp: &PreprocessedPanel) -> Result<f64> {
    let cat = fit_concatenated(pp)?;
    Ok(nu_from_concatenated(&cat))
}

fn nu_from_concatenated(cat: &FitResult) -> f64 {
    if cat.q_avg > 0.0 {
        (cat.q_cat / cat.q_avg).min(1.0)
    } else {
        1.0
    }
}

pub fn fit_combined(pp: &PreprocessedPanel, nu: NuChoice) -> Result<FitResult> {
    fit_combined_with(pp, nu, &SolveOptions::default())
}

pub fn fit_combined_with(pp: &PreprocessedPanel, nu: NuChoice, opts: &SolveOptions) -> Result<FitResult> {
    let nu = match nu {
        NuChoice::Fixed(v) => v,
        NuChoice::Auto => nu_from_concatenated(&fit_concatenated_with(pp, opts)?),
    };
    let w = optimize::solve_combined(&averaged_problem(pp)?, &concatenated_problem(pp)?, nu, opts)?;
    Ok(evaluate(pp, EstimatorKind::Combined, FitWeights::Common(w), Some(nu)))
}

/// Dispatches on an [`EstimatorSpec`].
pub fn fit(pp: &PreprocessedPanel, spec: &EstimatorSpec, opts: &SolveOptions) -> Result<FitResult> {
    match spec {
        EstimatorSpec::Separate => fit_separate_with(pp, opts),
        EstimatorSpec::Average => fit_average_with(pp, opts),
        EstimatorSpec::Concatenated => fit_concatenated_with(pp, opts),
        EstimatorSpec::Combined(nu) => fit_combined_with(pp, *nu, opts),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuSweepRow {
    pub nu: f64,
    pub q_avg: f64,
    pub q_cat: f64,
    pub mean_rmspe: f64,
    pub weights: Vec<f64>,
}

/// Combined fits across a grid of ν values.
pub fn nu_sweep(pp: &PreprocessedPanel, grid: &[f64], opts: &SolveOptions) -> Result<Vec<NuSweepRow>> {
    grid.iter()
        .map(|&nu| {
            let f = fit_combined_with(pp, NuChoice::Fixed(nu), opts)?;
            Ok(NuSweepRow {
                nu,
                q_avg: f.q_avg,
                q_cat: f.q_cat,
                mean_rmspe: f.mean_rmspe,
                weights: f.weights.for_outcome(0).weights.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Counterfactuals and effects

/// Treated − synthetic gaps per outcome over the fit's horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectSeries {
    pub outcomes: Vec<String>,
    pub periods: Vec<String>,
    /// Number of fitting periods; gaps at `t >= t0` are post-treatment.
    pub t0: usize,
    /// Original-scale gaps `[k][t]`.
    pub gaps: Vec<Vec<f64>>,
    /// Gaps multiplied by the sign and divided by the treated pre SD.
    pub standardized: Vec<Vec<f64>>,
    /// Intercept-shifted counterfactual `[k][t]`.
    pub counterfactual: Vec<Vec<f64>>,
    pub post_mean: Vec<f64>,
    /// Across-period sample SD of post gaps (`None` with one post period).
    pub post_sd: Vec<Option<f64>>,
    pub standardized_post_mean: Vec<f64>,
}

impl EffectSeries {
    pub fn n_post(&self) -> usize {
        self.periods.len() - self.t0
    }

    pub fn post_gaps(&self, k: usize) -> &[f64] {
        &self.gaps[k][self.t0..]
    }
}

/// Intercept-shifted synthetic control from raw donor outcomes:
/// `Ŷ = Ȳ₁^pre + (Y^syn − Ȳ^syn,pre)`.
pub fn predict_counterfactual(fit: &FitResult, panel: &Panel) -> Result<EffectSeries> {
    let d = &fit.design;
    if d.horizon > panel.n_times()
        || d.treated >= panel.n_units()
        || d.donors.iter().any(|&j| j >= panel.n_units())
        || panel.n_outcomes() != fit.outcomes.len()
    {
        return Err(Error::shape("fit design does not match panel dimensions"));
    }
    let labels_match = d.donors.iter().zip(&fit.donors).all(|(&j, l)| &panel.units()[j] == l)
        && panel.outcomes().iter().zip(&fit.outcomes).all(|(o, n)| &o.name == n);
    if !labels_match {
        return Err(Error::shape("fit donors or outcomes do not match panel labels"));
    }
    let (t0, h) = (d.fit_len, d.horizon);
    let k_n = panel.n_outcomes();
    let mut gaps = Vec::with_capacity(k_n);
    let mut standardized = Vec::with_capacity(k_n);
    let mut counterfactual = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let w = &fit.weights.for_outcome(k).weights;
        let syn: Vec<f64> = (0..h)
            .map(|t| d.donors.iter().zip(w).map(|(&j, wj)| wj * panel.value(j, t, k)).sum())
            .collect();
        let treated: Vec<f64> = (0..h).map(|t| panel.value(d.treated, t, k)).collect();
        let syn_pre = stats::mean(&syn[..t0]);
        let tr_pre = stats::mean(&treated[..t0]);
        let cf: Vec<f64> = syn.iter().map(|s| tr_pre + (s - syn_pre)).collect();
        let g: Vec<f64> = treated.iter().zip(&cf).map(|(y, c)| y - c).collect();
        standardized.push(g.iter().map(|&x| fit.params.standardize_gap(k, x)).collect::<Vec<_>>());
        gaps.push(g);
        counterfactual.push(cf);
    }
    let post_mean = gaps.iter().map(|g| stats::mean(&g[t0..])).collect();
    let post_sd = gaps
        .iter()
        .map(|g| (h - t0 >= 2).then(|| stats::sd(&g[t0..], 1)))
        .collect();
    let standardized_post_mean = standardized.iter().map(|g: &Vec<f64>| stats::mean(&g[t0..])).collect();
    Ok(EffectSeries {
        outcomes: fit.outcomes.clone(),
        periods: panel.times()[..h].to_vec(),
        t0,
        gaps,
        standardized,
        counterfactual,
        post_mean,
        post_sd,
        standardized_post_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSubset {
    AllPost,
    ExcludeFirstPost,
    FirstPostOnly,
    /// Same periods as `ExcludeFirstPost`; kept as its own label for the
    /// first-post / later-post split.
    LaterPost,
}

impl EffectSubset {
    pub const ALL: [EffectSubset; 4] = [
        EffectSubset::AllPost,
        EffectSubset::ExcludeFirstPost,
        EffectSubset::FirstPostOnly,
        EffectSubset::LaterPost,
    ];

    fn range(self, n_post: usize) -> std::ops::Range<usize> {
        match self {
            EffectSubset::AllPost => 0..n_post,
            EffectSubset::ExcludeFirstPost | EffectSubset::LaterPost => 1..n_post,
            EffectSubset::FirstPostOnly => 0..n_post.min(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectRow {
    pub outcome: String,
    pub subset: EffectSubset,
    pub n_periods: usize,
    pub mean: f64,
    pub standardized_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    /// Across-period sample SD over all post periods, per outcome.
    pub post_sd: Vec<Option<f64>>,
    pub notices: Vec<String>,
}

/// Per-outcome post means over each requested subset of post periods.
pub fn effect_table(effects: &EffectSeries, subsets: &[EffectSubset]) -> Result<EffectTable> {
    let n_post = effects.n_post();
    if n_post == 0 {
        return Err(Error::invalid("effect table needs at least one post period"));
    }
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for &s in subsets {
        let r = s.range(n_post);
        if r.is_empty() {
            notices.push(format!("subset {s:?} is empty with {n_post} post period(s); omitted"));
            continue;
        }
        for (k, name) in effects.outcomes.iter().enumerate() {
            let g = &effects.gaps[k][effects.t0..];
            let z = &effects.standardized[k][effects.t0..];
            rows.push(EffectRow {
                outcome: name.clone(),
                subset: s,
                n_periods: r.len(),
                mean: stats::mean(&g[r.clone()]),
                standardized_mean: stats::mean(&z[r.clone()]),
            });
        }
    }
    Ok(EffectTable {
        rows,
        post_sd: effects.post_sd.clone(),
        notices,
    })
}

/// Share-gap × post-period sector total (e.g. $M per quarter).
pub fn dollarize_share_effect(share_gap_mean: f64, post_sector_total: f64) -> Result<f64> {
    if !(post_sector_total >= 0.0) {
        return Err(Error::invalid("sector total must be non-negative"));
    }
    Ok(share_gap_mean * post_sector_total)
}
