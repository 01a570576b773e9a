//! Pre-treatment diagnostics: shared low-rank structure, conditioning,
//! residual dependence across outcomes, leave-one-out and blocked
//! cross-validation robustness, and weight concentration.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorKind, EstimatorSpec, FitResult, FitWeights, NuChoice};
use crate::optimize::{self, SimplexQP, SolveOptions, WeightVector};
use crate::preprocess::PreprocessedPanel;
use crate::stats;

fn sorted_singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = x.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical-rank tolerance: the standard `max(dim)·ε·σ_max`, floored at a
/// relative `1e-6·σ_max` so that tiny measurement noise does not count as
/// extra structure.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    (rows.max(cols) as f64 * f64::EPSILON * sigma_max).max(1e-6 * sigma_max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeReport {
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub cumulative_variance: Vec<f64>,
    /// Components needed to reach 95% of the variance.
    pub r95: usize,
    pub tolerance: f64,
}

/// SVD of the column-centered `T0·K × N0` pre-period donor stack.
pub fn scree(pp: &PreprocessedPanel) -> Result<ScreeReport> {
    let (mut x, _) = pp.concatenated_design();
    if x.is_empty() {
        return Err(Error::invalid("scree needs a non-empty donor stack"));
    }
    for mut c in x.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let s = sorted_singular_values(&x);
    let total: f64 = s.iter().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Ok(ScreeReport {
            cumulative_variance: vec![0.0; s.len()],
            singular_values: s,
            effective_rank: 0,
            r95: 0,
            tolerance: 0.0,
        });
    }
    let tol = rank_tolerance(x.nrows(), x.ncols(), s[0]);
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = s
        .iter()
        .map(|v| {
            acc += v * v;
            acc / total
        })
        .collect();
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let r95 = cumulative.iter().position(|&c| c >= 0.95).map_or(s.len(), |i| i + 1);
    Ok(ScreeReport {
        effective_rank: s.iter().filter(|&&v| v > tol).count(),
        singular_values: s,
        cumulative_variance: cumulative,
        r95,
        tolerance: tol,
    })
}

fn kappa(x: &DMatrix<f64>) -> f64 {
    let s = sorted_singular_values(x);
    let (hi, lo) = (s[0], *s.last().unwrap());
    if lo <= x.nrows().max(x.ncols()) as f64 * f64::EPSILON * hi {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub kappa_avg: f64,
    pub kappa_per_outcome: Vec<f64>,
    /// `κ(averaged) / median κ(per outcome)`; absent when any κ is infinite.
    pub ratio: Option<f64>,
    pub notices: Vec<String>,
}

/// Condition number of the averaged design against the per-outcome designs.
pub fn condition_ratio(pp: &PreprocessedPanel) -> Result<ConditionReport> {
    if pp.n_donors() < 2 {
        return Err(Error::invalid("condition numbers need at least two donors"));
    }
    let kappa_avg = kappa(&pp.averaged_design().0);
    let per: Vec<f64> = (0..pp.n_outcomes()).map(|k| kappa(&pp.outcome_design(k).0)).collect();
    let mut notices = Vec::new();
    let ratio = if kappa_avg.is_finite() && per.iter().all(|k| k.is_finite()) {
        Some(kappa_avg / stats::median(&per))
    } else {
        notices.push("singular design (sigma_min = 0); ratio omitted".to_string());
        None
    };
    Ok(ConditionReport { kappa_avg, kappa_per_outcome: per, ratio, notices })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualCorrelation {
    pub outcomes: Vec<String>,
    /// `None` marks pairs involving a zero-variance residual series.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub mean_abs: f64,
    pub median_abs: f64,
    pub min: f64,
    pub max: f64,
}

/// Pearson correlations of the pre-period (sign-aligned, standardized)
/// residual series between outcome pairs.
pub fn residual_correlations(fit: &FitResult, pp: &PreprocessedPanel) -> Result<ResidualCorrelation> {
    let t0 = pp.t0();
    if t0 < 3 {
        return Err(Error::invalid("residual correlations need T0 >= 3"));
    }
    let kk = pp.n_outcomes();
    let res: Vec<Vec<f64>> = (0..kk)
        .map(|k| {
            let mut r = pp.residuals(k, &fit.weights.for_outcome(k).weights);
            r.truncate(t0);
            r
        })
        .collect();
    let defined: Vec<bool> = res.iter().map(|r| stats::sd(r, 0) > 0.0).collect();
    let mut matrix = vec![vec![None; kk]; kk];
    let mut off = Vec::new();
    for a in 0..kk {
        for b in 0..kk {
            if !(defined[a] && defined[b]) {
                continue;
            }
            matrix[a][b] = if a == b {
                Some(1.0)
            } else if b < a {
                matrix[b][a]
            } else {
                stats::pearson(&res[a], &res[b])
            };
            if b > a {
                if let Some(c) = matrix[a][b] {
                    off.push(c);
                }
            }
        }
    }
    let abs: Vec<f64> = off.iter().map(|c| c.abs()).collect();
    Ok(ResidualCorrelation {
        outcomes: pp.outcomes().to_vec(),
        matrix,
        mean_abs: stats::mean(&abs),
        median_abs: stats::median(&abs),
        min: off.iter().copied().fold(f64::NAN, f64::min),
        max: off.iter().copied().fold(f64::NAN, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoooRow {
    pub excluded: String,
    /// Mean per-outcome RMSPE across all K outcomes at the refit weights.
    pub mean_rmspe: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoooReport {
    pub baseline: f64,
    pub rows: Vec<LoooRow>,
    pub mean_across_exclusions: f64,
}

/// Refits on K−1 outcomes and evaluates every outcome at the refit weights.
pub fn leave_one_outcome_out(pp: &PreprocessedPanel, spec: &EstimatorSpec) -> Result<LoooReport> {
    let kk = pp.n_outcomes();
    if kk < 2 {
        return Err(Error::invalid("leave-one-outcome-out needs K >= 2"));
    }
    if matches!(spec, EstimatorSpec::Separate) {
        return Err(Error::invalid("leave-one-outcome-out needs a common-weight estimator"));
    }
    let opts = SolveOptions::default();
    let baseline = estimators::fit(pp, spec, &opts)?.mean_rmspe;
    let rows: Vec<LoooRow> = (0..kk)
        .map(|drop| {
            let keep: Vec<usize> = (0..kk).filter(|&k| k != drop).collect();
            let refit = pp.select_outcomes(&keep).and_then(|sub| estimators::fit(&sub, spec, &opts));
            let excluded = pp.outcomes()[drop].clone();
            match refit {
                Ok(f) => {
                    let w = &f.weights.for_outcome(0).weights;
                    LoooRow {
                        excluded,
                        mean_rmspe: Some(stats::mean(&estimators::per_outcome_rmspe(pp, w))),
                        error: None,
                    }
                }
                Err(e) => LoooRow { excluded, mean_rmspe: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let ok: Vec<f64> = rows.iter().filter_map(|r| r.mean_rmspe).collect();
    Ok(LoooReport { baseline, mean_across_exclusions: stats::mean(&ok), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LodoRow {
    pub excluded: String,
    pub baseline_weight: f64,
    pub mean_rmspe: f64,
    pub pct_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LodoReport {
    pub baseline: f64,
    pub rows: Vec<LodoRow>,
}

/// Refits without each donor in turn.
pub fn leave_one_donor_out(pp: &PreprocessedPanel, spec: &EstimatorSpec) -> Result<LodoReport> {
    let n0 = pp.n_donors();
    if n0 < 2 {
        return Err(Error::invalid("leave-one-donor-out needs at least two donors"));
    }
    let opts = SolveOptions::default();
    let base = estimators::fit(pp, spec, &opts)?;
    let baseline = base.mean_rmspe;
    let rows = (0..n0)
        .map(|drop| {
            let keep: Vec<usize> = (0..n0).filter(|&j| j != drop).collect();
            let f = estimators::fit(&pp.select_donors(&keep)?, spec, &opts)?;
            let bw = stats::mean(&(0..pp.n_outcomes()).map(|k| base.weights.for_outcome(k).weights[drop]).collect::<Vec<_>>());
            Ok(LodoRow {
                excluded: pp.donor_labels()[drop].clone(),
                baseline_weight: bw,
                mean_rmspe: f.mean_rmspe,
                pct_change: if baseline > 0.0 { 100.0 * (f.mean_rmspe - baseline) / baseline } else { 0.0 },
            })
        })
        .collect::<Result<_>>()?;
    Ok(LodoReport { baseline, rows })
}

/// `folds` contiguous blocks covering `0..t0`; the first `t0 % folds` blocks
/// hold one extra period.
pub fn block_partition(t0: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    if folds < 2 || folds > t0 {
        return Err(Error::invalid(format!("folds = {folds} must lie in [2, T0 = {t0}]")));
    }
    let (base, extra) = (t0 / folds, t0 % folds);
    let mut start = 0;
    Ok((0..folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Per-outcome `(y, X)` over `rows`, each series re-centered on `rows`.
fn centered_rows(pp: &PreprocessedPanel, rows: &[usize], center_on: &[usize]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let n0 = pp.n_donors();
    (0..pp.n_outcomes())
        .map(|k| {
            let y = pp.treated(k);
            let d = pp.donors(k);
            let ym = center_on.iter().map(|&t| y[t]).sum::<f64>() / center_on.len() as f64;
            let xm: Vec<f64> = (0..n0).map(|j| center_on.iter().map(|&t| d[(t, j)]).sum::<f64>() / center_on.len() as f64).collect();
            let x = DMatrix::from_fn(rows.len(), n0, |r, j| d[(rows[r], j)] - xm[j]);
            let yv = DVector::from_iterator(rows.len(), rows.iter().map(|&t| y[t] - ym));
            (x, yv)
        })
        .collect()
}

fn stack_average(blocks: &[(DMatrix<f64>, DVector<f64>)]) -> (DMatrix<f64>, DVector<f64>) {
    let kf = blocks.len() as f64;
    let mut x = blocks[0].0.clone() * 0.0;
    let mut y = blocks[0].1.clone() * 0.0;
    for (bx, by) in blocks {
        x += bx;
        y += by;
    }
    (x / kf, y / kf)
}

fn stack_concat(blocks: &[(DMatrix<f64>, DVector<f64>)]) -> (DMatrix<f64>, DVector<f64>) {
    let (r, c) = blocks[0].0.shape();
    let mut x = DMatrix::zeros(r * blocks.len(), c);
    let mut y = DVector::zeros(r * blocks.len());
    for (k, (bx, by)) in blocks.iter().enumerate() {
        x.rows_mut(k * r, r).copy_from(bx);
        y.rows_mut(k * r, r).copy_from(by);
    }
    (x, y)
}

/// Fits weights per outcome on the given row blocks.
fn fit_blocks(blocks: &[(DMatrix<f64>, DVector<f64>)], spec: &EstimatorSpec, opts: &SolveOptions) -> Result<Vec<Vec<f64>>> {
    let kk = blocks.len();
    let common = |w: WeightVector| vec![w.weights; kk];
    match spec {
        EstimatorSpec::Separate => blocks
            .iter()
            .map(|(x, y)| Ok(optimize::solve_qp_simplex(&SimplexQP::new(x.clone(), y.clone(), 0.0)?, opts).weights))
            .collect(),
        EstimatorSpec::Average => {
            let (x, y) = stack_average(blocks);
            Ok(common(optimize::solve_qp_simplex(&SimplexQP::new(x, y, 0.0)?, opts)))
        }
        EstimatorSpec::Concatenated => {
            let (x, y) = stack_concat(blocks);
            Ok(common(optimize::solve_qp_simplex(&SimplexQP::new(x, y, 0.0)?, opts)))
        }
        EstimatorSpec::Combined(choice) => {
            let (xa, ya) = stack_average(blocks);
            let (xc, yc) = stack_concat(blocks);
            let avg = SimplexQP::new(xa, ya, 0.0)?;
            let cat = SimplexQP::new(xc, yc, 0.0)?;
            let nu = match choice {
                NuChoice::Fixed(v) => *v,
                NuChoice::Auto => {
                    let wc = optimize::solve_qp_simplex(&cat, opts).weights;
                    let qa = avg.rmse(&wc);
                    if qa > 0.0 { (cat.rmse(&wc) / qa).min(1.0) } else { 1.0 }
                }
            };
            Ok(common(optimize::solve_combined(&avg, &cat, nu, opts)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvFold {
    pub fold: usize,
    /// Held-out pre periods, `start..end`.
    pub start: usize,
    pub end: usize,
    pub heldout_rmspe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<CvFold>,
    pub mean_heldout_rmspe: f64,
}

/// Blocked K-fold CV over the pre period. Each fold re-centers every series
/// on its training rows, fits there, and reports the mean per-outcome RMSPE
/// on the held block.
pub fn blocked_cv(pp: &PreprocessedPanel, folds: usize, spec: &EstimatorSpec) -> Result<CvReport> {
    let t0 = pp.t0();
    let blocks = block_partition(t0, folds)?;
    let opts = SolveOptions::default();
    let out = blocks
        .iter()
        .enumerate()
        .map(|(f, held)| {
            let train: Vec<usize> = (0..t0).filter(|t| !held.contains(t)).collect();
            let test: Vec<usize> = held.clone().collect();
            let w = fit_blocks(&centered_rows(pp, &train, &train), spec, &opts)?;
            let per: Vec<f64> = centered_rows(pp, &test, &train)
                .iter()
                .zip(&w)
                .map(|((x, y), wk)| {
                    let r = y - x * DVector::from_column_slice(wk);
                    stats::rms(r.as_slice())
                })
                .collect();
            Ok(CvFold { fold: f, start: held.start, end: held.end, heldout_rmspe: stats::mean(&per) })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = stats::mean(&out.iter().map(|f| f.heldout_rmspe).collect::<Vec<_>>());
    Ok(CvReport { folds: out, mean_heldout_rmspe: mean })
}

/// All fit metrics at `γ_j = 1/N0`.
pub fn uniform_baseline(pp: &PreprocessedPanel) -> FitResult {
    estimators::evaluate(pp, EstimatorKind::Uniform, FitWeights::Common(WeightVector::uniform(pp.n_donors())), None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub estimator: EstimatorKind,
    /// Name of the estimator's own objective.
    pub metric: &'static str,
    pub uniform: f64,
    pub fitted: f64,
    /// `100·(uniform − fitted)/uniform`; absent when the uniform value is 0.
    pub pct: Option<f64>,
}

fn own_objective(fit: &FitResult) -> (&'static str, f64) {
    match fit.estimator {
        EstimatorKind::Average => ("q_avg", fit.q_avg),
        EstimatorKind::Concatenated => ("q_cat", fit.q_cat),
        EstimatorKind::Combined => {
            let nu = fit.nu.unwrap_or(0.5);
            ("combined", nu * fit.q_avg + (1.0 - nu) * fit.q_cat)
        }
        EstimatorKind::Separate | EstimatorKind::Uniform => ("mean_rmspe", fit.mean_rmspe),
    }
}

/// Improvement of `fitted` over the uniform baseline on the fitted
/// estimator's own objective.
pub fn improvement_over_uniform(uniform: &FitResult, fitted: &FitResult) -> Improvement {
    let (metric, f) = own_objective(fitted);
    let u = match fitted.estimator {
        EstimatorKind::Average => uniform.q_avg,
        EstimatorKind::Concatenated => uniform.q_cat,
        EstimatorKind::Combined => {
            let nu = fitted.nu.unwrap_or(0.5);
            nu * uniform.q_avg + (1.0 - nu) * uniform.q_cat
        }
        EstimatorKind::Separate | EstimatorKind::Uniform => uniform.mean_rmspe,
    };
    Improvement {
        estimator: fitted.estimator,
        metric,
        uniform: u,
        fitted: f,
        pct: (u > 0.0).then(|| 100.0 * (u - f) / u),
    }
}

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RidgeRow {
    pub lambda: f64,
    /// Unpenalized concatenated RMSPE at the penalized optimum.
    pub rmspe: f64,
    pub n_eff: f64,
    pub max_weight: f64,
    pub weights: Vec<f64>,
}

pub fn n_eff(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

/// `min_{w∈Δ} ‖y − Xw‖² + λ‖w‖²` on the concatenated design for each λ.
pub fn ridge_grid(pp: &PreprocessedPanel, lambdas: &[f64]) -> Result<Vec<RidgeRow>> {
    let (x, y) = pp.concatenated_design();
    let opts = SolveOptions::default();
    lambdas
        .iter()
        .map(|&lambda| {
            let p = SimplexQP::new(x.clone(), y.clone(), lambda)?;
            let w = optimize::solve_qp_simplex(&p, &opts).weights;
            Ok(RidgeRow {
                lambda,
                rmspe: p.rmse(&w),
                n_eff: n_eff(&w),
                max_weight: w.iter().copied().fold(0.0, f64::max),
                weights: w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub donors: Vec<String>,
    pub n_eff: f64,
    pub max_weight: f64,
    /// Singular-value-weighted squared row norms of V, normalized to sum 1.
    /// The formula is an interpretation; treat as indicative.
    pub leverage: Vec<f64>,
    /// Cosine of each donor column with the treated target; `None` when the
    /// target or column is zero.
    pub cosine: Vec<Option<f64>>,
}

/// Concentration of `weights` plus donor geometry on the concatenated design.
pub fn concentration(weights: &[f64], pp: &PreprocessedPanel) -> Result<ConcentrationReport> {
    let n0 = pp.n_donors();
    if weights.len() != n0 {
        return Err(Error::shape(format!("{} weights for {n0} donors", weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= -1e-12)) || (sum - 1.0).abs() > 1e-8 {
        return Err(Error::invalid("weights must lie on the simplex"));
    }
    let (x, y) = pp.concatenated_design();
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let mut lev: Vec<f64> = (0..n0)
        .map(|j| (0..svd.singular_values.len()).map(|r| (svd.singular_values[r] * v_t[(r, j)]).powi(2)).sum())
        .collect();
    let total: f64 = lev.iter().sum();
    if total > 0.0 {
        lev.iter_mut().for_each(|l| *l /= total);
    }
    let yn = y.norm();
    let cosine = (0..n0)
        .map(|j| {
            let c = x.column(j);
            let cn = c.norm();
            (yn > 0.0 && cn > 0.0).then(|| (c.dot(&y) / (cn * yn)).clamp(-1.0, 1.0))
        })
        .collect();
    Ok(ConcentrationReport {
        donors: pp.donor_labels().to_vec(),
        n_eff: n_eff(weights),
        max_weight: weights.iter().copied().fold(0.0, f64::max),
        leverage: lev,
        cosine,
    })
}
