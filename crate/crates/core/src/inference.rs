//! Joint-K conformal test on the first post period and permutation tests
//! over donor and in-time placebos.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, EffectSeries, EstimatorSpec, NuChoice};
use crate::optimize::SolveOptions;
use crate::panel::Panel;
use crate::preprocess::{fit_transform_design, Design, SdKind};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformalObjective {
    Average,
    Concatenated,
}

impl ConformalObjective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "concatenated" => Ok(Self::Concatenated),
            other => Err(Error::invalid(format!(
                "conformal objective `{other}` not supported (use average or concatenated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformalResult {
    pub statistic_post: f64,
    /// Scores at the `T0` pre periods under the re-estimated weights.
    pub reference_scores: Vec<f64>,
    pub rank: usize,
    pub p_exact: f64,
    pub p_mid: f64,
    pub objective_used: ConformalObjective,
    /// Smallest attainable p-value, `1/(T0+1)`.
    pub grid_min: f64,
    pub weights: Vec<f64>,
}

/// Upper-tail rank with the +1 correction: `(1 + #{ref ≥ obs}, mid-p)` over
/// `n_ref + 1` values.
pub fn upper_tail_rank(observed: f64, reference: &[f64]) -> (usize, f64, f64) {
    let ge = reference.iter().filter(|&&r| r >= observed).count();
    let eq = reference.iter().filter(|&&r| r == observed).count();
    let n = (reference.len() + 1) as f64;
    let rank = 1 + ge;
    let mid = ((ge - eq) as f64 + 0.5 * (eq + 1) as f64) / n;
    (rank, rank as f64 / n, mid)
}

/// Joint conformal test of `H0: τ = tau0` at the first post period.
///
/// The null-adjusted first post period is appended to the fitting window,
/// weights are re-estimated with the chosen objective, and the post score
/// `Σ_k |r_k| / √K` is ranked among the `T0` pre-period scores.
pub fn conformal_joint(panel: &Panel, objective: ConformalObjective, tau0: &[f64]) -> Result<ConformalResult> {
    conformal_joint_with(panel, objective, tau0, SdKind::default(), &SolveOptions::default())
}

pub fn conformal_joint_with(
    panel: &Panel,
    objective: ConformalObjective,
    tau0: &[f64],
    sd: SdKind,
    opts: &SolveOptions,
) -> Result<ConformalResult> {
    let (t0, kk) = (panel.t0(), panel.n_outcomes());
    if panel.n_post() == 0 {
        return Err(Error::invalid("conformal test needs at least one post period"));
    }
    if t0 < 2 {
        return Err(Error::invalid("conformal test needs at least two pre periods"));
    }
    if tau0.len() != kk {
        return Err(Error::shape(format!("tau0 has length {}, expected {kk}", tau0.len())));
    }
    let adjusted = panel.map_values(|i, t, k, v| if i == 0 && t == t0 { v - tau0[k] } else { v });
    let design = Design {
        treated: 0,
        donors: (1..panel.n_units()).collect(),
        fit_len: t0 + 1,
        horizon: t0 + 1,
    };
    let pp = fit_transform_design(&adjusted, &design, sd)?;
    let fit = match objective {
        ConformalObjective::Average => estimators::fit_average_with(&pp, opts)?,
        ConformalObjective::Concatenated => estimators::fit_concatenated_with(&pp, opts)?,
    };
    let w = fit.weights.for_outcome(0).weights.clone();
    let res: Vec<Vec<f64>> = (0..kk).map(|k| pp.residuals(k, &w)).collect();
    let scale = (kk as f64).sqrt();
    let scores: Vec<f64> = (0..=t0).map(|t| res.iter().map(|r| r[t].abs()).sum::<f64>() / scale).collect();
    let post = scores[t0];
    let reference = scores[..t0].to_vec();
    let (rank, p_exact, p_mid) = upper_tail_rank(post, &reference);
    Ok(ConformalResult {
        statistic_post: post,
        reference_scores: reference,
        rank,
        p_exact,
        p_mid,
        objective_used: objective,
        grid_min: 1.0 / (t0 + 1) as f64,
        weights: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    RmspeRatio,
    MedianFirstPost,
}

/// Post/pre RMSPE ratio of gaps scaled by `pre_sd[k]`.
///
/// `gaps[k][t]` spans the pre window `0..t0` followed by post periods; the
/// post window starts at `t0` (or `t0 + 1` with `skip_first_post`) and
/// covers `h` periods.
pub fn rmspe_ratio_stat(gaps: &[Vec<f64>], pre_sd: &[f64], t0: usize, h: usize, skip_first_post: bool) -> Result<f64> {
    if gaps.is_empty() || gaps.len() != pre_sd.len() {
        return Err(Error::shape("gaps and pre SDs must cover the same outcomes"));
    }
    let start = t0 + usize::from(skip_first_post);
    if h == 0 || gaps.iter().any(|g| g.len() < start + h) {
        return Err(Error::invalid(format!("fewer than H = {h} usable post periods")));
    }
    let mut pre = Vec::with_capacity(gaps.len() * t0);
    let mut post = Vec::with_capacity(gaps.len() * h);
    for (g, s) in gaps.iter().zip(pre_sd) {
        pre.extend(g[..t0].iter().map(|x| x / s));
        post.extend(g[start..start + h].iter().map(|x| x / s));
    }
    let pre_rms = stats::rms(&pre);
    if !(pre_rms > 0.0) {
        return Err(Error::Numerical("zero pre-period RMSPE; ratio undefined".into()));
    }
    Ok(stats::rms(&post) / pre_rms)
}

/// Median over outcomes of `|gap_k| / pre_sd[k]`.
pub fn median_first_post_stat(gaps_first_post: &[f64], pre_sd: &[f64]) -> f64 {
    let z: Vec<f64> = gaps_first_post.iter().zip(pre_sd).map(|(g, s)| g.abs() / s).collect();
    stats::median(&z)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InTimePlacebo {
    pub label: String,
    /// Number of pseudo-pre periods.
    pub pseudo_t0: usize,
    /// Pseudo-post periods available inside the true pre window.
    pub pseudo_post: usize,
}

/// `n` consecutive pseudo-cutoffs inside the pre window, the earliest leaving
/// exactly `min_pre` pseudo-pre periods.
pub fn build_in_time_placebos(panel: &Panel, n: usize, min_pre: usize) -> Result<Vec<InTimePlacebo>> {
    let t0 = panel.t0();
    if min_pre == 0 || t0 < min_pre + 1 {
        return Err(Error::Infeasible(format!(
            "in-time placebos need T0 >= min_pre + 1 (T0 = {t0}, min_pre = {min_pre})"
        )));
    }
    let max_n = t0 - min_pre;
    if n > max_n {
        return Err(Error::Infeasible(format!(
            "{n} in-time placebos requested; at most {max_n} fit with T0 = {t0} and min_pre = {min_pre}"
        )));
    }
    Ok((min_pre..min_pre + n)
        .map(|p| InTimePlacebo {
            label: format!("in_time@{}", panel.times()[p]),
            pseudo_t0: p,
            pseudo_post: t0 - p,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationConfig {
    pub estimator: EstimatorSpec,
    pub statistic: Statistic,
    /// Post periods in the RMSPE ratio.
    pub h: usize,
    /// Drop the (partially exposed) first post period from the RMSPE ratio.
    pub skip_first_post: bool,
    pub n_in_time: usize,
    pub min_pre: usize,
    pub sd: SdKind,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            estimator: EstimatorSpec::Average,
            statistic: Statistic::RmspeRatio,
            h: 5,
            skip_first_post: true,
            n_in_time: 0,
            min_pre: 8,
            sd: SdKind::Population,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceboKind {
    Donor,
    InTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboStat {
    pub label: String,
    pub kind: PlaceboKind,
    pub stat: f64,
    /// Post periods used by the RMSPE ratio; `None` for the median statistic.
    pub h_used: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedPlacebo {
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationResult {
    pub statistic: Statistic,
    /// `None` when the statistic ignores H.
    pub h: Option<usize>,
    pub treated_stat: f64,
    pub placebo_stats: Vec<PlaceboStat>,
    pub dropped: Vec<DroppedPlacebo>,
    pub rank: usize,
    pub p: f64,
    pub p_mid: f64,
    pub p_two_sided: f64,
    pub n_placebo: usize,
    /// Smallest attainable p-value, `1/(n_placebo+1)`.
    pub grid_min: f64,
}

fn statistic_for(effects: &EffectSeries, pre_sd: &[f64], cfg: &PermutationConfig, in_time: bool) -> Result<(f64, Option<usize>)> {
    let t0 = effects.t0;
    match cfg.statistic {
        Statistic::RmspeRatio => {
            let (h, skip) = if in_time {
                (cfg.h.min(effects.n_post()), false)
            } else {
                (cfg.h, cfg.skip_first_post)
            };
            Ok((rmspe_ratio_stat(&effects.gaps, pre_sd, t0, h, skip)?, Some(h)))
        }
        Statistic::MedianFirstPost => {
            let first: Vec<f64> = effects.gaps.iter().map(|g| g[t0]).collect();
            Ok((median_first_post_stat(&first, pre_sd), None))
        }
    }
}

fn design_stat(panel: &Panel, design: &Design, cfg: &PermutationConfig, in_time: bool) -> Result<(f64, Option<usize>)> {
    let pp = fit_transform_design(panel, design, cfg.sd)?;
    let fit = estimators::fit(&pp, &cfg.estimator, &SolveOptions::default())?;
    let eff = estimators::predict_counterfactual(&fit, panel)?;
    statistic_for(&eff, &fit.params.treated_pre_sd, cfg, in_time)
}

/// Exhaustive placebo test: every donor as pseudo-treated against the other
/// donors, plus `n_in_time` pseudo-cutoffs on the treated unit.
pub fn permutation_test(panel: &Panel, cfg: &PermutationConfig) -> Result<PermutationResult> {
    let n0 = panel.n_donors();
    if n0 < 2 {
        return Err(Error::invalid("donor placebos need at least two donors"));
    }
    if let EstimatorSpec::Combined(NuChoice::Fixed(nu)) = cfg.estimator {
        if !(0.0..=1.0).contains(&nu) {
            return Err(Error::invalid("nu must lie in [0, 1]"));
        }
    }
    let (treated_stat, h_used) = design_stat(panel, &Design::standard(panel), cfg, false)?;
    let in_time = build_in_time_placebos(panel, cfg.n_in_time, cfg.min_pre)
        .or_else(|e| if cfg.n_in_time == 0 { Ok(Vec::new()) } else { Err(e) })?;

    let mut jobs: Vec<(String, PlaceboKind, Design)> = (1..=n0)
        .map(|j| {
            let donors = (1..=n0).filter(|&d| d != j).collect();
            let design = Design { treated: j, donors, fit_len: panel.t0(), horizon: panel.n_times() };
            (panel.units()[j].clone(), PlaceboKind::Donor, design)
        })
        .collect();
    jobs.extend(in_time.iter().map(|p| {
        let design = Design {
            treated: 0,
            donors: (1..=n0).collect(),
            fit_len: p.pseudo_t0,
            horizon: panel.t0(),
        };
        (p.label.clone(), PlaceboKind::InTime, design)
    }));

    let outcomes: Vec<Result<(f64, Option<usize>)>> = jobs
        .par_iter()
        .map(|(_, kind, design)| design_stat(panel, design, cfg, *kind == PlaceboKind::InTime))
        .collect();

    let mut placebo_stats = Vec::new();
    let mut dropped = Vec::new();
    for ((label, kind, _), out) in jobs.into_iter().zip(outcomes) {
        match out {
            Ok((stat, h)) if stat.is_finite() => placebo_stats.push(PlaceboStat { label, kind, stat, h_used: h }),
            Ok((stat, _)) => dropped.push(DroppedPlacebo { label, reason: format!("non-finite statistic {stat}") }),
            Err(e) => dropped.push(DroppedPlacebo { label, reason: e.to_string() }),
        }
    }
    let reference: Vec<f64> = placebo_stats.iter().map(|p| p.stat).collect();
    let (rank, p, p_mid) = upper_tail_rank(treated_stat, &reference);
    let n_placebo = reference.len();
    Ok(PermutationResult {
        statistic: cfg.statistic,
        h: h_used,
        treated_stat,
        placebo_stats,
        dropped,
        rank,
        p,
        p_mid,
        p_two_sided: (2.0 * p.min(1.0 - p)).min(1.0),
        n_placebo,
        grid_min: 1.0 / (n_placebo + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate, inject_effect, FactorModelSpec};

    #[test]
    fn rank_conventions() {
        assert_eq!(upper_tail_rank(5.0, &[1.0, 2.0, 3.0]), (1, 0.25, 0.125));
        assert_eq!(upper_tail_rank(0.0, &[1.0, 2.0, 3.0]).1, 1.0);
        let (r, p, mid) = upper_tail_rank(2.0, &[1.0, 2.0, 3.0]);
        assert_eq!((r, p), (3, 0.75));
        assert!((mid - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rmspe_ratio_examples() {
        let pre = vec![1.0, -2.0, 0.5];
        let g: Vec<f64> = pre.iter().chain(pre.iter()).copied().collect();
        assert!((rmspe_ratio_stat(&[g], &[1.0], 3, 3, false).unwrap() - 1.0).abs() < 1e-12);
        let g2: Vec<f64> = pre.iter().chain(pre.iter().map(|x| x * 2.0).collect::<Vec<_>>().iter()).copied().collect();
        assert!((rmspe_ratio_stat(&[g2.clone(), g2], &[3.0, 0.5], 3, 3, false).unwrap() - 2.0).abs() < 1e-12);
        // Hand oracle: one outcome, sd 2, pre [1,1], post [9(skipped), 3, 4].
        let r = rmspe_ratio_stat(&[vec![1.0, 1.0, 9.0, 3.0, 4.0]], &[2.0], 2, 2, true).unwrap();
        let want = ((1.5f64.powi(2) + 2.0f64.powi(2)) / 2.0).sqrt() / 0.5;
        assert!((r - want).abs() < 1e-12);
        assert!(rmspe_ratio_stat(&[vec![0.0, 0.0, 1.0]], &[1.0], 2, 1, false).is_err());
        assert!(rmspe_ratio_stat(&[vec![1.0, 0.0, 1.0]], &[1.0], 2, 2, false).is_err());
    }

    #[test]
    fn median_stat_examples() {
        assert_eq!(median_first_post_stat(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(median_first_post_stat(&[2.0, -10.0, 18.0], &[2.0, 2.0, 2.0]), 5.0);
        assert_eq!(median_first_post_stat(&[1.0, 2.0, 3.0, -10.0], &[1.0; 4]), 2.5);
    }

    fn fixture(t0: usize, n_units: usize) -> Panel {
        let spec = FactorModelSpec {
            n_units,
            t_periods: t0 + 6,
            t0,
            k_outcomes: 3,
            rank: 2,
            noise_sd: 0.3,
            seed: 11,
            ..Default::default()
        };
        generate(&spec).unwrap().0
    }

    #[test]
    fn in_time_placebo_construction() {
        let p = fixture(19, 7);
        let v = build_in_time_placebos(&p, 7, 8).unwrap();
        assert_eq!(v.iter().map(|x| x.pseudo_t0).collect::<Vec<_>>(), (8..15).collect::<Vec<_>>());
        assert!(v.iter().all(|x| x.pseudo_t0 >= 8 && x.pseudo_post >= 1));
        assert!(build_in_time_placebos(&p, 0, 8).unwrap().is_empty());
        assert!(build_in_time_placebos(&p, 1, 19).is_err());
        let err = build_in_time_placebos(&p, 12, 8).unwrap_err().to_string();
        assert!(err.contains("at most 11"), "{err}");
    }

    #[test]
    fn conformal_grid_and_extreme_effect() {
        let p = fixture(19, 7);
        let r = conformal_joint(&p, ConformalObjective::Average, &[0.0; 3]).unwrap();
        assert_eq!(r.reference_scores.len(), 19);
        assert!((r.grid_min - 0.05).abs() < 1e-15);
        assert!((r.p_exact * 20.0 - (r.p_exact * 20.0).round()).abs() < 1e-12);
        assert!(r.p_mid <= r.p_exact);

        let sd: Vec<f64> = (0..3).map(|k| stats::sd(&p.series(0, k)[..19], 0)).collect();
        let tau: Vec<Vec<f64>> = (0..6).map(|_| sd.iter().map(|s| 10.0 * s).collect()).collect();
        let q = inject_effect(&p, &tau).unwrap();
        for obj in [ConformalObjective::Average, ConformalObjective::Concatenated] {
            let r = conformal_joint(&q, obj, &[0.0; 3]).unwrap();
            assert_eq!(r.rank, 1);
            assert!((r.p_exact - 0.05).abs() < 1e-15);
        }
        assert!(ConformalObjective::parse("separate").is_err());
    }

    #[test]
    fn conformal_score_monotone_rescaling_invariance() {
        let p = fixture(12, 6);
        let r = conformal_joint(&p, ConformalObjective::Average, &[0.0; 3]).unwrap();
        let f = |x: f64| (3.0 * x).exp();
        let scaled: Vec<f64> = r.reference_scores.iter().map(|&x| f(x)).collect();
        let (rank, _, _) = upper_tail_rank(f(r.statistic_post), &scaled);
        assert_eq!(rank, r.rank);
    }

    #[test]
    fn permutation_grid_six_donors_seven_in_time() {
        let p = fixture(19, 7);
        let cfg = PermutationConfig { n_in_time: 7, ..Default::default() };
        let r = permutation_test(&p, &cfg).unwrap();
        assert_eq!(r.n_placebo, 13);
        assert!((r.grid_min - 1.0 / 14.0).abs() < 1e-15);
        assert_eq!(r.placebo_stats.iter().filter(|s| s.kind == PlaceboKind::InTime).count(), 7);

        let sd: Vec<f64> = (0..3).map(|k| stats::sd(&p.series(0, k)[..19], 0)).collect();
        let tau: Vec<Vec<f64>> = (0..6).map(|_| sd.iter().map(|s| 10.0 * s).collect()).collect();
        let q = inject_effect(&p, &tau).unwrap();
        let r = permutation_test(&q, &cfg).unwrap();
        assert_eq!(r.rank, 1);
        assert!((r.p - 1.0 / 14.0).abs() < 1e-15);

        let med = permutation_test(&q, &PermutationConfig { statistic: Statistic::MedianFirstPost, ..cfg }).unwrap();
        assert_eq!(med.h, None);
    }

    #[test]
    fn permutation_invariant_to_donor_relabeling() {
        let p = fixture(12, 6);
        let cfg = PermutationConfig { h: 3, n_in_time: 2, min_pre: 6, ..Default::default() };
        let a = permutation_test(&p, &cfg).unwrap();
        let order: Vec<usize> = vec![0, 5, 3, 1, 4, 2];
        let units: Vec<String> = order.iter().map(|&i| p.units()[i].clone()).collect();
        let mut values = Vec::new();
        for &i in &order {
            for t in 0..p.n_times() {
                for k in 0..p.n_outcomes() {
                    values.push(p.value(i, t, k));
                }
            }
        }
        let q = Panel::new(units, p.times().to_vec(), p.outcomes().to_vec(), values, p.treated_label(), p.t0()).unwrap();
        let b = permutation_test(&q, &cfg).unwrap();
        assert_eq!(a.rank, b.rank);
        assert!((a.treated_stat - b.treated_stat).abs() < 1e-9);
    }
}
