//! Linear factor-model panel generator.
//!
//! `Y_itk(0) = α_ik + φ_iᵀ μ_tk + ε_itk`, with unit 0 treated. All draws are
//! standard normal unless noted. Factors may be correlated across outcomes
//! through a shared component, `μ_tk = √ρ_μ c_t + √(1 − ρ_μ) u_tk`, and noise
//! is equicorrelated across outcomes, `ε_itk = σ(√ρ_ε z_it + √(1 − ρ_ε) z_itk)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{self, FitResult};
use crate::optimize::SolveOptions;
use crate::panel::{OutcomeSpec, Panel};
use crate::preprocess::fit_transform;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorModelSpec {
    /// Treated unit plus donors.
    pub n_units: usize,
    pub t_periods: usize,
    /// Number of pre-treatment periods.
    pub t0: usize,
    pub k_outcomes: usize,
    pub rank: usize,
    pub noise_sd: f64,
    pub cross_outcome_noise_corr: f64,
    pub cross_outcome_factor_corr: f64,
    pub fixed_effect_sd: f64,
    pub treated_in_hull: bool,
    pub seed: u64,
}

impl Default for FactorModelSpec {
    fn default() -> Self {
        FactorModelSpec {
            n_units: 7,
            t_periods: 25,
            t0: 19,
            k_outcomes: 7,
            rank: 3,
            noise_sd: 0.1,
            cross_outcome_noise_corr: 0.0,
            cross_outcome_factor_corr: 0.0,
            fixed_effect_sd: 1.0,
            treated_in_hull: true,
            seed: 0,
        }
    }
}

impl FactorModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::invalid("need at least one treated and one donor unit"));
        }
        if self.k_outcomes == 0 || self.rank == 0 {
            return Err(Error::invalid("k_outcomes and rank must be positive"));
        }
        if self.t0 < 2 || self.t0 > self.t_periods {
            return Err(Error::invalid(format!(
                "t0 = {} must lie in [2, t_periods = {}]",
                self.t0, self.t_periods
            )));
        }
        if self.treated_in_hull && self.rank >= self.n_units - 1 {
            return Err(Error::invalid(format!(
                "rank {} must be below n_units - 1 = {} for an in-hull treated unit",
                self.rank,
                self.n_units - 1
            )));
        }
        if !(0.0..1.0).contains(&self.cross_outcome_noise_corr) {
            return Err(Error::invalid("cross_outcome_noise_corr must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cross_outcome_factor_corr) {
            return Err(Error::invalid("cross_outcome_factor_corr must lie in [0, 1]"));
        }
        if !(self.noise_sd >= 0.0) || !(self.fixed_effect_sd >= 0.0) {
            return Err(Error::invalid("standard deviations must be non-negative"));
        }
        Ok(())
    }

    pub fn n_donors(&self) -> usize {
        self.n_units - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    /// Convex weights reproducing the treated loading, when in the hull.
    pub oracle_weights: Option<Vec<f64>>,
    /// Effects added to treated post periods, `[post t][k]`.
    pub injected_effects: Vec<Vec<f64>>,
    /// Noise-free potential outcomes `α_ik + L_itk`, `[i][t][k]`, treated first.
    pub noiseless: Vec<Vec<Vec<f64>>>,
    pub spec: FactorModelSpec,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One draw of equicorrelated noise across `k` outcomes.
pub fn equicorrelated_noise(rng: &mut impl Rng, k: usize, sigma: f64, rho: f64) -> Vec<f64> {
    let common: f64 = rng.sample(StandardNormal);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    (0..k)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * (a * common + b * z)
        })
        .collect()
}

pub fn unit_labels(n: usize) -> Vec<String> {
    let width = (n.max(2) - 1).to_string().len();
    (0..n).map(|i| format!("unit{i:0width$}")).collect()
}

/// Uniform draw from the probability simplex.
fn dirichlet_ones(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn generate(spec: &FactorModelSpec) -> Result<(Panel, GroundTruth)> {
    generate_stream(spec, 0)
}

/// Like [`generate`], drawing from RNG stream `stream` of `spec.seed`.
pub fn generate_stream(spec: &FactorModelSpec, stream: u64) -> Result<(Panel, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (n, tt, kk, r) = (spec.n_units, spec.t_periods, spec.k_outcomes, spec.rank);
    let n0 = n - 1;

    let donor_loadings: Vec<Vec<f64>> = (0..n0).map(|_| (0..r).map(|_| normal(&mut rng)).collect()).collect();
    let (oracle, treated_loading) = if spec.treated_in_hull {
        let w = dirichlet_ones(&mut rng, n0);
        let phi = (0..r).map(|c| w.iter().zip(&donor_loadings).map(|(wi, l)| wi * l[c]).sum()).collect();
        (Some(w), phi)
    } else {
        (None, (0..r).map(|_| normal(&mut rng)).collect::<Vec<f64>>())
    };

    let (fa, fb) = (spec.cross_outcome_factor_corr.sqrt(), (1.0 - spec.cross_outcome_factor_corr).sqrt());
    // factors[t][k][c]
    let factors: Vec<Vec<Vec<f64>>> = (0..tt)
        .map(|_| {
            let common: Vec<f64> = (0..r).map(|_| normal(&mut rng)).collect();
            (0..kk)
                .map(|_| common.iter().map(|c| fa * c + fb * normal(&mut rng)).collect())
                .collect()
        })
        .collect();

    let alpha: Vec<Vec<f64>> =
        (0..n).map(|_| (0..kk).map(|_| spec.fixed_effect_sd * normal(&mut rng)).collect()).collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut latent = vec![0.0; n * tt * kk];
    for t in 0..tt {
        for k in 0..kk {
            let mut l1 = 0.0;
            for j in 0..n0 {
                let l = dot(&donor_loadings[j], &factors[t][k]);
                latent[((j + 1) * tt + t) * kk + k] = alpha[j + 1][k] + l;
                if let Some(w) = &oracle {
                    l1 += w[j] * l;
                }
            }
            if oracle.is_none() {
                l1 = dot(&treated_loading, &factors[t][k]);
            }
            latent[t * kk + k] = alpha[0][k] + l1;
        }
    }

    let mut values = latent.clone();
    if spec.noise_sd > 0.0 {
        for i in 0..n {
            for t in 0..tt {
                let e = equicorrelated_noise(&mut rng, kk, spec.noise_sd, spec.cross_outcome_noise_corr);
                for (k, ek) in e.into_iter().enumerate() {
                    values[(i * tt + t) * kk + k] += ek;
                }
            }
        }
    }

    let units = unit_labels(n);
    let treated = units[0].clone();
    let panel = Panel::new(
        units,
        (1..=tt).map(|t| t.to_string()).collect(),
        (1..=kk).map(|k| OutcomeSpec::raw(format!("y{k}"))).collect(),
        values,
        &treated,
        spec.t0,
    )?;
    let truth = GroundTruth {
        oracle_weights: oracle,
        injected_effects: vec![vec![0.0; kk]; tt - spec.t0],
        noiseless: (0..n)
            .map(|i| (0..tt).map(|t| latent[(i * tt + t) * kk..(i * tt + t + 1) * kk].to_vec()).collect())
            .collect(),
        spec: spec.clone(),
    };
    Ok((panel, truth))
}

/// Adds `tau[post t][k]` to the treated unit's post-period values.
pub fn inject_effect(panel: &Panel, tau: &[Vec<f64>]) -> Result<Panel> {
    let (t0, k) = (panel.t0(), panel.n_outcomes());
    if tau.len() != panel.n_post() || tau.iter().any(|row| row.len() != k) {
        return Err(Error::shape(format!(
            "effect matrix must be {} post periods x {k} outcomes",
            panel.n_post()
        )));
    }
    Ok(panel.map_values(|i, t, o, v| if i == 0 && t >= t0 { v + tau[t - t0][o] } else { v }))
}

/// Panel with effects injected, plus ground truth updated to match.
pub fn generate_with_effect(spec: &FactorModelSpec, tau: &[Vec<f64>]) -> Result<(Panel, GroundTruth)> {
    let (p, mut g) = generate(spec)?;
    let p = inject_effect(&p, tau)?;
    g.injected_effects = tau.to_vec();
    Ok((p, g))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingCell {
    pub k: usize,
    pub t0: usize,
    pub replications: usize,
    pub mean_abs_bias_average: f64,
    pub mean_abs_bias_separate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSlopes {
    pub t0: usize,
    pub average: SlopeFit,
    pub separate: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub cells: Vec<ScalingCell>,
    /// Log-log slope of mean |bias| on K, one entry per T0.
    pub slopes: Vec<ScalingSlopes>,
}

/// OLS of `ys` on `xs` with a 95% t-interval for the slope.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let n = xs.len();
    let slope = stats::ols_slope(xs, ys);
    let intercept = stats::mean(ys) - slope * stats::mean(xs);
    if n < 3 {
        return SlopeFit { slope, intercept, std_error: f64::NAN, ci_low: f64::NAN, ci_high: f64::NAN };
    }
    let mx = stats::mean(xs);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = (sse / (n - 2) as f64 / sxx).sqrt();
    let q = StudentsT::new(0.0, 1.0, (n - 2) as f64).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::NAN);
    SlopeFit { slope, intercept, std_error: se, ci_low: slope - q * se, ci_high: slope + q * se }
}

/// Mean over outcomes of the first-post |bias| conditional on pre-period
/// data: the noise-free treated value minus the intercept-shifted noise-free
/// synthetic value, so post-period noise (mean zero) is excluded.
fn first_post_abs_bias(fit: &FitResult, panel: &Panel, truth: &GroundTruth) -> f64 {
    let d = &fit.design;
    let t = d.fit_len;
    let per: Vec<f64> = (0..panel.n_outcomes())
        .map(|k| {
            let w = &fit.weights.for_outcome(k).weights;
            let pre_mean = |i: usize| stats::mean(&panel.series(i, k)[..t]);
            let syn_shift: f64 = d.donors.iter().zip(w).map(|(&j, wj)| wj * pre_mean(j)).sum();
            let syn_latent: f64 = d.donors.iter().zip(w).map(|(&j, wj)| wj * truth.noiseless[j][t][k]).sum();
            let cf = pre_mean(d.treated) + syn_latent - syn_shift;
            (truth.noiseless[d.treated][t][k] - cf).abs()
        })
        .collect();
    stats::mean(&per)
}

/// Monte Carlo bias of the first-post effect for the average and separate
/// estimators across a `(K, T0)` grid. Each cell uses one post period and
/// replication streams `0..replications` of `base.seed`.
pub fn scaling_experiment(
    base: &FactorModelSpec,
    k_grid: &[usize],
    t0_grid: &[usize],
    replications: usize,
) -> Result<ScalingReport> {
    if k_grid.is_empty() || t0_grid.is_empty() || replications == 0 {
        return Err(Error::invalid("scaling grids and replications must be non-empty"));
    }
    let opts = SolveOptions::default();
    let mut cells = Vec::new();
    for &t0 in t0_grid {
        for &k in k_grid {
            let spec = FactorModelSpec { k_outcomes: k, t0, t_periods: t0 + 1, ..base.clone() };
            spec.validate()?;
            let reps: Vec<(f64, f64)> = (0..replications)
                .into_par_iter()
                .map(|rep| {
                    let (panel, truth) = generate_stream(&spec, rep as u64)?;
                    let pp = fit_transform(&panel)?;
                    let a = estimators::fit_average_with(&pp, &opts)?;
                    let s = estimators::fit_separate_with(&pp, &opts)?;
                    Ok((first_post_abs_bias(&a, &panel, &truth), first_post_abs_bias(&s, &panel, &truth)))
                })
                .collect::<Result<_>>()?;
            let avg: Vec<f64> = reps.iter().map(|r| r.0).collect();
            let sep: Vec<f64> = reps.iter().map(|r| r.1).collect();
            cells.push(ScalingCell {
                k,
                t0,
                replications,
                mean_abs_bias_average: stats::mean(&avg),
                mean_abs_bias_separate: stats::mean(&sep),
            });
        }
    }
    let slopes = t0_grid
        .iter()
        .map(|&t0| {
            let row: Vec<&ScalingCell> = cells.iter().filter(|c| c.t0 == t0).collect();
            let lk: Vec<f64> = row.iter().map(|c| (c.k as f64).ln()).collect();
            let la: Vec<f64> = row.iter().map(|c| c.mean_abs_bias_average.ln()).collect();
            let ls: Vec<f64> = row.iter().map(|c| c.mean_abs_bias_separate.ln()).collect();
            ScalingSlopes { t0, average: fit_slope(&lk, &la), separate: fit_slope(&lk, &ls) }
        })
        .collect();
    Ok(ScalingReport { cells, slopes })
}
