//! Demean → scale → sign transforms shared by estimation and inference.
//!
//! Every unit–outcome series is demeaned by its own pre-period mean, every
//! unit is divided by the *treated* unit's pre-period SD for that outcome,
//! and the result is multiplied by the outcome's sign. Placebo and conformal
//! refits go through the same code path with a different [`Design`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;

/// Denominator convention for the treated pre-period SD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdKind {
    /// Divide by `T0`.
    #[default]
    Population,
    /// Divide by `T0 - 1`.
    Sample,
}

impl SdKind {
    fn ddof(self) -> usize {
        match self {
            SdKind::Population => 0,
            SdKind::Sample => 1,
        }
    }
}

/// Which unit plays "treated", which units are donors, and which periods
/// are used for fitting (`0..fit_len`) and reporting (`0..horizon`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Design {
    pub treated: usize,
    pub donors: Vec<usize>,
    pub fit_len: usize,
    pub horizon: usize,
}

impl Design {
    /// Treated unit 0 against all donors, fit on the pre period, report on all periods.
    pub fn standard(panel: &Panel) -> Self {
        Self {
            treated: 0,
            donors: (1..panel.n_units()).collect(),
            fit_len: panel.t0(),
            horizon: panel.n_times(),
        }
    }

    pub fn n_post(&self) -> usize {
        self.horizon - self.fit_len
    }

    fn validate(&self, panel: &Panel) -> Result<()> {
        let n = panel.n_units();
        if self.treated >= n {
            return Err(Error::invalid(format!("treated index {} out of range", self.treated)));
        }
        if self.donors.is_empty() {
            return Err(Error::invalid("design has no donors"));
        }
        let mut seen = vec![false; n];
        seen[self.treated] = true;
        for &d in &self.donors {
            if d >= n || seen[d] {
                return Err(Error::invalid(format!("invalid or repeated donor index {d}")));
            }
            seen[d] = true;
        }
        if self.fit_len < 1 || self.fit_len > self.horizon || self.horizon > panel.n_times() {
            return Err(Error::invalid(format!(
                "fit window {} / horizon {} incompatible with {} periods",
                self.fit_len,
                self.horizon,
                panel.n_times()
            )));
        }
        Ok(())
    }
}

/// Fitted transform: per-unit pre means, treated pre SDs, and signs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformParams {
    /// Units in design order: treated first, then donors.
    pub units: Vec<String>,
    /// `pre_means[i][k]`, means over the fit window only.
    pub pre_means: Vec<Vec<f64>>,
    pub treated_pre_sd: Vec<f64>,
    pub signs: Vec<i8>,
    pub t0: usize,
}

impl TransformParams {
    #[inline]
    pub fn forward(&self, unit: usize, k: usize, y: f64) -> f64 {
        f64::from(self.signs[k]) * (y - self.pre_means[unit][k]) / self.treated_pre_sd[k]
    }

    /// Standardized, sign-aligned gap → original-scale gap.
    #[inline]
    pub fn invert_gap(&self, k: usize, standardized: f64) -> f64 {
        standardized * self.treated_pre_sd[k] * f64::from(self.signs[k])
    }

    /// Original-scale gap → standardized, sign-aligned gap.
    #[inline]
    pub fn standardize_gap(&self, k: usize, gap: f64) -> f64 {
        gap * f64::from(self.signs[k]) / self.treated_pre_sd[k]
    }
}

/// Transformed treated series and donor matrices, one block per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedPanel {
    outcomes: Vec<String>,
    treated_label: String,
    donor_labels: Vec<String>,
    design: Design,
    /// `treated[k][t]`, `t < horizon`.
    treated: Vec<Vec<f64>>,
    /// Per outcome, `horizon × n_donors`.
    donors: Vec<DMatrix<f64>>,
    params: TransformParams,
}

/// Fits the standard transform (treated vs. all donors, pre-period window).
pub fn fit_transform(panel: &Panel) -> Result<PreprocessedPanel> {
    fit_transform_design(panel, &Design::standard(panel), SdKind::default())
}

/// Fits the transform for an arbitrary design (placebos, conformal refits).
pub fn fit_transform_design(panel: &Panel, design: &Design, sd: SdKind) -> Result<PreprocessedPanel> {
    design.validate(panel)?;
    let k_n = panel.n_outcomes();
    let w = design.fit_len;
    let units: Vec<usize> = std::iter::once(design.treated).chain(design.donors.iter().copied()).collect();

    let pre_means: Vec<Vec<f64>> = units
        .iter()
        .map(|&i| {
            (0..k_n)
                .map(|k| (0..w).map(|t| panel.value(i, t, k)).sum::<f64>() / w as f64)
                .collect()
        })
        .collect();

    let mut treated_pre_sd = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let series: Vec<f64> = (0..w).map(|t| panel.value(design.treated, t, k)).collect();
        let s = crate::stats::sd(&series, sd.ddof());
        let max_abs = units
            .iter()
            .flat_map(|&i| (0..design.horizon).map(move |t| (i, t)))
            .map(|(i, t)| panel.value(i, t, k).abs())
            .fold(0.0_f64, f64::max);
        let tol = 1e-10 * max_abs;
        if !(s > tol) {
            return Err(Error::DegenerateScale(panel.outcomes()[k].name.clone()));
        }
        treated_pre_sd.push(s);
    }

    let params = TransformParams {
        units: units.iter().map(|&i| panel.units()[i].clone()).collect(),
        pre_means,
        treated_pre_sd,
        signs: panel.signs(),
        t0: w,
    };
    Ok(apply(panel, design, params))
}

/// Applies previously fitted parameters to a panel without re-estimating
/// means or scales. Uses the standard design truncated to `params.t0`.
pub fn transform_with(params: &TransformParams, panel: &Panel) -> Result<PreprocessedPanel> {
    let design = Design {
        treated: 0,
        donors: (1..panel.n_units()).collect(),
        fit_len: params.t0,
        horizon: panel.n_times(),
    };
    transform_with_design(params, panel, &design)
}

pub fn transform_with_design(
    params: &TransformParams,
    panel: &Panel,
    design: &Design,
) -> Result<PreprocessedPanel> {
    design.validate(panel)?;
    let k_n = panel.n_outcomes();
    if params.pre_means.len() != design.donors.len() + 1
        || params.pre_means.iter().any(|m| m.len() != k_n)
        || params.treated_pre_sd.len() != k_n
        || params.signs.len() != k_n
    {
        return Err(Error::shape(format!(
            "transform fitted for {} units × {} outcomes, panel design has {} units × {k_n} outcomes",
            params.pre_means.len(),
            params.treated_pre_sd.len(),
            design.donors.len() + 1
        )));
    }
    if params.t0 != design.fit_len {
        return Err(Error::shape(format!(
            "transform fitted on {} periods, design fits on {}",
            params.t0, design.fit_len
        )));
    }
    Ok(apply(panel, design, params.clone()))
}

fn apply(panel: &Panel, design: &Design, params: TransformParams) -> PreprocessedPanel {
    let k_n = panel.n_outcomes();
    let h = design.horizon;
    let n0 = design.donors.len();
    let treated = (0..k_n)
        .map(|k| (0..h).map(|t| params.forward(0, k, panel.value(design.treated, t, k))).collect())
        .collect();
    let donors = (0..k_n)
        .map(|k| {
            DMatrix::from_fn(h, n0, |t, j| params.forward(j + 1, k, panel.value(design.donors[j], t, k)))
        })
        .collect();
    PreprocessedPanel {
        outcomes: panel.outcomes().iter().map(|o| o.name.clone()).collect(),
        treated_label: panel.units()[design.treated].clone(),
        donor_labels: design.donors.iter().map(|&j| panel.units()[j].clone()).collect(),
        design: design.clone(),
        treated,
        donors,
        params,
    }
}

/// Original-scale gaps from standardized, sign-aligned gaps (`gaps[k][t]`).
pub fn invert_effects(params: &TransformParams, standardized: &[Vec<f64>]) -> Vec<Vec<f64>> {
    standardized
        .iter()
        .enumerate()
        .map(|(k, row)| row.iter().map(|&g| params.invert_gap(k, g)).collect())
        .collect()
}

impl PreprocessedPanel {
    pub fn n_donors(&self) -> usize {
        self.donor_labels.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// Length of the fitting window.
    pub fn t0(&self) -> usize {
        self.design.fit_len
    }

    pub fn horizon(&self) -> usize {
        self.design.horizon
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    pub fn donor_labels(&self) -> &[String] {
        &self.donor_labels
    }

    pub fn treated_label(&self) -> &str {
        &self.treated_label
    }

    pub fn params(&self) -> &TransformParams {
        &self.params
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Transformed treated series for outcome `k` over the horizon.
    pub fn treated(&self, k: usize) -> &[f64] {
        &self.treated[k]
    }

    /// Transformed donor block for outcome `k` (`horizon × n_donors`).
    pub fn donors(&self, k: usize) -> &DMatrix<f64> {
        &self.donors[k]
    }

    /// Pre-period design for one outcome.
    pub fn outcome_design(&self, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let t0 = self.t0();
        (
            self.donors[k].rows(0, t0).into_owned(),
            DVector::from_column_slice(&self.treated[k][..t0]),
        )
    }

    /// Cross-outcome mean of the pre-period rows (`T0 × n_donors`).
    pub fn averaged_design(&self) -> (DMatrix<f64>, DVector<f64>) {
        let t0 = self.t0();
        let kf = self.n_outcomes() as f64;
        let mut x = DMatrix::zeros(t0, self.n_donors());
        let mut y = DVector::zeros(t0);
        for k in 0..self.n_outcomes() {
            x += self.donors[k].rows(0, t0);
            for t in 0..t0 {
                y[t] += self.treated[k][t];
            }
        }
        (x / kf, y / kf)
    }

    /// Pre-period rows stacked outcome by outcome (`T0·K × n_donors`).
    pub fn concatenated_design(&self) -> (DMatrix<f64>, DVector<f64>) {
        let t0 = self.t0();
        let k_n = self.n_outcomes();
        let mut x = DMatrix::zeros(t0 * k_n, self.n_donors());
        let mut y = DVector::zeros(t0 * k_n);
        for k in 0..k_n {
            x.rows_mut(k * t0, t0).copy_from(&self.donors[k].rows(0, t0));
            for t in 0..t0 {
                y[k * t0 + t] = self.treated[k][t];
            }
        }
        (x, y)
    }

    /// Residuals `treated − donors·w` over the whole horizon, `[k][t]`.
    pub fn residuals(&self, k: usize, weights: &[f64]) -> Vec<f64> {
        let d = &self.donors[k];
        (0..self.horizon())
            .map(|t| {
                let syn: f64 = (0..self.n_donors()).map(|j| d[(t, j)] * weights[j]).sum();
                self.treated[k][t] - syn
            })
            .collect()
    }

    /// Restricts to a subset of outcomes (indices into `outcomes()`).
    pub fn select_outcomes(&self, keep: &[usize]) -> Result<PreprocessedPanel> {
        if keep.is_empty() || keep.iter().any(|&k| k >= self.n_outcomes()) {
            return Err(Error::invalid("invalid outcome selection"));
        }
        let mut out = self.clone();
        out.outcomes = keep.iter().map(|&k| self.outcomes[k].clone()).collect();
        out.treated = keep.iter().map(|&k| self.treated[k].clone()).collect();
        out.donors = keep.iter().map(|&k| self.donors[k].clone()).collect();
        out.params.treated_pre_sd = keep.iter().map(|&k| self.params.treated_pre_sd[k]).collect();
        out.params.signs = keep.iter().map(|&k| self.params.signs[k]).collect();
        out.params.pre_means = self
            .params
            .pre_means
            .iter()
            .map(|m| keep.iter().map(|&k| m[k]).collect())
            .collect();
        Ok(out)
    }

    /// Restricts to a subset of donors (indices into `donor_labels()`).
    pub fn select_donors(&self, keep: &[usize]) -> Result<PreprocessedPanel> {
        if keep.is_empty() || keep.iter().any(|&j| j >= self.n_donors()) {
            return Err(Error::invalid("invalid donor selection"));
        }
        let mut out = self.clone();
        out.donor_labels = keep.iter().map(|&j| self.donor_labels[j].clone()).collect();
        out.design.donors = keep.iter().map(|&j| self.design.donors[j]).collect();
        out.donors = self.donors.iter().map(|m| m.select_columns(keep)).collect();
        let mut means = vec![self.params.pre_means[0].clone()];
        means.extend(keep.iter().map(|&j| self.params.pre_means[j + 1].clone()));
        out.params.pre_means = means;
        let mut units = vec![self.params.units[0].clone()];
        units.extend(keep.iter().map(|&j| self.params.units[j + 1].clone()));
        out.params.units = units;
        Ok(out)
    }
}
