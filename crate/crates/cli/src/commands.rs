use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mosc_core::diagnostics;
use mosc_core::estimators::{self, effect_table, predict_counterfactual, EffectSubset};
use mosc_core::inference::{conformal_joint_with, permutation_test};
use mosc_core::panel::{
    convert_per_capita, convert_shares, emit_long, enforce_balanced_support, ingest_long, interpolate_gaps,
    read_long_csv_path, read_population_csv, read_totals_csv, write_long_csv,
};
use mosc_core::preprocess::fit_transform_design;
use mosc_core::screening::{run_pipeline, FeatureTable, PipelineConfig, ScreeningInputs};
use mosc_core::simgen::{self, generate, generate_with_effect};
use mosc_core::{Design, EstimatorKind, FitResult, FitWeights, LongRecord, OutcomeKind, Panel, SolveOptions};
use serde_json::{json, Map, Value};

use crate::config::{hash_file, EstimatorName, LoadedConfig};
use crate::error::{CliError, CliResult};
use crate::output::{Cell, OutputDir, Table};

fn open(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::open(path).map_err(|e| CliError::io(path, e))
}

/// Panel built from the configured data plus the raw long records.
pub struct Data {
    pub panel: Panel,
    pub raw: Vec<LongRecord>,
    pub notes: Vec<String>,
}

fn read_records(lc: &LoadedConfig, path: &Path, keep: Option<&BTreeSet<String>>) -> CliResult<Vec<LongRecord>> {
    let mut recs = read_long_csv_path(lc.resolve(path))?;
    if let Some(keep) = keep {
        recs.retain(|r| keep.contains(&r.unit));
    }
    Ok(recs)
}

fn unit_filter(treated: &str, donors: Option<&[String]>) -> Option<BTreeSet<String>> {
    donors.map(|d| std::iter::once(treated.to_string()).chain(d.iter().cloned()).collect())
}

pub fn load_data(lc: &LoadedConfig, donors: Option<&[String]>) -> CliResult<Data> {
    lc.validate_data()?;
    let c = &lc.config;
    let treated = c.treated.as_deref().unwrap_or_default();
    let cutoff = c.cutoff.as_deref().unwrap_or_default();
    let keep = unit_filter(treated, donors.or(c.donors.as_deref()));
    let raw = read_records(lc, c.data.panel.as_ref().expect("validated"), keep.as_ref())?;
    let mut notes = Vec::new();
    let mut recs = raw.clone();
    if c.data.balance {
        let b = enforce_balanced_support(&recs);
        if !b.dropped.is_empty() {
            notes.push(format!("balanced support dropped {} (unit, time) pairs", b.dropped.len()));
        }
        recs = b.records;
    }
    if c.data.interpolate {
        let i = interpolate_gaps(&recs, cutoff)?;
        if !i.filled.is_empty() {
            notes.push(format!("interpolated {} cells", i.filled.len()));
        }
        recs = i.records;
    }
    let mut panel = ingest_long(&recs, treated, cutoff)?;
    if !c.outcomes.is_empty() {
        let names: BTreeSet<&str> = panel.outcomes().iter().map(|o| o.name.as_str()).collect();
        for o in &c.outcomes {
            if !names.contains(o.name.as_str()) {
                return Err(CliError::config(format!("outcome `{}` not present in data.panel", o.name)));
            }
        }
        if c.outcomes.len() != names.len() {
            let listed: BTreeSet<&str> = c.outcomes.iter().map(|o| o.name.as_str()).collect();
            let extra: Vec<&str> = names.difference(&listed).copied().collect();
            return Err(CliError::config(format!("data.panel outcomes without a spec: {}", extra.join(", "))));
        }
        panel = panel.with_outcome_specs(c.outcomes.clone())?;
    }
    let population = match &c.data.population {
        Some(p) => Some(read_population_csv(open(&lc.resolve(p))?)?),
        None => None,
    };
    for o in &c.outcomes {
        match o.kind {
            OutcomeKind::PerCapita => {
                panel = convert_per_capita(&panel, &o.name, population.as_ref().expect("validated"))?;
            }
            OutcomeKind::Share => {
                let totals = read_totals_csv(open(&lc.resolve(&c.data.totals[&o.name]))?)?;
                panel = convert_shares(&panel, &o.name, &totals)?;
            }
            OutcomeKind::Raw => {}
        }
    }
    Ok(Data { panel: panel.with_partial_exposure(c.data.partial_first_post), raw, notes })
}

fn input_hashes(lc: &LoadedConfig) -> CliResult<BTreeMap<String, String>> {
    let d = &lc.config.data;
    let mut paths: Vec<&PathBuf> = [&d.panel, &d.population, &d.features, &d.shares].into_iter().flatten().collect();
    paths.extend(d.totals.values());
    paths
        .into_iter()
        .map(|p| Ok((p.display().to_string(), hash_file(&lc.resolve(p))?)))
        .collect()
}

fn manifest(out: &mut OutputDir, command: &str, lc: &LoadedConfig, notes: &[String]) -> CliResult<()> {
    let inputs = if command == "simulate" { BTreeMap::new() } else { input_hashes(lc)? };
    let mut files = out.written().to_vec();
    files.sort();
    out.json(
        "manifest.json",
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": inputs,
            "files": files,
            "notes": notes,
        }),
    )
}

fn named<T: Clone + Into<Value>>(names: &[String], values: &[T]) -> Value {
    Value::Object(names.iter().cloned().zip(values.iter().map(|v| v.clone().into())).collect::<Map<_, _>>())
}

fn weights_json(fit: &FitResult) -> Value {
    match &fit.weights {
        FitWeights::Common(w) => json!({
            "shared": true,
            "weights": named(&fit.donors, &w.weights),
            "iterations": w.iterations,
            "converged": w.converged,
        }),
        FitWeights::Separate(ws) => {
            let per: Map<String, Value> = fit
                .outcomes
                .iter()
                .zip(ws)
                .map(|(o, w)| (o.clone(), json!({"weights": named(&fit.donors, &w.weights), "iterations": w.iterations, "converged": w.converged})))
                .collect();
            let range: Map<String, Value> = fit
                .donors
                .iter()
                .zip(fit.separate_range().unwrap_or_default())
                .map(|(d, (lo, hi))| (d.clone(), json!([lo, hi])))
                .collect();
            json!({"shared": false, "per_outcome": per, "range": range})
        }
    }
}

fn check_unique(names: &[EstimatorName]) -> CliResult<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(*n) {
            return Err(CliError::config(format!("estimator {n:?} listed twice")));
        }
    }
    if names.is_empty() {
        return Err(CliError::config("estimate.estimators is empty"));
    }
    Ok(())
}

pub fn estimate(lc: &LoadedConfig, out: &mut OutputDir) -> CliResult<()> {
    let cfg = &lc.config.estimate;
    check_unique(&cfg.estimators)?;
    let data = load_data(lc, None)?;
    let panel = &data.panel;
    let opts = SolveOptions::default();
    let pp = fit_transform_design(panel, &Design::standard(panel), cfg.sd)?;
    let uniform = diagnostics::uniform_baseline(&pp);

    let mut weights = Map::new();
    let mut metrics = Map::new();
    let mut effects = Table::new(&["estimator", "outcome", "period", "post", "observed", "counterfactual", "gap", "standardized_gap"]);
    let mut notes = data.notes.clone();
    for name in &cfg.estimators {
        let spec = name.spec(&cfg.nu)?;
        let fit = estimators::fit(&pp, &spec, &opts)?;
        if !fit.weights.converged() {
            notes.push(format!("{}: solver hit the iteration limit", fit.estimator.name()));
        }
        let eff = predict_counterfactual(&fit, panel)?;
        let table = effect_table(&eff, &EffectSubset::ALL)?;
        let key = fit.estimator.name().to_string();
        let mut w = weights_json(&fit);
        w["nu"] = json!(fit.nu);
        weights.insert(key.clone(), w);
        metrics.insert(
            key.clone(),
            json!({
                "q_avg": fit.q_avg,
                "q_cat": fit.q_cat,
                "per_outcome_rmspe": named(&fit.outcomes, &fit.per_outcome_rmspe),
                "mean_rmspe": fit.mean_rmspe,
                "nu": fit.nu,
                "improvement_over_uniform": diagnostics::improvement_over_uniform(&uniform, &fit),
                "effects": table,
            }),
        );
        for (k, o) in eff.outcomes.iter().enumerate() {
            for (t, p) in eff.periods.iter().enumerate() {
                effects.row(vec![
                    key.as_str().into(),
                    o.into(),
                    p.into(),
                    (t >= eff.t0).into(),
                    panel.value(0, t, k).into(),
                    eff.counterfactual[k][t].into(),
                    eff.gaps[k][t].into(),
                    eff.standardized[k][t].into(),
                ]);
            }
        }
    }
    out.json(
        "weights.json",
        &json!({"treated": panel.treated_label(), "donors": panel.donor_labels(), "outcomes": pp.outcomes(), "estimators": weights}),
    )?;
    out.csv("effects.csv", &effects)?;
    out.json(
        "fit_metrics.json",
        &json!({
            "t0": panel.t0(),
            "n_post": panel.n_post(),
            "first_post_partial": panel.first_post_partial(),
            "uniform": {"q_avg": uniform.q_avg, "q_cat": uniform.q_cat, "mean_rmspe": uniform.mean_rmspe},
            "estimators": metrics,
        }),
    )?;
    if !cfg.nu_grid.is_empty() {
        if let Some(bad) = cfg.nu_grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CliError::config(format!("estimate.nu_grid value {bad} outside [0, 1]")));
        }
        let rows = estimators::nu_sweep(&pp, &cfg.nu_grid, &opts)?;
        let mut header = vec!["nu".to_string(), "q_avg".into(), "q_cat".into(), "mean_rmspe".into()];
        header.extend(pp.donor_labels().iter().map(|d| format!("w_{d}")));
        let mut t = Table::new(&header);
        for r in rows {
            let mut cells: Vec<Cell> = vec![r.nu.into(), r.q_avg.into(), r.q_cat.into(), r.mean_rmspe.into()];
            cells.extend(r.weights.iter().map(|&w| Cell::F(w)));
            t.row(cells);
        }
        out.csv("nu_sweep.csv", &t)?;
    }
    manifest(out, "estimate", lc, &notes)
}

pub fn infer(lc: &LoadedConfig, out: &mut OutputDir) -> CliResult<()> {
    let cfg = &lc.config.inference;
    let data = load_data(lc, None)?;
    let panel = &data.panel;
    if !cfg.conformal && !cfg.permutation {
        return Err(CliError::config("inference: both conformal and permutation are disabled"));
    }
    if cfg.conformal {
        let tau0 = cfg.tau0.clone().unwrap_or_else(|| vec![0.0; panel.n_outcomes()]);
        if tau0.len() != panel.n_outcomes() {
            return Err(CliError::config(format!("inference.tau0 needs {} values", panel.n_outcomes())));
        }
        let mut results = Map::new();
        for obj in &cfg.conformal_objectives {
            let r = conformal_joint_with(panel, *obj, &tau0, lc.config.estimate.sd, &SolveOptions::default())?;
            let name = serde_json::to_value(obj).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            results.insert(
                name,
                json!({
                    "rank": r.rank,
                    "n_reference": r.reference_scores.len(),
                    "p_exact": r.p_exact,
                    "p_mid": r.p_mid,
                    "statistic_post": r.statistic_post,
                    "reference_scores": r.reference_scores,
                    "weights": named(panel.donor_labels(), &r.weights),
                }),
            );
        }
        let n = panel.t0() + 1;
        out.json(
            "conformal.json",
            &json!({
                "tau0": named(&panel.outcomes().iter().map(|o| o.name.clone()).collect::<Vec<_>>(), &tau0),
                "t0": panel.t0(),
                "grid_min": 1.0 / n as f64,
                "p_grid": (1..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>(),
                "score": "sum_abs_over_sqrt_k",
                "results": results,
            }),
        )?;
    }
    if cfg.permutation {
        let pc = cfg.placebo.core()?;
        let r = permutation_test(panel, &pc)?;
        let n = r.n_placebo + 1;
        out.json(
            "permutation.json",
            &json!({
                "statistic": r.statistic,
                "h": r.h,
                "h_note": if r.h.is_none() { Some("H ignored by this statistic") } else { None },
                "estimator": pc.estimator.kind().name(),
                "treated_stat": r.treated_stat,
                "rank": r.rank,
                "p": r.p,
                "p_mid": r.p_mid,
                "p_two_sided": r.p_two_sided,
                "n_placebo": r.n_placebo,
                "grid_min": r.grid_min,
                "p_grid": (1..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>(),
                "distribution": r.placebo_stats,
                "dropped": r.dropped,
            }),
        )?;
        let mut t = Table::new(&["label", "kind", "stat", "h_used"]);
        t.row(vec![panel.treated_label().into(), "treated".into(), r.treated_stat.into(), r.h.map_or(Cell::None, Cell::I)]);
        for p in &r.placebo_stats {
            let kind = serde_json::to_value(p.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            t.row(vec![(&p.label).into(), kind.into(), p.stat.into(), p.h_used.map_or(Cell::None, Cell::I)]);
        }
        out.csv("placebo_distribution.csv", &t)?;
    }
    manifest(out, "infer", lc, &data.notes)
}

pub fn diagnose(lc: &LoadedConfig, out: &mut OutputDir) -> CliResult<()> {
    let cfg = &lc.config.diagnostics;
    let data = load_data(lc, None)?;
    let panel = &data.panel;
    let pp = fit_transform_design(panel, &Design::standard(panel), cfg.sd)?;
    let spec = cfg.estimator.spec(&cfg.nu)?;
    let fit = estimators::fit(&pp, &spec, &SolveOptions::default())?;
    let mut notes = data.notes.clone();
    let mut summary = Map::new();
    summary.insert("estimator".into(), json!(fit.estimator.name()));
    summary.insert("mean_rmspe".into(), json!(fit.mean_rmspe));
    let uniform = diagnostics::uniform_baseline(&pp);
    summary.insert("improvement_over_uniform".into(), json!(diagnostics::improvement_over_uniform(&uniform, &fit)));

    if cfg.scree || cfg.condition {
        let s = diagnostics::scree(&pp)?;
        if cfg.scree {
            let mut t = Table::new(&["component", "singular_value", "cumulative_variance"]);
            for (i, (sv, cv)) in s.singular_values.iter().zip(&s.cumulative_variance).enumerate() {
                t.row(vec![(i + 1).into(), (*sv).into(), (*cv).into()]);
            }
            out.csv("scree.csv", &t)?;
        }
        if cfg.condition {
            let c = diagnostics::condition_ratio(&pp)?;
            out.json(
                "condition.json",
                &json!({
                    "kappa_avg": c.kappa_avg,
                    "kappa_per_outcome": named(pp.outcomes(), &c.kappa_per_outcome),
                    "ratio": c.ratio,
                    "notices": c.notices,
                    "effective_rank": s.effective_rank,
                    "r95": s.r95,
                    "rank_tolerance": s.tolerance,
                }),
            )?;
        }
    }
    if cfg.residual_corr {
        let rc = diagnostics::residual_correlations(&fit, &pp)?;
        let mut header = vec!["outcome".to_string()];
        header.extend(rc.outcomes.iter().cloned());
        let mut t = Table::new(&header);
        for (o, row) in rc.outcomes.iter().zip(&rc.matrix) {
            let mut cells: Vec<Cell> = vec![o.into()];
            cells.extend(row.iter().map(|&v| Cell::from(v)));
            t.row(cells);
        }
        out.csv("residual_corr.csv", &t)?;
        summary.insert(
            "residual_corr".into(),
            json!({"mean_abs": rc.mean_abs, "median_abs": rc.median_abs, "min": rc.min, "max": rc.max}),
        );
    }
    if cfg.looo {
        if fit.estimator == EstimatorKind::Separate {
            notes.push("leave-one-outcome-out skipped: needs a common-weight estimator".into());
        } else if pp.n_outcomes() < 2 {
            notes.push("leave-one-outcome-out skipped: needs at least two outcomes".into());
        } else {
            let r = diagnostics::leave_one_outcome_out(&pp, &spec)?;
            let mut t = Table::new(&["excluded", "mean_rmspe", "error"]);
            for row in &r.rows {
                t.row(vec![(&row.excluded).into(), row.mean_rmspe.into(), row.error.clone().unwrap_or_default().into()]);
            }
            out.csv("looo.csv", &t)?;
            summary.insert("looo".into(), json!({"baseline": r.baseline, "mean_across_exclusions": r.mean_across_exclusions}));
        }
    }
    if cfg.lodo {
        if pp.n_donors() < 2 {
            notes.push("leave-one-donor-out skipped: needs at least two donors".into());
        } else {
            let r = diagnostics::leave_one_donor_out(&pp, &spec)?;
            let mut t = Table::new(&["excluded", "baseline_weight", "mean_rmspe", "pct_change"]);
            for row in &r.rows {
                t.row(vec![(&row.excluded).into(), row.baseline_weight.into(), row.mean_rmspe.into(), row.pct_change.into()]);
            }
            out.csv("lodo.csv", &t)?;
            summary.insert("lodo".into(), json!({"baseline": r.baseline}));
        }
    }
    if cfg.cv {
        let r = diagnostics::blocked_cv(&pp, cfg.cv_folds, &spec)?;
        let mut t = Table::new(&["fold", "start", "end", "first_period", "last_period", "heldout_rmspe"]);
        for f in &r.folds {
            t.row(vec![
                f.fold.into(),
                f.start.into(),
                f.end.into(),
                (&panel.times()[f.start]).into(),
                (&panel.times()[f.end - 1]).into(),
                f.heldout_rmspe.into(),
            ]);
        }
        out.csv("cv.csv", &t)?;
        summary.insert("cv".into(), json!({"folds": cfg.cv_folds, "mean_heldout_rmspe": r.mean_heldout_rmspe}));
    }
    if cfg.ridge {
        let rows = diagnostics::ridge_grid(&pp, &cfg.ridge_lambdas)?;
        let mut header = vec!["lambda".to_string(), "rmspe".into(), "n_eff".into(), "max_weight".into()];
        header.extend(pp.donor_labels().iter().map(|d| format!("w_{d}")));
        let mut t = Table::new(&header);
        for r in rows {
            let mut cells: Vec<Cell> = vec![r.lambda.into(), r.rmspe.into(), r.n_eff.into(), r.max_weight.into()];
            cells.extend(r.weights.iter().map(|&w| Cell::F(w)));
            t.row(cells);
        }
        out.csv("ridge_grid.csv", &t)?;
    }
    if cfg.concentration {
        if fit.estimator == EstimatorKind::Separate {
            notes.push("concentration skipped: needs a common-weight estimator".into());
        } else {
            let w = &fit.weights.for_outcome(0).weights;
            let c = diagnostics::concentration(w, &pp)?;
            out.json(
                "concentration.json",
                &json!({
                    "estimator": fit.estimator.name(),
                    "weights": named(&c.donors, w),
                    "n_eff": c.n_eff,
                    "max_weight": c.max_weight,
                    "leverage": named(&c.donors, &c.leverage),
                    "cosine": named(&c.donors, &c.cosine),
                }),
            )?;
        }
    }
    out.json("diagnostics_summary.json", &summary)?;
    manifest(out, "diagnose", lc, &notes)
}

fn early_stages(p: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        tolerance_min_pass: p.tolerance_min_pass,
        gap_movement: p.gap_movement.clone(),
        max_missing_per_outcome: p.max_missing_per_outcome,
        ..PipelineConfig::none()
    }
}

fn late_stages(p: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        contamination: p.contamination.clone(),
        design_validation: p.design_validation.clone(),
        ridge_lambdas: p.ridge_lambdas.clone(),
        ..PipelineConfig::none()
    }
}

pub fn screen(lc: &LoadedConfig, out: &mut OutputDir) -> CliResult<()> {
    lc.validate_data()?;
    let c = &lc.config;
    let treated = c.treated.clone().unwrap_or_default();
    let cutoff = c.cutoff.clone().unwrap_or_default();
    let pipeline = c.screening.pipeline()?;
    let raw = read_records(lc, c.data.panel.as_ref().expect("validated"), None)?;
    let candidates: Vec<String> = match &c.screening.candidates {
        Some(cs) => cs.clone(),
        None => {
            let units: BTreeSet<&String> = raw.iter().map(|r| &r.unit).filter(|u| **u != treated).collect();
            units.into_iter().cloned().collect()
        }
    };
    if candidates.is_empty() {
        return Err(CliError::config("screening: no candidates"));
    }
    let features = match &c.data.features {
        Some(p) => Some(FeatureTable::read_csv(open(&lc.resolve(p))?)?),
        None => None,
    };
    let shares = match &c.data.shares {
        Some(p) => {
            let keep = unit_filter(&treated, Some(&candidates));
            Some(ingest_long(&read_records(lc, p, keep.as_ref())?, &treated, &cutoff)?)
        }
        None => None,
    };
    let keep = unit_filter(&treated, Some(&candidates)).expect("some");
    let records: Vec<LongRecord> = raw.into_iter().filter(|r| keep.contains(&r.unit)).collect();
    let early = run_pipeline(
        &ScreeningInputs { panel: None, features: features.as_ref(), shares: shares.as_ref(), records: Some(&records) },
        &treated,
        &candidates,
        &early_stages(&pipeline),
    )?;
    let survivors = early.final_donors.clone();
    let late_cfg = late_stages(&pipeline);
    let needs_panel = late_cfg.contamination.is_some() || late_cfg.design_validation.is_some() || late_cfg.ridge_lambdas.is_some();
    let (late, notes) = if needs_panel {
        let data = load_data(lc, Some(&survivors))?;
        let r = run_pipeline(&ScreeningInputs { panel: Some(&data.panel), ..Default::default() }, &treated, &survivors, &late_cfg)?;
        (Some(r), data.notes)
    } else {
        (None, Vec::new())
    };
    let mut reports = early.reports.clone();
    let mut final_donors = survivors;
    let mut runs = Vec::new();
    let mut stage6 = None;
    if let Some(l) = late {
        reports.extend(l.reports);
        final_donors = l.final_donors;
        runs = l.contamination_runs;
        stage6 = l.stage6;
    }
    let mut stages = Vec::new();
    for r in &reports {
        let name = format!("stage_{}_{}.json", r.stage, r.name);
        out.json(&name, r)?;
        stages.push(json!({
            "stage": r.stage,
            "name": r.name,
            "n_in": r.candidates_in.len(),
            "n_out": r.candidates_out.len(),
            "removed": r.removed(),
            "relaxation_applied": r.relaxation_applied,
            "file": name,
        }));
    }
    out.json(
        "screening.json",
        &json!({
            "treated": treated,
            "initial": candidates,
            "final_donors": final_donors,
            "stages": stages,
            "contamination_runs": runs,
            "stage6": stage6,
        }),
    )?;
    manifest(out, "screen", lc, &notes)
}

pub fn simulate(lc: &LoadedConfig, out: &mut OutputDir) -> CliResult<()> {
    let cfg = &lc.config.simulate;
    let mut spec = cfg.model.clone();
    spec.seed = lc.config.seed;
    spec.validate()?;
    let n_post = spec.t_periods - spec.t0;
    let (panel, truth) = match &cfg.effect {
        Some(e) => {
            if e.len() != spec.k_outcomes {
                return Err(CliError::config(format!("simulate.effect needs {} values", spec.k_outcomes)));
            }
            generate_with_effect(&spec, &vec![e.clone(); n_post])?
        }
        None => generate(&spec)?,
    };
    let mut buf = Vec::new();
    write_long_csv(&emit_long(&panel), &mut buf)?;
    out.text("panel.csv", "#", &String::from_utf8(buf).map_err(|e| CliError::config(e.to_string()))?)?;
    out.json(
        "ground_truth.json",
        &json!({
            "treated": panel.treated_label(),
            "cutoff": panel.times()[panel.t0()],
            "units": panel.units(),
            "outcomes": panel.outcomes().iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
            "oracle_weights": truth.oracle_weights.as_ref().map(|w| named(panel.donor_labels(), w)),
            "injected_effects": truth.injected_effects,
            "noiseless": truth.noiseless,
            "spec": truth.spec,
        }),
    )?;
    if let Some(s) = &cfg.scaling {
        let r = simgen::scaling_experiment(&spec, &s.k_grid, &s.t0_grid, s.replications)?;
        let mut t = Table::new(&["k", "t0", "replications", "mean_abs_bias_average", "mean_abs_bias_separate"]);
        for c in &r.cells {
            t.row(vec![c.k.into(), c.t0.into(), c.replications.into(), c.mean_abs_bias_average.into(), c.mean_abs_bias_separate.into()]);
        }
        out.csv("scaling.csv", &t)?;
        out.json("scaling.json", &json!({"cells": r.cells, "slopes": r.slopes}))?;
    }
    manifest(out, "simulate", lc, &[])
}
