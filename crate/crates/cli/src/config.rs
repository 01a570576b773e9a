//! Run configuration: TOML file plus `MOSC_` environment overrides.
//!
//! An override `MOSC_SECTION__KEY=value` sets `section.key`; the value is
//! parsed as a TOML literal when possible and taken as a string otherwise.
//! `MOSC_CONFIG`, `MOSC_OUT` and `MOSC_THREADS` are command-line flags and
//! are not applied to the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mosc_core::inference::{ConformalObjective, PermutationConfig, Statistic};
use mosc_core::screening::PipelineConfig;
use mosc_core::simgen::FactorModelSpec;
use mosc_core::{EstimatorSpec, NuChoice, OutcomeKind, OutcomeSpec, SdKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const FLAG_VARS: [&str; 3] = ["MOSC_CONFIG", "MOSC_OUT", "MOSC_THREADS"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    Separate,
    Average,
    Concatenated,
    Combined,
}

/// `nu = 0.5` or `nu = "auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NuSetting {
    Fixed(f64),
    Named(String),
}

impl Default for NuSetting {
    fn default() -> Self {
        NuSetting::Named("auto".into())
    }
}

impl NuSetting {
    pub fn choice(&self) -> CliResult<NuChoice> {
        match self {
            NuSetting::Fixed(v) if (0.0..=1.0).contains(v) => Ok(NuChoice::Fixed(*v)),
            NuSetting::Fixed(v) => Err(CliError::config(format!("nu = {v} outside [0, 1]"))),
            NuSetting::Named(s) if s == "auto" => Ok(NuChoice::Auto),
            NuSetting::Named(s) => Err(CliError::config(format!("nu must be a number or \"auto\", got \"{s}\""))),
        }
    }
}

impl EstimatorName {
    pub fn spec(self, nu: &NuSetting) -> CliResult<EstimatorSpec> {
        Ok(match self {
            EstimatorName::Separate => EstimatorSpec::Separate,
            EstimatorName::Average => EstimatorSpec::Average,
            EstimatorName::Concatenated => EstimatorSpec::Concatenated,
            EstimatorName::Combined => EstimatorSpec::Combined(nu.choice()?),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long CSV `unit,time,outcome,value`.
    pub panel: Option<PathBuf>,
    /// `unit,population`, required by per-capita outcomes.
    pub population: Option<PathBuf>,
    /// Outcome name to `time,total` CSV, required by share outcomes.
    pub totals: BTreeMap<String, PathBuf>,
    /// Unit × feature CSV for screening stage 1.
    pub features: Option<PathBuf>,
    /// Long CSV of sector shares for screening stage 2.
    pub shares: Option<PathBuf>,
    /// Linearly fill interior gaps before building the panel.
    pub interpolate: bool,
    /// Drop (unit, time) pairs lacking any outcome.
    pub balance: bool,
    pub partial_first_post: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimators: Vec<EstimatorName>,
    pub nu: NuSetting,
    /// ν values for `nu_sweep.csv`; empty skips the sweep.
    pub nu_grid: Vec<f64>,
    pub sd: SdKind,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            estimators: vec![EstimatorName::Average],
            nu: NuSetting::default(),
            nu_grid: Vec::new(),
            sd: SdKind::Population,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermutationSettings {
    pub estimator: EstimatorName,
    pub nu: NuSetting,
    pub statistic: Statistic,
    pub h: usize,
    pub skip_first_post: bool,
    pub n_in_time: usize,
    pub min_pre: usize,
    pub sd: SdKind,
}

impl Default for PermutationSettings {
    fn default() -> Self {
        let d = PermutationConfig::default();
        PermutationSettings {
            estimator: EstimatorName::Average,
            nu: NuSetting::default(),
            statistic: d.statistic,
            h: d.h,
            skip_first_post: d.skip_first_post,
            n_in_time: d.n_in_time,
            min_pre: d.min_pre,
            sd: d.sd,
        }
    }
}

impl PermutationSettings {
    pub fn core(&self) -> CliResult<PermutationConfig> {
        Ok(PermutationConfig {
            estimator: self.estimator.spec(&self.nu)?,
            statistic: self.statistic,
            h: self.h,
            skip_first_post: self.skip_first_post,
            n_in_time: self.n_in_time,
            min_pre: self.min_pre,
            sd: self.sd,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub conformal: bool,
    pub conformal_objectives: Vec<ConformalObjective>,
    /// Null effect per outcome at the first post period; zeros by default.
    pub tau0: Option<Vec<f64>>,
    pub permutation: bool,
    #[serde(rename = "placebo")]
    pub placebo: PermutationSettings,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            conformal: true,
            conformal_objectives: vec![ConformalObjective::Average],
            tau0: None,
            permutation: true,
            placebo: PermutationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub estimator: EstimatorName,
    pub nu: NuSetting,
    pub sd: SdKind,
    pub scree: bool,
    pub condition: bool,
    pub residual_corr: bool,
    pub looo: bool,
    pub lodo: bool,
    pub cv: bool,
    pub cv_folds: usize,
    pub ridge: bool,
    pub ridge_lambdas: Vec<f64>,
    pub concentration: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            estimator: EstimatorName::Average,
            nu: NuSetting::default(),
            sd: SdKind::Population,
            scree: true,
            condition: true,
            residual_corr: true,
            looo: true,
            lodo: true,
            cv: true,
            cv_folds: 5,
            ridge: true,
            ridge_lambdas: mosc_core::diagnostics::DEFAULT_LAMBDAS.to_vec(),
            concentration: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    /// Initial candidates; all donors in the data by default.
    pub candidates: Option<Vec<String>>,
    /// Stage numbers (1 to 6) to skip.
    pub skip: Vec<u8>,
    pub stages: PipelineConfig,
}

impl ScreeningConfig {
    pub fn pipeline(&self) -> CliResult<PipelineConfig> {
        let mut p = self.stages.clone();
        for &s in &self.skip {
            match s {
                1 => p.tolerance_min_pass = None,
                2 => p.gap_movement = None,
                3 => p.max_missing_per_outcome = None,
                4 => p.contamination = None,
                5 => p.design_validation = None,
                6 => p.ridge_lambdas = None,
                other => return Err(CliError::config(format!("screening.skip: no stage {other}"))),
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub k_grid: Vec<usize>,
    pub t0_grid: Vec<usize>,
    pub replications: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig { k_grid: vec![1, 2, 4, 8, 16], t0_grid: vec![20], replications: 200 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Factor model; its `seed` is replaced by the top-level seed.
    pub model: FactorModelSpec,
    /// Constant effect per outcome added to every treated post period.
    pub effect: Option<Vec<f64>>,
    pub scaling: Option<ScalingConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub treated: Option<String>,
    /// First post-treatment period label.
    pub cutoff: Option<String>,
    /// Restrict the donor pool to these units.
    pub donors: Option<Vec<String>>,
    pub outcomes: Vec<OutcomeSpec>,
    pub data: DataConfig,
    pub estimate: EstimateConfig,
    pub inference: InferenceConfig,
    pub diagnostics: DiagnosticsConfig,
    pub screening: ScreeningConfig,
    pub simulate: SimulateConfig,
}

/// A parsed configuration with its hash and the directory relative paths
/// resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn parse_override(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `MOSC_A__B=value` pairs to the table; pairs are applied in name order.
pub fn apply_overrides(table: &mut toml::Table, vars: &[(String, String)]) -> CliResult<Vec<String>> {
    let mut vars: Vec<&(String, String)> = vars
        .iter()
        .filter(|(k, _)| k.starts_with("MOSC_") && !FLAG_VARS.contains(&k.as_str()))
        .collect();
    vars.sort();
    let mut applied = Vec::new();
    for (k, v) in vars {
        let path: Vec<String> = k["MOSC_".len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::config(format!("malformed override variable {k}")));
        }
        let mut cur = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| CliError::config(format!("{k}: `{seg}` is not a table")))?;
        }
        cur.insert(path[path.len() - 1].clone(), parse_override(v));
        applied.push(path.join("."));
    }
    Ok(applied)
}

pub fn hash_config(config: &RunConfig) -> CliResult<String> {
    let v = serde_json::to_value(config).map_err(|e| CliError::config(e.to_string()))?;
    let digest = Sha256::digest(crate::output::canonical_json(&v).as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads the TOML file (or starts empty), applies env overrides, parses.
pub fn load(path: Option<&Path>, env: &[(String, String)]) -> CliResult<LoadedConfig> {
    let (mut table, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let t: toml::Table = text.parse().map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            (t, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::from(".")),
    };
    apply_overrides(&mut table, env)?;
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    let hash = hash_config(&config)?;
    Ok(LoadedConfig { config, hash, base_dir })
}

impl LoadedConfig {
    /// Checks what every data-driven command needs: files exist, treated and
    /// cutoff are set, outcome specs are sane and per-capita/share outcomes
    /// have their auxiliary inputs.
    pub fn validate_data(&self) -> CliResult<()> {
        let c = &self.config;
        if c.treated.is_none() {
            return Err(CliError::config("`treated` is required"));
        }
        if c.cutoff.is_none() {
            return Err(CliError::config("`cutoff` is required"));
        }
        if c.data.panel.is_none() {
            return Err(CliError::config("`data.panel` is required"));
        }
        let mut files: Vec<(&str, &PathBuf)> = Vec::new();
        if let Some(p) = &c.data.panel {
            files.push(("data.panel", p));
        }
        if let Some(p) = &c.data.population {
            files.push(("data.population", p));
        }
        if let Some(p) = &c.data.features {
            files.push(("data.features", p));
        }
        if let Some(p) = &c.data.shares {
            files.push(("data.shares", p));
        }
        for p in c.data.totals.values() {
            files.push(("data.totals", p));
        }
        for (what, p) in files {
            if !self.resolve(p).is_file() {
                return Err(CliError::config(format!("{what}: file {} does not exist", p.display())));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &c.outcomes {
            OutcomeSpec::new(o.name.clone(), o.sign, o.kind)?;
            if !seen.insert(&o.name) {
                return Err(CliError::config(format!("outcome `{}` listed twice", o.name)));
            }
            match o.kind {
                OutcomeKind::PerCapita if c.data.population.is_none() => {
                    return Err(CliError::config(format!(
                        "outcome `{}` is per_capita but no data.population file is given",
                        o.name
                    )))
                }
                OutcomeKind::Share if !c.data.totals.contains_key(&o.name) => {
                    return Err(CliError::config(format!(
                        "outcome `{}` is a share but data.totals has no entry for it",
                        o.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut t: toml::Table = "treated = \"a\"\n[estimate]\nnu = 0.2\n".parse().unwrap();
        let vars = vec![
            ("MOSC_ESTIMATE__NU".to_string(), "0.7".to_string()),
            ("MOSC_TREATED".to_string(), "Metro City".to_string()),
            ("MOSC_OUT".to_string(), "ignored".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let applied = apply_overrides(&mut t, &vars).unwrap();
        assert_eq!(applied, vec!["estimate.nu", "treated"]);
        let c: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.estimate.nu, NuSetting::Fixed(0.7));
        assert_eq!(c.treated.as_deref(), Some("Metro City"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(hash_config(&a).unwrap(), hash_config(&b).unwrap());
        b.seed = 1;
        assert_ne!(hash_config(&a).unwrap(), hash_config(&b).unwrap());
        assert_eq!(hash_config(&a).unwrap().len(), 64);
    }

    #[test]
    fn nu_settings() {
        assert_eq!(NuSetting::default().choice().unwrap(), NuChoice::Auto);
        assert!(NuSetting::Fixed(1.5).choice().is_err());
        assert!(NuSetting::Named("x".into()).choice().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let t: toml::Table = "[estimate]\nestimatorz = []\n".parse().unwrap();
        assert!(toml::Value::Table(t).try_into::<RunConfig>().is_err());
    }
}
