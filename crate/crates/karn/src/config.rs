//! Flat TOML run configuration.
//!
//! Every key is optional; unknown keys are rejected. Command-line flags and
//! `--set key=value` pairs override file values.

use std::path::{Path, PathBuf};

use karn_core::head::HeadMode;
use karn_core::loss::Objective;
use karn_core::optim::OptimizerKind;
use karn_core::train::TrainConfig;
use karn_core::ModelFamily;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::fsutil::sha256_hex;
use crate::series::CsvSchema;

pub const OUT_ENV: &str = "KARN_OUT";
pub const DEFAULT_OUT: &str = "karn-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input CSV.
    pub data: Option<PathBuf>,
    /// Prepared-data directory; defaults to `<out>/prepared`.
    pub prepared: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub timestamp_column: String,
    pub load_column: String,
    pub temperature_column: String,
    pub features: Vec<String>,
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,

    pub model: ModelFamily,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    pub spline_degree: usize,
    pub grid_points: usize,
    pub grid_range_lo: f64,
    pub grid_range_hi: f64,
    pub head: HeadMode,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_plateau_factor: f64,
    pub lr_plateau_patience: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grid_extension_epoch: Option<usize>,
    pub initial_grid_points: usize,
    /// Reject sizes outside the published search domains.
    pub strict_domains: bool,

    /// Cap on search trials; all configurations when absent.
    pub budget: Option<usize>,
    /// Worker threads for search; all cores when absent.
    pub jobs: Option<usize>,
    /// Model families covered by `search`.
    pub search_models: Vec<ModelFamily>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let k = TrainConfig::for_family(ModelFamily::Karn);
        let schema = CsvSchema::default();
        Self {
            data: None,
            prepared: None,
            out: None,
            timestamp_column: schema.timestamp,
            load_column: schema.load,
            temperature_column: schema.temperature,
            features: FeatureSet::default().names(),
            window: karn_core::data::DEFAULT_WINDOW,
            horizon: karn_core::data::DEFAULT_HORIZON,
            stride: 1,
            model: ModelFamily::Karn,
            hidden_size: k.hidden_size,
            num_layers: k.num_layers,
            optimizer: k.optimizer,
            objective: k.objective,
            spline_degree: k.spline_degree.unwrap(),
            grid_points: k.grid_points.unwrap(),
            grid_range_lo: k.grid_range.0,
            grid_range_hi: k.grid_range.1,
            head: k.head,
            learning_rate: k.learning_rate,
            max_epochs: k.max_epochs,
            early_stop_patience: k.early_stop_patience,
            lr_plateau_factor: k.lr_plateau_factor,
            lr_plateau_patience: k.lr_plateau_patience,
            lr_floor: k.lr_floor,
            batch_size: k.batch_size,
            seed: k.seed,
            grid_extension_epoch: None,
            initial_grid_points: k.initial_grid_points,
            strict_domains: true,
            budget: None,
            jobs: None,
            search_models: vec![ModelFamily::Karn],
        }
    }
}

/// Parse `key=value`; the value is read as a TOML value, falling back to a bare string.
pub fn parse_override(pair: &str) -> Result<(String, toml::Value)> {
    let (k, v) = pair
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{pair}` is not of the form key=value")))?;
    let key = k.trim().to_string();
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((key, value))
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
    }

    /// File (if any) merged with overrides, then validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            timestamp: self.timestamp_column.clone(),
            load: self.load_column.clone(),
            temperature: self.temperature_column.clone(),
        }
    }

    pub fn feature_set(&self) -> Result<FeatureSet> {
        FeatureSet::parse_list(&self.features)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.prepared.clone().unwrap_or_else(|| self.out_dir().join("prepared"))
    }

    /// Training configuration for `family`; spline keys apply to KARN only.
    pub fn train_config(&self, family: ModelFamily) -> TrainConfig {
        let karn = family.has_splines();
        TrainConfig {
            family,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            optimizer: self.optimizer,
            objective: self.objective,
            spline_degree: karn.then_some(self.spline_degree),
            grid_points: karn.then_some(self.grid_points),
            grid_range: (self.grid_range_lo, self.grid_range_hi),
            head: self.head,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            lr_plateau_factor: self.lr_plateau_factor,
            lr_plateau_patience: self.lr_plateau_patience,
            lr_floor: self.lr_floor,
            batch_size: self.batch_size,
            seed: self.seed,
            grid_extension_epoch: if karn { self.grid_extension_epoch } else { None },
            initial_grid_points: self.initial_grid_points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_set()?;
        if self.window == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config("window, horizon and stride must be positive".into()));
        }
        if self.head == HeadMode::PerStep && self.window < self.horizon {
            return Err(Error::Config("head = \"per-step\" needs window >= horizon".into()));
        }
        if self.budget == Some(0) || self.jobs == Some(0) {
            return Err(Error::Config("budget and jobs must be positive".into()));
        }
        if self.search_models.is_empty() {
            return Err(Error::Config("search_models must name at least one family".into()));
        }
        let cfg = self.train_config(self.model);
        if self.strict_domains {
            cfg.validate()?;
        } else {
            cfg.validate_protocol()?;
        }
        Ok(())
    }
}

/// SHA-256 of the canonical rendering of a training configuration.
pub fn config_hash(config: &TrainConfig) -> String {
    sha256_hex(config.canonical().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn file_and_overrides() {
        let text = "model = \"gru\"\nhidden_size = 128\nfeatures = [\"load\", \"day_of_month\"]\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        let o = [parse_override("hidden_size=256").unwrap(), parse_override("objective=mae").unwrap()];
        let c = RunConfig::load(Some(&p), &o).unwrap();
        assert_eq!(c.model, ModelFamily::Gru);
        assert_eq!(c.hidden_size, 256);
        assert_eq!(c.objective, Objective::Mae);
        assert_eq!(c.features.len(), 2);
        let t = c.train_config(ModelFamily::Gru);
        assert!(t.spline_degree.is_none() && t.grid_points.is_none());
    }

    #[test]
    fn unknown_and_out_of_domain_rejected() {
        assert!(RunConfig::from_toml("hiden_size = 3", Path::new("x")).is_err());
        let bad = [parse_override("hidden_size=100").unwrap()];
        assert!(RunConfig::load(None, &bad).is_err());
        let relaxed = [bad[0].clone(), parse_override("strict_domains=false").unwrap()];
        assert!(RunConfig::load(None, &relaxed).is_ok());
        assert!(RunConfig::load(None, &[parse_override("grid_points=15").unwrap()]).is_err());
        assert!(RunConfig::load(None, &[parse_override("features=[\"humidity\"]").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default().train_config(ModelFamily::Karn);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.learning_rate = 2e-3;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
