//! Model input features derived from a load series.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::series::LoadSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Load,
    Temperature,
    HourOfDay,
    DayOfWeek,
    DayOfYear,
    DayOfMonth,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::Load,
        Feature::Temperature,
        Feature::HourOfDay,
        Feature::DayOfWeek,
        Feature::DayOfYear,
        Feature::DayOfMonth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Load => "load",
            Feature::Temperature => "temperature",
            Feature::HourOfDay => "hour_of_day",
            Feature::DayOfWeek => "day_of_week",
            Feature::DayOfYear => "day_of_year",
            Feature::DayOfMonth => "day_of_month",
        }
    }

    /// Raw ordinal or measured value at hour `t`.
    pub fn value(self, series: &LoadSeries, t: usize) -> f64 {
        let ts = series.timestamps[t];
        match self {
            Feature::Load => series.load[t],
            Feature::Temperature => series.temperature[t],
            Feature::HourOfDay => ts.hour() as f64,
            Feature::DayOfWeek => ts.weekday().num_days_from_monday() as f64,
            Feature::DayOfYear => ts.ordinal() as f64,
            Feature::DayOfMonth => ts.day() as f64,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown feature `{s}` (expected one of {})",
                    Feature::ALL.map(|f| f.name()).join(", ")
                ))
            })
    }
}

/// Ordered feature list; the load must be present since it is the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet(pub Vec<Feature>);

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet(vec![
            Feature::Load,
            Feature::Temperature,
            Feature::HourOfDay,
            Feature::DayOfWeek,
            Feature::DayOfYear,
        ])
    }
}

impl FeatureSet {
    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Self, Error> {
        let set: Vec<Feature> = names.iter().map(|n| n.as_ref().parse()).collect::<Result<_, _>>()?;
        let fs = FeatureSet(set);
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<(), Error> {
        for (k, f) in self.0.iter().enumerate() {
            if self.0[..k].contains(f) {
                return Err(Error::Config(format!("feature `{f}` listed twice")));
            }
        }
        if !self.0.contains(&Feature::Load) {
            return Err(Error::Config("feature set must include `load`".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.0.iter().position(|&f| f == Feature::Load).unwrap_or(0)
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(|f| f.name().to_string()).collect()
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

/// Feature matrix, `features x hours`.
pub fn derive_features(series: &LoadSeries, set: &FeatureSet) -> Vec<Vec<f64>> {
    set.0
        .iter()
        .map(|&f| (0..series.len()).map(|t| f.value(series, t)).collect())
        .collect()
}

pub fn calendar(ts: NaiveDateTime) -> (u32, u32, u32, u32) {
    (ts.hour(), ts.weekday().num_days_from_monday(), ts.ordinal(), ts.day())
}
