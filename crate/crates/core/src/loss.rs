//! Training objectives and evaluation metrics.

use core::fmt;
use core::str::FromStr;

use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mae,
    Mse,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::Mae, Objective::Mse];

    pub fn loss(self, pred: &[f64], target: &[f64]) -> Result<f64> {
        match self {
            Objective::Mae => loss_mae(pred, target),
            Objective::Mse => loss_mse(pred, target),
        }
    }

    /// Derivative of the summed per-element loss term for error `e = pred - target`,
    /// before division by the element count.
    #[inline]
    pub(crate) fn element_grad(self, e: f64) -> f64 {
        match self {
            Objective::Mse => 2.0 * e,
            Objective::Mae => {
                if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn element_loss(self, e: f64) -> f64 {
        match self {
            Objective::Mse => e * e,
            Objective::Mae => libm::fabs(e),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mae => "mae",
            Objective::Mse => "mse",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Objective::Mae),
            "mse" => Ok(Objective::Mse),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty(String::from("loss input")));
    }
    crate::error::shape("loss target", pred.len(), target.len())
}

/// Mean squared error over every element.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute error over every element.
pub fn loss_mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| libm::fabs(p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// MAE, RMSE and SMAPE (percent) of a forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub smape: f64,
}

/// Evaluate all three metrics. A SMAPE term with `|y| + |ŷ| = 0` counts as zero.
/// Empty input yields all zeros.
pub fn metric_suite(pred: &[f64], target: &[f64]) -> Metrics {
    let m = pred.len().min(target.len());
    if m == 0 {
        return Metrics {
            mae: 0.0,
            rmse: 0.0,
            smape: 0.0,
        };
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut sym = 0.0;
    for (&yhat, &y) in pred.iter().zip(target) {
        let e = libm::fabs(y - yhat);
        abs += e;
        sq += e * e;
        let denom = libm::fabs(y) + libm::fabs(yhat);
        if denom > 0.0 {
            sym += 2.0 * e / denom;
        }
    }
    let m = m as f64;
    Metrics {
        mae: abs / m,
        rmse: libm::sqrt(sq / m),
        smape: 100.0 * sym / m,
    }
}
