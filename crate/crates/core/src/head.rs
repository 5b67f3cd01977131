//! Affine forecast head shared by KARN and the baselines.

use core::fmt;
use core::str::FromStr;

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How hidden states become a forecast vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// `y = W h_n + b` with `W` of shape `horizon x hidden`.
    #[default]
    LastState,
    /// One scalar output per step, `y_t = w . h_t + b`; the forecast is the
    /// outputs of the last `horizon` steps. Needs `window >= horizon`.
    PerStep,
}

impl HeadMode {
    pub fn weight_shape(self, hidden: usize, horizon: usize) -> [usize; 2] {
        match self {
            HeadMode::LastState => [horizon, hidden],
            HeadMode::PerStep => [1, hidden],
        }
    }

    pub fn bias_len(self, horizon: usize) -> usize {
        match self {
            HeadMode::LastState => horizon,
            HeadMode::PerStep => 1,
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::LastState => "last-state",
            HeadMode::PerStep => "per-step",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-state" => Ok(HeadMode::LastState),
            "per-step" => Ok(HeadMode::PerStep),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

/// `hs` holds `window + 1` hidden states (`h_0 .. h_n`) of width `hidden`.
pub(crate) fn head_forward(
    mode: HeadMode,
    weight: &[f64],
    bias: &[f64],
    hs: &[f64],
    hidden: usize,
    window: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    match mode {
        HeadMode::LastState => {
            let h = &hs[window * hidden..(window + 1) * hidden];
            Ok((0..horizon)
                .map(|q| bias[q] + dot(&weight[q * hidden..(q + 1) * hidden], h))
                .collect())
        }
        HeadMode::PerStep => {
            if window < horizon {
                return Err(Error::Config(format!(
                    "per-step head needs window ({window}) >= horizon ({horizon})"
                )));
            }
            Ok((0..horizon)
                .map(|q| {
                    let t = window - horizon + q + 1;
                    bias[0] + dot(weight, &hs[t * hidden..(t + 1) * hidden])
                })
                .collect())
        }
    }
}

/// Accumulates head gradients and writes `dL/dh_t` into `dhs` (same layout as `hs`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward(
    mode: HeadMode,
    weight: &[f64],
    hs: &[f64],
    hidden: usize,
    window: usize,
    d_forecast: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    dhs: &mut [f64],
) {
    let horizon = d_forecast.len();
    for (q, &dy) in d_forecast.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        let (t, row, b) = match mode {
            HeadMode::LastState => (window, q, q),
            HeadMode::PerStep => (window - horizon + q + 1, 0, 0),
        };
        d_bias[b] += dy;
        let h = &hs[t * hidden..(t + 1) * hidden];
        let w = &weight[row * hidden..(row + 1) * hidden];
        let dw = &mut d_weight[row * hidden..(row + 1) * hidden];
        let dh = &mut dhs[t * hidden..(t + 1) * hidden];
        for m in 0..hidden {
            dw[m] += dy * h[m];
            dh[m] += dy * w[m];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
