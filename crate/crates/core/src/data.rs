//! Scaling, chronological splitting and sliding-window batching.
//!
//! Feature matrices are row-per-feature: `features[f][t]` is feature `f` at
//! hour `t`. Batch inputs are laid out sample-major, then feature, then time,
//! matching an `(samples x features x window)` tensor.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 24;
pub const DEFAULT_HORIZON: usize = 24;

/// Fraction boundaries of the train/validation/test split.
pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;

/// Per-feature min-max statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    pub fn feature_count(&self) -> usize {
        self.min.len()
    }

    /// Features whose training range is degenerate; they scale to zero.
    pub fn constant_features(&self) -> Vec<usize> {
        (0..self.min.len())
            .filter(|&f| self.max[f] <= self.min[f])
            .collect()
    }

    #[inline]
    pub fn scale(&self, feature: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn inverse(&self, feature: usize, s: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            s * (hi - lo) + lo
        } else {
            lo
        }
    }

    pub fn apply(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features
            .iter()
            .enumerate()
            .map(|(f, row)| row.iter().map(|&x| self.scale(f, x)).collect())
            .collect()
    }
}

/// Chronological 60/20/20 split points `(train_end, val_end)` over `len` hours.
pub fn split_bounds(len: usize) -> (usize, usize) {
    let train_end = (len as f64 * TRAIN_FRACTION) as usize;
    let val_end = (len as f64 * (TRAIN_FRACTION + VAL_FRACTION)) as usize;
    (train_end, val_end)
}

/// Fit per-feature min/max on hours `[0, train_end)` and scale everything.
pub fn fit_apply_scaler(
    features: &[Vec<f64>],
    train_end: usize,
) -> Result<(ScalerParams, Vec<Vec<f64>>)> {
    if train_end == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut min = Vec::with_capacity(features.len());
    let mut max = Vec::with_capacity(features.len());
    for row in features {
        if row.len() < train_end {
            return Err(Error::Data(format!(
                "feature row has {} hours, training split needs {train_end}",
                row.len()
            )));
        }
        let train = &row[..train_end];
        min.push(train.iter().cloned().fold(f64::INFINITY, f64::min));
        max.push(train.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let params = ScalerParams { min, max };
    let scaled = params.apply(features);
    Ok((params, scaled))
}

/// Model-ready windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub features: usize,
    pub window: usize,
    pub horizon: usize,
    /// `samples x features x window`.
    pub inputs: Vec<f64>,
    /// `samples x horizon`.
    pub targets: Vec<f64>,
    /// Timeline index of each sample's first target hour.
    pub target_start: Vec<usize>,
}

impl SequenceBatch {
    pub fn empty(features: usize, window: usize, horizon: usize) -> Self {
        Self {
            features,
            window,
            horizon,
            inputs: Vec::new(),
            targets: Vec::new(),
            target_start: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.target_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_start.is_empty()
    }

    pub fn input(&self, sample: usize) -> &[f64] {
        let n = self.features * self.window;
        &self.inputs[sample * n..(sample + 1) * n]
    }

    pub fn target(&self, sample: usize) -> &[f64] {
        &self.targets[sample * self.horizon..(sample + 1) * self.horizon]
    }

    pub fn push(&mut self, input: &[f64], target: &[f64], target_start: usize) {
        debug_assert_eq!(input.len(), self.features * self.window);
        debug_assert_eq!(target.len(), self.horizon);
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
        self.target_start.push(target_start);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.features, self.window, self.horizon);
        for &i in indices {
            out.push(self.input(i), self.target(i), self.target_start[i]);
        }
        out
    }

    /// Check dimensions and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        crate::error::shape("batch inputs", m * self.features * self.window, self.inputs.len())?;
        crate::error::shape("batch targets", m * self.horizon, self.targets.len())?;
        if self.inputs.iter().chain(&self.targets).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence batch".into()));
        }
        Ok(())
    }
}

/// Window layout for [`split_and_window`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Row of the feature matrix used as the forecast target.
    pub target_feature: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            horizon: DEFAULT_HORIZON,
            stride: 1,
            target_feature: 0,
        }
    }
}

/// Number of stride-1 windows that fit in a split of `len` hours.
pub fn window_count(len: usize, window: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(window + horizon)
}

/// Windows taken from hours `[start, end)` only.
///
/// `exclude_target[t]` marks hours that may not appear in a target (for
/// example interpolated readings); windows whose target covers one are
/// skipped.
pub fn window_range(
    scaled: &[Vec<f64>],
    start: usize,
    end: usize,
    spec: &WindowSpec,
    exclude_target: Option<&[bool]>,
) -> SequenceBatch {
    let features = scaled.len();
    let mut batch = SequenceBatch::empty(features, spec.window, spec.horizon);
    let stride = spec.stride.max(1);
    let mut input = alloc::vec![0.0; features * spec.window];
    let mut s = start;
    while s + spec.window + spec.horizon <= end {
        let t0 = s + spec.window;
        let excluded = exclude_target
            .map(|mask| mask[t0..t0 + spec.horizon].iter().any(|&b| b))
            .unwrap_or(false);
        if !excluded {
            for (f, row) in scaled.iter().enumerate() {
                input[f * spec.window..(f + 1) * spec.window].copy_from_slice(&row[s..t0]);
            }
            let target = &scaled[spec.target_feature][t0..t0 + spec.horizon];
            batch.push(&input, target, t0);
        }
        s += stride;
    }
    batch
}

/// Train, validation and test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBatches {
    pub train: SequenceBatch,
    pub val: SequenceBatch,
    pub test: SequenceBatch,
}

/// Chronological 60/20/20 split followed by per-split windowing; windows
/// never straddle a split boundary.
pub fn split_and_window(
    scaled: &[Vec<f64>],
    spec: &WindowSpec,
    exclude_target: Option<&[bool]>,
) -> Result<SplitBatches> {
    let len = scaled.first().map(|r| r.len()).unwrap_or(0);
    if spec.target_feature >= scaled.len() {
        return Err(Error::Data(format!(
            "target feature {} out of {} features",
            spec.target_feature,
            scaled.len()
        )));
    }
    let (train_end, val_end) = split_bounds(len);
    let minimum = spec.window + spec.horizon;
    let names = ["train", "validation", "test"];
    let ranges = [(0, train_end), (train_end, val_end), (val_end, len)];
    for (name, (a, b)) in names.iter().zip(ranges) {
        if b - a < minimum {
            return Err(Error::Data(format!(
                "{name} split has {} hours; at least {minimum} are needed for one window \
                 (series of at least {} hours)",
                b - a,
                minimum_series_len(minimum)
            )));
        }
    }
    let mut out = ranges
        .iter()
        .map(|&(a, b)| window_range(scaled, a, b, spec, exclude_target));
    let train = out.next().unwrap();
    let val = out.next().unwrap();
    let test = out.next().unwrap();
    for (name, b) in names.iter().zip([&train, &val, &test]) {
        if b.is_empty() {
            return Err(Error::Data(format!("{name} split produced no usable windows")));
        }
    }
    Ok(SplitBatches { train, val, test })
}

/// Smallest series whose every split holds `per_split` hours.
fn minimum_series_len(per_split: usize) -> usize {
    let mut len = per_split;
    loop {
        let (a, b) = split_bounds(len);
        if a >= per_split && b - a >= per_split && len - b >= per_split {
            return len;
        }
        len += 1;
    }
}

/// Naive forecast repeating the last `horizon` observed hours of the target feature.
pub fn persistence_forecast(batch: &SequenceBatch, target_feature: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len() * batch.horizon);
    for s in 0..batch.len() {
        let x = batch.input(s);
        let row = &x[target_feature * batch.window..(target_feature + 1) * batch.window];
        for q in 0..batch.horizon {
            let back = batch.horizon - q;
            let idx = if back <= batch.window { batch.window - back } else { q % batch.window };
            out.push(row[idx]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp(len: usize, features: usize) -> Vec<Vec<f64>> {
        (0..features)
            .map(|f| (0..len).map(|t| (t * (f + 1)) as f64).collect())
            .collect()
    }

    #[test]
    fn scaler_midpoint_and_extrapolation() {
        let s = ScalerParams {
            min: vec![10.0],
            max: vec![30.0],
        };
        assert_eq!(s.scale(0, 20.0), 0.5);
        assert!(s.scale(0, 5.0) < 0.0);
        assert!((s.inverse(0, s.scale(0, 17.3)) - 17.3).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let feats = vec![vec![3.0; 10], (0..10).map(|x| x as f64).collect()];
        let (p, scaled) = fit_apply_scaler(&feats, 6).unwrap();
        assert_eq!(p.constant_features(), vec![0]);
        assert!(scaled[0].iter().all(|&v| v == 0.0));
        assert_eq!(scaled[1][5], 1.0);
        assert!(scaled[1][9] > 1.0);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(100, 24, 24), 53);
        assert_eq!(window_count(47, 24, 24), 0);
        assert_eq!(window_count(48, 24, 24), 1);
        let b = window_range(&ramp(100, 2), 0, 100, &WindowSpec::default(), None);
        assert_eq!(b.len(), 53);
        for k in 0..b.len() - 1 {
            assert_eq!(b.target_start[k + 1], b.target_start[k] + 1);
            assert_eq!(b.input(k + 1)[0], b.input(k)[0] + 1.0);
        }
    }

    #[test]
    fn short_split_rejected() {
        let err = split_and_window(&ramp(200, 1), &WindowSpec::default(), None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn splits_do_not_straddle() {
        let len = 400;
        let b = split_and_window(&ramp(len, 1), &WindowSpec::default(), None).unwrap();
        let (te, ve) = split_bounds(len);
        assert_eq!(b.train.len(), window_count(te, 24, 24));
        assert_eq!(b.val.len(), window_count(ve - te, 24, 24));
        assert_eq!(b.test.len(), window_count(len - ve, 24, 24));
        assert!(b.train.target_start.iter().all(|&t| t + 24 <= te));
        assert!(b.val.target_start.iter().all(|&t| t >= te + 24 && t + 24 <= ve));
    }

    #[test]
    fn excluded_targets_drop_windows() {
        let feats = ramp(60, 1);
        let mut mask = vec![false; 60];
        mask[50] = true;
        let b = window_range(&feats, 0, 60, &WindowSpec::default(), Some(&mask));
        // target ranges [t0, t0 + 24) containing hour 50 are t0 in 27..=36 minus windows that do not exist
        assert!(b.target_start.iter().all(|&t0| !(t0..t0 + 24).contains(&50)));
        assert_eq!(b.len(), window_count(60, 24, 24) - 10);
    }

    #[test]
    fn persistence_repeats_last_day() {
        let b = window_range(&ramp(48, 1), 0, 48, &WindowSpec::default(), None);
        let f = persistence_forecast(&b, 0);
        assert_eq!(f, b.input(0).to_vec());
    }
}
