//! Windowed, scaled splits cached on disk.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta};
use karn_core::data::{split_and_window, split_bounds, fit_apply_scaler, ScalerParams, SequenceBatch, SplitBatches, WindowSpec};
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadWriter};
use crate::error::{Error, Result};
use crate::features::{derive_features, FeatureSet};
use crate::fsutil;
use crate::series::{LoadSeries, TIMESTAMP_FORMAT};

pub const PREPARED_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERIES_FILE: &str = "series.bin";
pub const SPLIT_FILES: [&str; 3] = ["train.bin", "val.bin", "test.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Degenerate on the training split; scales to zero.
    pub constant: bool,
}

/// Data summary written next to the cached splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub source: String,
    pub start: String,
    pub rows: usize,
    pub missing_hours: usize,
    pub features: Vec<String>,
    pub target_feature: String,
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    pub split_hours: SplitCounts,
    pub windows: SplitCounts,
    pub feature_stats: Vec<FeatureStats>,
    /// SHA-256 of each cached file.
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchBody {
    features: usize,
    window: usize,
    horizon: usize,
}

/// Unscaled feature matrix, scaler and windowed splits of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: PrepareManifest,
    pub start: NaiveDateTime,
    /// `features x hours`, unscaled.
    pub raw: Vec<Vec<f64>>,
    /// Hours that may not appear in a target.
    pub excluded: Vec<bool>,
    pub scaler: ScalerParams,
    pub splits: SplitBatches,
}

impl Prepared {
    pub fn target_index(&self) -> usize {
        self.manifest
            .features
            .iter()
            .position(|f| *f == self.manifest.target_feature)
            .unwrap_or(0)
    }

    pub fn spec(&self) -> WindowSpec {
        WindowSpec {
            window: self.manifest.window,
            horizon: self.manifest.horizon,
            stride: self.manifest.stride,
            target_feature: self.target_index(),
        }
    }

    pub fn timestamp(&self, hour: usize) -> NaiveDateTime {
        self.start + TimeDelta::hours(hour as i64)
    }

    /// Re-window the raw features with another scaler, e.g. a checkpoint's.
    pub fn rescaled(&self, scaler: &ScalerParams) -> Result<SplitBatches> {
        if scaler.feature_count() != self.raw.len() {
            return Err(Error::Data(format!(
                "scaler covers {} features, dataset has {}",
                scaler.feature_count(),
                self.raw.len()
            )));
        }
        Ok(split_and_window(&scaler.apply(&self.raw), &self.spec(), Some(&self.excluded))?)
    }

    pub fn dataset_id(&self) -> &str {
        &self.manifest.dataset_id
    }
}

fn dataset_id(series: &LoadSeries, raw: &[Vec<f64>]) -> String {
    let mut bytes = Vec::new();
    for row in raw {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let stem = Path::new(&series.source)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    let stem: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{stem}-{}", &fsutil::sha256_hex(&bytes)[..12])
}

/// Features, training-only scaling, chronological split and windows.
pub fn prepare_series(series: &LoadSeries, set: &FeatureSet, window: usize, horizon: usize, stride: usize) -> Result<Prepared> {
    set.validate()?;
    if window == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("window, horizon and stride must be positive".into()));
    }
    if series.is_empty() {
        return Err(Error::Data(format!("{}: no rows", series.source)));
    }
    let raw = derive_features(series, set);
    let len = series.len();
    let (train_end, val_end) = split_bounds(len);
    let (scaler, scaled) = fit_apply_scaler(&raw, train_end)?;
    let spec = WindowSpec {
        window,
        horizon,
        stride,
        target_feature: set.target_index(),
    };
    let splits = split_and_window(&scaled, &spec, Some(&series.interpolated))
        .map_err(|e| Error::Data(format!("{}: {e}", series.source)))?;
    let names = set.names();
    let constant = scaler.constant_features();
    let feature_stats = raw
        .iter()
        .enumerate()
        .map(|(f, row)| FeatureStats {
            name: names[f].clone(),
            min: row.iter().cloned().fold(f64::INFINITY, f64::min),
            max: row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: row.iter().sum::<f64>() / row.len() as f64,
            constant: constant.contains(&f),
        })
        .collect();
    let manifest = PrepareManifest {
        format_version: PREPARED_VERSION,
        dataset_id: dataset_id(series, &raw),
        source: series.source.clone(),
        start: series.timestamps[0].format(TIMESTAMP_FORMAT).to_string(),
        rows: len,
        missing_hours: series.missing_hours(),
        features: names,
        target_feature: "load".into(),
        window,
        horizon,
        stride,
        split_hours: SplitCounts {
            train: train_end,
            val: val_end - train_end,
            test: len - val_end,
        },
        windows: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        feature_stats,
        digests: BTreeMap::new(),
    };
    Ok(Prepared {
        manifest,
        start: series.timestamps[0],
        raw,
        excluded: series.interpolated.clone(),
        scaler,
        splits,
    })
}

fn batch_bytes(batch: &SequenceBatch) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    let m = batch.len();
    w.push("inputs", &[m, batch.features, batch.window], &batch.inputs);
    w.push("targets", &[m, batch.horizon], &batch.targets);
    w.push_indices("target_start", &batch.target_start);
    let body = BatchBody {
        features: batch.features,
        window: batch.window,
        horizon: batch.horizon,
    };
    container::encode("batch", &body, &w)
}

fn read_batch(path: &Path) -> Result<SequenceBatch> {
    let (body, p): (BatchBody, _) = container::read_file(path, "batch")?;
    let batch = SequenceBatch {
        features: body.features,
        window: body.window,
        horizon: body.horizon,
        inputs: p.get("inputs")?.to_vec(),
        targets: p.get("targets")?.to_vec(),
        target_start: p.indices("target_start")?,
    };
    batch.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(batch)
}

fn series_bytes(prep: &Prepared) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    let (nf, len) = (prep.raw.len(), prep.excluded.len());
    let flat: Vec<f64> = prep.raw.iter().flatten().cloned().collect();
    w.push("raw", &[nf, len], &flat);
    let mask: Vec<f64> = prep.excluded.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    w.push("excluded", &[len], &mask);
    w.push("scaler.min", &[nf], &prep.scaler.min);
    w.push("scaler.max", &[nf], &prep.scaler.max);
    container::encode("series", &(), &w)
}

impl Prepared {
    /// Write the cache; returns the manifest with digests filled in.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        fsutil::ensure_dir(dir)?;
        let mut digests = BTreeMap::new();
        let mut files = vec![(SERIES_FILE, series_bytes(self)?)];
        for (name, b) in SPLIT_FILES.iter().zip([&self.splits.train, &self.splits.val, &self.splits.test]) {
            files.push((name, batch_bytes(b)?));
        }
        for (name, bytes) in files {
            fsutil::write_atomic(&dir.join(name), &bytes)?;
            digests.insert(name.to_string(), fsutil::sha256_hex(&bytes));
        }
        self.manifest.digests = digests;
        fsutil::write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    /// Load a cache written by [`Prepared::write`], verifying digests.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::Data(format!(
                "{}: no prepared data found (run `karn prepare` first)",
                dir.display()
            )));
        }
        let manifest: PrepareManifest = fsutil::read_json(&mpath)?;
        if manifest.format_version != PREPARED_VERSION {
            return Err(Error::format(&mpath, format!("unsupported version {}", manifest.format_version)));
        }
        for (name, digest) in &manifest.digests {
            let path = dir.join(name);
            if fsutil::file_sha256(&path)? != *digest {
                return Err(Error::format(&path, "digest does not match manifest; re-run `karn prepare`"));
            }
        }
        let spath = dir.join(SERIES_FILE);
        let ((), p) = container::read_file(&spath, "series")?;
        let shape = &p.entry("raw")?.shape;
        let (nf, len) = (shape[0], shape[1]);
        if nf != manifest.features.len() || len != manifest.rows {
            return Err(Error::format(&spath, "raw matrix disagrees with manifest"));
        }
        let flat = p.get("raw")?;
        let raw = (0..nf).map(|f| flat[f * len..(f + 1) * len].to_vec()).collect();
        let excluded = p.get("excluded")?.iter().map(|&v| v != 0.0).collect();
        let scaler = ScalerParams {
            min: p.get("scaler.min")?.to_vec(),
            max: p.get("scaler.max")?.to_vec(),
        };
        let mut batches = SPLIT_FILES.iter().map(|n| read_batch(&dir.join(n)));
        let splits = SplitBatches {
            train: batches.next().unwrap()?,
            val: batches.next().unwrap()?,
            test: batches.next().unwrap()?,
        };
        let start = crate::series::parse_timestamp(&manifest.start)
            .ok_or_else(|| Error::format(&mpath, format!("bad start timestamp `{}`", manifest.start)))?;
        Ok(Prepared {
            manifest,
            start,
            raw,
            excluded,
            scaler,
            splits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Profile, SynthConfig};

    fn series(hours: usize) -> LoadSeries {
        generate(&SynthConfig::new(Profile::Clinic, hours, 2)).unwrap().series
    }

    #[test]
    fn summary_counts() {
        let p = prepare_series(&series(1000), &FeatureSet::default(), 24, 24, 1).unwrap();
        assert_eq!(p.manifest.split_hours, SplitCounts { train: 600, val: 200, test: 200 });
        assert_eq!(p.manifest.windows, SplitCounts { train: 553, val: 153, test: 153 });
    }

    #[test]
    fn cache_round_trip_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = prepare_series(&series(600), &FeatureSet::default(), 24, 24, 1).unwrap();
        p.write(dir.path()).unwrap();
        let first = p.manifest.digests.clone();
        let back = Prepared::load(dir.path()).unwrap();
        assert_eq!(back, p);
        let mut again = prepare_series(&series(600), &FeatureSet::default(), 24, 24, 1).unwrap();
        again.write(dir.path()).unwrap();
        assert_eq!(again.manifest.digests, first);
        assert_eq!(back.rescaled(&back.scaler).unwrap(), back.splits);
    }

    #[test]
    fn too_short_states_minimum() {
        let err = prepare_series(&series(100), &FeatureSet::default(), 24, 24, 1).unwrap_err().to_string();
        assert!(err.contains("at least"), "{err}");
    }
}
