//! Command implementations shared by the binary and the tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use karn_core::data::SequenceBatch;
use karn_core::grad::{check_gradients, BatchObjective, GradientReport, FD_STEP};
use karn_core::loss::{Metrics, Objective};
use karn_core::model::build_model;
use karn_core::search::SearchSpace;
use karn_core::train::{evaluate, evaluate_persistence, train_and_report, MetricsReport, TrainConfig};
use karn_core::{Model, ModelFamily, Recurrent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, RunConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::prepare::{prepare_series, Prepared};
use crate::report::{forecast_svg, write_curve, write_forecast, write_report};
use crate::search::{checkpoint_for, run_search, SearchSummary};
use crate::series::ingest_csv;
use crate::synth::{generate, write_csv_file, Profile, SynthConfig, SynthSeries};

pub fn gen_synthetic(profile: Profile, hours: usize, seed: u64, output: &Path) -> Result<SynthSeries> {
    let g = generate(&SynthConfig::new(profile, hours, seed))?;
    write_csv_file(&g.series, output)?;
    Ok(g)
}

/// Ingest, window and cache the configured CSV.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no input CSV: set `data` or pass --data".into()))?;
    let series = ingest_csv(data, &cfg.schema())?;
    let mut prep = prepare_series(&series, &cfg.feature_set()?, cfg.window, cfg.horizon, cfg.stride)?;
    prep.write(&cfg.prepared_dir())?;
    Ok(prep)
}

pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let prep = Prepared::load(&cfg.prepared_dir())?;
    let want = cfg.feature_set()?.names();
    if prep.manifest.features != want || prep.manifest.window != cfg.window || prep.manifest.horizon != cfg.horizon {
        return Err(Error::Data(format!(
            "prepared data has features [{}] window {} horizon {}, config asks for [{}] window {} horizon {}; re-run `karn prepare`",
            prep.manifest.features.join(", "),
            prep.manifest.window,
            prep.manifest.horizon,
            want.join(", "),
            cfg.window,
            cfg.horizon
        )));
    }
    Ok(prep)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    pub persistence: Metrics,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn run_dir(out: &Path, config: &TrainConfig) -> PathBuf {
    out.join("runs").join(format!("{}-{}", config.family, &config_hash(config)[..12]))
}

/// Fit one model; write checkpoint, report, loss curve and test forecasts.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let prep = load_prepared(cfg)?;
    let config = cfg.train_config(cfg.model);
    let hash = config_hash(&config);
    let target = prep.target_index();
    let started = Instant::now();
    let model = build_model(&config, prep.raw.len(), prep.manifest.horizon)?;
    let (model, mut report) = train_and_report(
        model,
        &prep.splits.train,
        &prep.splits.val,
        &prep.scaler,
        target,
        &config,
        &config.family.to_string(),
        prep.dataset_id(),
        &hash,
    )?;
    let test = evaluate(&model, &prep.splits.test, &prep.scaler, target)?;
    report.test = Some(test.metrics);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    report.check()?;
    let persistence = evaluate_persistence(&prep.splits.test, &prep.scaler, target).metrics;

    let dir = run_dir(&cfg.out_dir(), &config);
    fsutil::ensure_dir(&dir)?;
    let checkpoint = dir.join("model.ckpt");
    checkpoint_for(model, &prep, &config).save(&checkpoint)?;
    write_report(&dir.join("report.json"), &report)?;
    write_curve(&dir.join("curve.csv"), &report.curve)?;
    write_forecast(
        &dir.join("forecast_test.csv"),
        &test,
        &prep.splits.test.target_start,
        prep.manifest.horizon,
        &prep,
    )?;
    Ok(TrainOutcome {
        report,
        persistence,
        dir,
        checkpoint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Metrics of a checkpoint on one split of a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub checkpoint: String,
    pub family: ModelFamily,
    pub config_hash: String,
    pub dataset_id: String,
    pub split: Split,
    pub windows: usize,
    pub forecast_hours: usize,
    pub metrics: Metrics,
    pub persistence: Metrics,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: EvaluationReport,
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Inverse-scaled forecasts of `checkpoint` on `split`, re-windowed with the
/// checkpoint's own scaler.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    prep: &Prepared,
    split: Split,
    out_dir: &Path,
    svg: bool,
) -> Result<EvaluateOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&prep.manifest.features, prep.manifest.window, prep.manifest.horizon)?;
    let splits = prep.rescaled(&ckpt.scaler)?;
    let batch = match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    };
    let target = ckpt.target_index()?;
    let eval = evaluate(&ckpt.model, batch, &ckpt.scaler, target)?;
    let persistence = evaluate_persistence(batch, &ckpt.scaler, target).metrics;
    fsutil::ensure_dir(out_dir)?;
    let csv = out_dir.join(format!("forecast_{}.csv", split.name()));
    write_forecast(&csv, &eval, &batch.target_start, batch.horizon, prep)?;
    let report = EvaluationReport {
        checkpoint: checkpoint.display().to_string(),
        family: ckpt.model.family(),
        config_hash: ckpt.config_hash.clone(),
        dataset_id: prep.dataset_id().into(),
        split,
        windows: batch.len(),
        forecast_hours: eval.forecast.len(),
        metrics: eval.metrics,
        persistence,
    };
    fsutil::write_json(&out_dir.join(format!("evaluation_{}.json", split.name())), &report)?;
    let svg = if svg {
        let h = batch.horizon;
        let lead1 = |v: &[f64]| v.iter().step_by(h).cloned().collect::<Vec<_>>();
        let path = out_dir.join(format!("forecast_{}.svg", split.name()));
        let title = format!("{} on {} ({})", ckpt.model.family(), prep.dataset_id(), split.name());
        fsutil::write_atomic(&path, forecast_svg(&lead1(&eval.actual), &lead1(&eval.forecast), &title).as_bytes())?;
        Some(path)
    } else {
        None
    };
    Ok(EvaluateOutcome { report, csv, svg })
}

/// Every configuration searched for `cfg`, in order.
pub fn search_configs(cfg: &RunConfig) -> Result<Vec<TrainConfig>> {
    let mut out = Vec::new();
    for &family in &cfg.search_models {
        let space = SearchSpace::table(family);
        out.extend(space.configs(&cfg.train_config(family), None, cfg.seed)?);
    }
    if let Some(b) = cfg.budget {
        if b < out.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = rand::seq::index::sample(&mut rng, out.len(), b).into_vec();
            idx.sort_unstable();
            out = idx.into_iter().map(|i| out[i].clone()).collect();
        }
    }
    Ok(out)
}

pub fn search(cfg: &RunConfig) -> Result<SearchSummary> {
    let prep = load_prepared(cfg)?;
    let configs = search_configs(cfg)?;
    run_search(&configs, &prep, &cfg.out_dir().join("search"), cfg.jobs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub from: usize,
    pub to: usize,
    /// Largest absolute change of the spline-branch output on the probe batch.
    pub max_deviation: f64,
    pub fallback_inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendReport {
    pub layers: Vec<LayerDeviation>,
    pub params_before: usize,
    pub params_after: usize,
    pub max_forecast_deviation: f64,
    pub probe_windows: usize,
}

/// At most `limit` evenly spaced windows.
pub fn probe_subset(batch: &SequenceBatch, limit: usize) -> SequenceBatch {
    if batch.len() <= limit {
        return batch.clone();
    }
    let idx: Vec<usize> = (0..limit).map(|k| k * batch.len() / limit).collect();
    batch.subset(&idx)
}

pub const PROBE_WINDOWS: usize = 256;

/// Refine every KARN layer to `grid_points` intervals, reporting how far each
/// layer's spline branch moved on the probe batch.
pub fn extend_grid(checkpoint: &Path, grid_points: usize, prep: &Prepared, output: &Path) -> Result<ExtendReport> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&prep.manifest.features, prep.manifest.window, prep.manifest.horizon)?;
    let splits = prep.rescaled(&ckpt.scaler)?;
    let probe = probe_subset(&splits.train, PROBE_WINDOWS);
    let before_forecast = karn_core::grad::forward(&ckpt.model, &probe)?;
    let params_before = ckpt.model.params().scalar_count();
    let family = ckpt.model.family();
    let net = ckpt
        .model
        .as_karn_mut()
        .ok_or_else(|| Error::Config(format!("{family} checkpoints have no spline grid to extend")))?;
    let mut layers = Vec::new();
    for l in 0..net.layers().len() {
        let from = net.layers()[l].grid.interior_count();
        if grid_points == from {
            return Err(Error::Config(format!("layer {l} already has {from} grid intervals; nothing to extend")));
        }
        let before = net.spline_branch_outputs(l, &probe)?;
        let ext = net.extend_network_grid(l, grid_points, &probe)?;
        let after = net.spline_branch_outputs(l, &probe)?;
        let max_deviation = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        layers.push(LayerDeviation {
            layer: l,
            from,
            to: grid_points,
            max_deviation,
            fallback_inputs: ext.fallback_inputs,
        });
    }
    if let Some(c) = ckpt.config.as_mut() {
        c.grid_points = Some(grid_points);
        c.grid_extension_epoch = None;
    }
    let after_forecast = karn_core::grad::forward(&ckpt.model, &probe)?;
    let report = ExtendReport {
        layers,
        params_before,
        params_after: ckpt.model.params().scalar_count(),
        max_forecast_deviation: before_forecast
            .iter()
            .zip(&after_forecast)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        probe_windows: probe.len(),
    };
    ckpt.save(output)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradientCheckOutcome {
    pub family: ModelFamily,
    pub seed: u64,
    pub report: GradientReport,
}

/// Small random problem shaped like the default pipeline.
pub fn gradient_problem(family: ModelFamily, seed: u64) -> Result<(Model, SequenceBatch)> {
    let (features, window, horizon, samples) = (5, 6, 4, 3);
    let mut cfg = TrainConfig::for_family(family);
    cfg.hidden_size = 8;
    cfg.num_layers = 2;
    cfg.seed = seed;
    let mut model = build_model(&cfg, features, horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for t in 0..model.params().len() {
        for v in model.params_mut().data_mut(t) {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    model.params_mut().sync_shared();
    let mut batch = SequenceBatch::empty(features, window, horizon);
    for s in 0..samples {
        let x: Vec<f64> = (0..features * window).map(|_| rng.random_range(-0.2..1.2)).collect();
        let y: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..1.0)).collect();
        batch.push(&x, &y, s);
    }
    Ok((model, batch))
}

pub fn gradient_check(family: ModelFamily, seed: u64, objective: Objective, tolerance: f64) -> Result<GradientCheckOutcome> {
    let (model, batch) = gradient_problem(family, seed)?;
    let problem = BatchObjective {
        model,
        batch: &batch,
        objective,
    };
    let report = check_gradients(&problem, FD_STEP, tolerance)?;
    Ok(GradientCheckOutcome { family, seed, report })
}
