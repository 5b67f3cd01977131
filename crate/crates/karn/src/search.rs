//! Parallel, resumable grid search over prepared data.
//!
//! Each trial owns `trials/<config hash>/`; `report.json` is written last and
//! marks the trial complete, so an interrupted search resumes by skipping
//! every hash that already has one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use karn_core::search::{run_trial, select_winner, TrialRecord};
use karn_core::train::{evaluate, TrainConfig};
use karn_core::Model;
use log::{info, warn};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::prepare::Prepared;
use crate::report::{ranking_csv, read_report, write_forecast, write_report};

pub const TRIALS_DIR: &str = "trials";
pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const ERROR_FILE: &str = "error.txt";

#[derive(Debug, Clone)]
pub struct SearchSummary {
    pub trials: Vec<TrialRecord>,
    pub winner: Option<usize>,
    pub ran: usize,
    pub resumed: usize,
    pub out_dir: PathBuf,
}

/// Checkpoint of `model` trained on `prep`.
pub fn checkpoint_for(model: Model, prep: &Prepared, config: &TrainConfig) -> Checkpoint {
    Checkpoint {
        model,
        scaler: prep.scaler.clone(),
        features: prep.manifest.features.clone(),
        target_feature: prep.manifest.target_feature.clone(),
        window: prep.manifest.window,
        config_hash: config_hash(config),
        config: Some(config.clone()),
        dataset_id: prep.dataset_id().into(),
    }
}

pub fn trial_dir(out: &Path, config: &TrainConfig) -> PathBuf {
    out.join(TRIALS_DIR).join(config_hash(config))
}

enum Outcome {
    Done(TrialRecord),
    Resumed(TrialRecord),
}

fn run_one(index: usize, config: &TrainConfig, prep: &Prepared, out: &Path) -> Result<Outcome> {
    let hash = config_hash(config);
    let dir = trial_dir(out, config);
    let report_path = dir.join(REPORT_FILE);
    if report_path.exists() && dir.join(MODEL_FILE).exists() {
        let mut report = read_report(&report_path)?;
        if report.config == *config {
            report.test = None;
            return Ok(Outcome::Resumed(TrialRecord {
                index,
                config: config.clone(),
                report: Some(report),
                error: None,
            }));
        }
        warn!("{}: stored config differs, re-running", report_path.display());
    }
    fsutil::ensure_dir(&dir)?;
    let _ = std::fs::remove_file(dir.join(ERROR_FILE));
    let started = Instant::now();
    let target = prep.target_index();
    match run_trial(config, &prep.splits, &prep.scaler, target, prep.dataset_id(), &hash) {
        Ok((model, mut report)) => {
            report.wall_time_secs = started.elapsed().as_secs_f64();
            checkpoint_for(model, prep, config).save(&dir.join(MODEL_FILE))?;
            write_report(&report_path, &report)?;
            info!("trial {index} ({}) val loss {:.6}", config.family, report.best_val_loss);
            Ok(Outcome::Done(TrialRecord {
                index,
                config: config.clone(),
                report: Some(report),
                error: None,
            }))
        }
        Err(e) => {
            warn!("trial {index} ({}) failed: {e}", config.family);
            fsutil::write_atomic(&dir.join(ERROR_FILE), format!("{e}\n").as_bytes())?;
            Ok(Outcome::Done(TrialRecord {
                index,
                config: config.clone(),
                report: None,
                error: Some(e.to_string()),
            }))
        }
    }
}

/// Run every configuration not already completed under `out`, then select
/// the winner by validation loss and evaluate it alone on the test split.
pub fn run_search(configs: &[TrainConfig], prep: &Prepared, out: &Path, jobs: Option<usize>) -> Result<SearchSummary> {
    if configs.is_empty() {
        return Err(Error::Config("search space is empty".into()));
    }
    fsutil::ensure_dir(out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_one(i, c, prep, out))
            .collect()
    });
    let (mut ran, mut resumed) = (0, 0);
    let mut trials = Vec::with_capacity(configs.len());
    for o in outcomes {
        match o? {
            Outcome::Done(t) => {
                ran += 1;
                trials.push(t);
            }
            Outcome::Resumed(t) => {
                resumed += 1;
                trials.push(t);
            }
        }
    }

    let winner = select_winner(&trials);
    if let Some(w) = winner {
        let config = trials[w].config.clone();
        let dir = trial_dir(out, &config);
        let ckpt = Checkpoint::load(&dir.join(MODEL_FILE))?;
        let eval = evaluate(&ckpt.model, &prep.splits.test, &prep.scaler, prep.target_index())?;
        let report = trials[w].report.as_mut().unwrap();
        report.test = Some(eval.metrics);
        write_report(&dir.join(REPORT_FILE), report)?;
        write_report(&out.join("best_report.json"), report)?;
        ckpt.save(&out.join("best.ckpt"))?;
        write_forecast(
            &out.join("best_forecast_test.csv"),
            &eval,
            &prep.splits.test.target_start,
            prep.splits.test.horizon,
            prep,
        )?;
    }
    let ranking = ranking_csv(&trials, |t| config_hash(&t.config));
    fsutil::write_atomic(&out.join("ranking.csv"), ranking.as_bytes())?;
    Ok(SearchSummary {
        trials,
        winner,
        ran,
        resumed,
        out_dir: out.to_path_buf(),
    })
}
