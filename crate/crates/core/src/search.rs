//! Hyperparameter grid search with optional seeded budget.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ScalerParams, SplitBatches};
use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::model::{build_model, Model, ModelFamily};
use crate::optim::OptimizerKind;
use crate::train::{evaluate, train_and_report, MetricsReport, TrainConfig, GRID_POINTS, HIDDEN_SIZES, LAYER_COUNTS, SPLINE_DEGREES};

/// Cartesian product of hyperparameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub family: ModelFamily,
    pub hidden_sizes: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub optimizers: Vec<OptimizerKind>,
    pub objectives: Vec<Objective>,
    /// Empty for baselines.
    pub spline_degrees: Vec<usize>,
    /// Empty for baselines.
    pub grid_points: Vec<usize>,
}

impl SearchSpace {
    /// The full published grid for `family`.
    pub fn table(family: ModelFamily) -> Self {
        let karn = family.has_splines();
        Self {
            family,
            hidden_sizes: HIDDEN_SIZES.to_vec(),
            num_layers: LAYER_COUNTS.to_vec(),
            optimizers: OptimizerKind::ALL.to_vec(),
            objectives: Objective::ALL.to_vec(),
            spline_degrees: if karn { SPLINE_DEGREES.to_vec() } else { Vec::new() },
            grid_points: if karn { GRID_POINTS.collect() } else { Vec::new() },
        }
    }

    fn karn_axes(&self) -> (usize, usize) {
        if self.family.has_splines() {
            (self.spline_degrees.len(), self.grid_points.len())
        } else {
            (1, 1)
        }
    }

    pub fn len(&self) -> usize {
        let (d, g) = self.karn_axes();
        self.hidden_sizes.len() * self.num_layers.len() * self.optimizers.len() * self.objectives.len() * d * g
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `index`-th configuration in row-major order; protocol fields come from `base`.
    pub fn config(&self, index: usize, base: &TrainConfig) -> TrainConfig {
        let (nd, ng) = self.karn_axes();
        let mut i = index;
        let mut take = |n: usize| {
            let r = i % n;
            i /= n;
            r
        };
        let g = take(ng);
        let d = take(nd);
        let obj = take(self.objectives.len());
        let opt = take(self.optimizers.len());
        let layers = take(self.num_layers.len());
        let hidden = take(self.hidden_sizes.len());
        let mut c = base.clone();
        c.family = self.family;
        c.hidden_size = self.hidden_sizes[hidden];
        c.num_layers = self.num_layers[layers];
        c.optimizer = self.optimizers[opt];
        c.objective = self.objectives[obj];
        if self.family.has_splines() {
            c.spline_degree = Some(self.spline_degrees[d]);
            c.grid_points = Some(self.grid_points[g]);
        } else {
            c.spline_degree = None;
            c.grid_points = None;
            c.grid_extension_epoch = None;
        }
        c
    }

    /// Every configuration, or a seeded subset of `budget` of them kept in
    /// grid order.
    pub fn configs(&self, base: &TrainConfig, budget: Option<usize>, seed: u64) -> Result<Vec<TrainConfig>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Config("search space is empty".into()));
        }
        let indices: Vec<usize> = match budget {
            Some(b) if b < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = rand::seq::index::sample(&mut rng, n, b).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        Ok(indices.into_iter().map(|i| self.config(i, base)).collect())
    }
}

/// One search trial; `report` is absent when the trial failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: TrainConfig,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Validation mean squared error in original units. Trials with
    /// different objectives report `best_val_loss` on different scales, so
    /// selection uses this common measure instead.
    pub fn val_loss(&self) -> Option<f64> {
        self.report
            .as_ref()
            .map(|r| r.validation.rmse * r.validation.rmse)
            .filter(|v| v.is_finite())
    }
}

/// Position of the trial with the lowest validation loss; ties go to the
/// earlier trial. Test metrics play no part.
pub fn select_winner(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, t) in trials.iter().enumerate() {
        if let Some(v) = t.val_loss() {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((k, v));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// Successful trials ordered by validation loss, then trial index.
pub fn rank(trials: &[TrialRecord]) -> Vec<usize> {
    let mut ok: Vec<usize> = (0..trials.len()).filter(|&k| trials[k].val_loss().is_some()).collect();
    ok.sort_by(|&a, &b| {
        let (x, y) = (trials[a].val_loss().unwrap(), trials[b].val_loss().unwrap());
        x.total_cmp(&y).then(trials[a].index.cmp(&trials[b].index))
    });
    ok
}

/// Train one configuration and report validation metrics.
pub fn run_trial(
    config: &TrainConfig,
    data: &SplitBatches,
    scaler: &ScalerParams,
    target_feature: usize,
    dataset_id: &str,
    config_hash: &str,
) -> Result<(Model, MetricsReport)> {
    let model = build_model(config, data.train.features, data.train.horizon)?;
    let id = config.family.to_string();
    train_and_report(
        model,
        &data.train,
        &data.val,
        scaler,
        target_feature,
        config,
        &id,
        dataset_id,
        config_hash,
    )
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<TrialRecord>,
    pub winner: Option<usize>,
    pub winner_model: Option<Model>,
}

/// Sequential grid search. Failed trials are recorded and skipped; only the
/// winner is evaluated on the test split.
pub fn grid_search(
    configs: &[TrainConfig],
    data: &SplitBatches,
    scaler: &ScalerParams,
    target_feature: usize,
    dataset_id: &str,
    hash: impl Fn(&TrainConfig) -> String,
) -> Result<SearchOutcome> {
    if configs.is_empty() {
        return Err(Error::Config("search space is empty".into()));
    }
    let mut trials = Vec::with_capacity(configs.len());
    let mut models = Vec::with_capacity(configs.len());
    for (index, config) in configs.iter().enumerate() {
        match run_trial(config, data, scaler, target_feature, dataset_id, &hash(config)) {
            Ok((m, r)) => {
                trials.push(TrialRecord {
                    index,
                    config: config.clone(),
                    report: Some(r),
                    error: None,
                });
                models.push(Some(m));
            }
            Err(e) => {
                trials.push(TrialRecord {
                    index,
                    config: config.clone(),
                    report: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    let winner = select_winner(&trials);
    let mut winner_model = None;
    if let Some(w) = winner {
        let m = models[w].take().unwrap();
        let test = evaluate(&m, &data.test, scaler, target_feature)?.metrics;
        trials[w].report.as_mut().unwrap().test = Some(test);
        winner_model = Some(m);
    }
    Ok(SearchOutcome {
        trials,
        winner,
        winner_model,
    })
}
