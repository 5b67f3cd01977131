//! Training configuration, the epoch loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{persistence_forecast, ScalerParams, SequenceBatch};
use crate::error::{Error, Result};
use crate::grad::{backward, batch_loss, forward, Recurrent};
use crate::head::HeadMode;
use crate::loss::{metric_suite, Metrics, Objective};
use crate::model::ModelFamily;
use crate::optim::{Optimizer, OptimizerKind};

pub const HIDDEN_SIZES: [usize; 3] = [64, 128, 256];
pub const LAYER_COUNTS: [usize; 3] = [1, 2, 3];
pub const SPLINE_DEGREES: [usize; 3] = [1, 2, 3];
pub const GRID_POINTS: core::ops::RangeInclusive<usize> = 2..=14;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const INITIAL_GRID_POINTS: usize = 5;

/// One hyperparameter assignment plus the training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    /// KARN only.
    pub spline_degree: Option<usize>,
    /// KARN only: target interval count of the knot grid.
    pub grid_points: Option<usize>,
    pub grid_range: (f64, f64),
    pub head: HeadMode,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_plateau_factor: f64,
    pub lr_plateau_patience: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// KARN only: when set and `grid_points` exceeds the starting grid, train
    /// on the starting grid and extend after this epoch.
    pub grid_extension_epoch: Option<usize>,
    pub initial_grid_points: usize,
}

impl TrainConfig {
    pub fn for_family(family: ModelFamily) -> Self {
        let karn = family.has_splines();
        Self {
            family,
            hidden_size: 64,
            num_layers: 1,
            optimizer: OptimizerKind::Adam,
            objective: Objective::Mse,
            spline_degree: karn.then_some(2),
            grid_points: karn.then_some(INITIAL_GRID_POINTS),
            grid_range: (-1.0, 1.0),
            head: HeadMode::LastState,
            learning_rate: 1e-3,
            max_epochs: 300,
            early_stop_patience: 5,
            lr_plateau_factor: 0.5,
            lr_plateau_patience: 3,
            lr_floor: 1e-6,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            grid_extension_epoch: None,
            initial_grid_points: INITIAL_GRID_POINTS,
        }
    }

    /// Interval count the network is built with.
    pub fn initial_grid_points(&self) -> usize {
        let target = self.grid_points.unwrap_or(INITIAL_GRID_POINTS);
        match self.grid_extension_epoch {
            Some(_) if target > self.initial_grid_points => self.initial_grid_points,
            _ => target,
        }
    }

    /// Target interval count still to be reached by extension, if any.
    pub fn pending_extension(&self) -> Option<usize> {
        let target = self.grid_points?;
        (self.initial_grid_points() < target).then_some(target)
    }

    /// Checks that the run can proceed: positive sizes, sane rates, KARN-only
    /// fields present exactly for KARN.
    pub fn validate_protocol(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_size == 0 || self.num_layers == 0 {
            return bad("hidden_size and num_layers must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive".into());
        }
        if self.early_stop_patience == 0 || self.lr_plateau_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(self.lr_plateau_factor > 0.0 && self.lr_plateau_factor < 1.0) {
            return bad(format!("lr_plateau_factor must lie in (0, 1), got {}", self.lr_plateau_factor));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            return bad(format!("lr_floor must be non-negative, got {}", self.lr_floor));
        }
        let (lo, hi) = self.grid_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("grid_range must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        if self.family.has_splines() {
            let (Some(p), Some(g)) = (self.spline_degree, self.grid_points) else {
                return bad("karn needs spline_degree and grid_points".into());
            };
            if !SPLINE_DEGREES.contains(&p) {
                return bad(format!("spline_degree must be one of {SPLINE_DEGREES:?}, got {p}"));
            }
            if g == 0 || self.initial_grid_points == 0 {
                return bad("grid_points must be positive".into());
            }
        } else if self.spline_degree.is_some() || self.grid_points.is_some() {
            return bad(format!(
                "spline_degree and grid_points apply to karn only, not {}",
                self.family
            ));
        } else if self.grid_extension_epoch.is_some() {
            return bad(format!("grid_extension_epoch applies to karn only, not {}", self.family));
        }
        Ok(())
    }

    /// Full check against the search-space domains.
    pub fn validate(&self) -> Result<()> {
        self.validate_protocol()?;
        if !HIDDEN_SIZES.contains(&self.hidden_size) {
            return Err(Error::Config(format!(
                "hidden_size must be one of {HIDDEN_SIZES:?}, got {}",
                self.hidden_size
            )));
        }
        if !LAYER_COUNTS.contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "num_layers must be one of {LAYER_COUNTS:?}, got {}",
                self.num_layers
            )));
        }
        if let Some(g) = self.grid_points {
            if !GRID_POINTS.contains(&g) {
                return Err(Error::Config(format!("grid_points must lie in 2..=14, got {g}")));
            }
        }
        Ok(())
    }

    /// Stable `key=value` lines, sorted by key; the basis of the config hash.
    pub fn canonical(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| format!("{x}")).unwrap_or_else(|| "none".into());
        let mut kv: Vec<(&str, String)> = alloc::vec![
            ("batch_size", format!("{}", self.batch_size)),
            ("early_stop_patience", format!("{}", self.early_stop_patience)),
            ("family", format!("{}", self.family)),
            ("grid_extension_epoch", opt(self.grid_extension_epoch)),
            ("grid_points", opt(self.grid_points)),
            ("grid_range", format!("{:?},{:?}", self.grid_range.0, self.grid_range.1)),
            ("head", format!("{}", self.head)),
            ("hidden_size", format!("{}", self.hidden_size)),
            ("initial_grid_points", format!("{}", self.initial_grid_points)),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("lr_floor", format!("{:?}", self.lr_floor)),
            ("lr_plateau_factor", format!("{:?}", self.lr_plateau_factor)),
            ("lr_plateau_patience", format!("{}", self.lr_plateau_patience)),
            ("max_epochs", format!("{}", self.max_epochs)),
            ("num_layers", format!("{}", self.num_layers)),
            ("objective", format!("{}", self.objective)),
            ("optimizer", format!("{}", self.optimizer)),
            ("seed", format!("{}", self.seed)),
            ("spline_degree", opt(self.spline_degree)),
        ];
        kv.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// What the controller decided after one validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochDecision {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Plateau learning-rate schedule and early stopping.
///
/// Improvement means strictly below the best loss so far. The plateau
/// counter resets after every reduction; the early-stop counter only on
/// improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochController {
    pub lr: f64,
    pub best: f64,
    pub best_epoch: usize,
    plateau_bad: usize,
    stale: usize,
    factor: f64,
    plateau_patience: usize,
    stop_patience: usize,
    floor: f64,
}

impl EpochController {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            best: f64::INFINITY,
            best_epoch: 0,
            plateau_bad: 0,
            stale: 0,
            factor: config.lr_plateau_factor,
            plateau_patience: config.lr_plateau_patience,
            stop_patience: config.early_stop_patience,
            floor: config.lr_floor,
        }
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> EpochDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.plateau_bad = 0;
            self.stale = 0;
            return EpochDecision {
                improved: true,
                lr_reduced: false,
                stop: false,
            };
        }
        self.plateau_bad += 1;
        self.stale += 1;
        let mut lr_reduced = false;
        if self.plateau_bad >= self.plateau_patience {
            self.plateau_bad = 0;
            let next = (self.lr * self.factor).max(self.floor);
            lr_reduced = next < self.lr;
            self.lr = next;
        }
        EpochDecision {
            improved: false,
            lr_reduced,
            stop: self.stale >= self.stop_patience,
        }
    }

    /// Give the run a fresh patience budget without forgetting the best loss.
    pub fn reset_patience(&mut self) {
        self.plateau_bad = 0;
        self.stale = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Callbacks driven by [`run_protocol`].
pub trait EpochHooks<S> {
    /// Train one epoch, returning the mean training loss.
    fn train_epoch(&mut self, state: &mut S, epoch: usize, lr: f64) -> Result<f64>;
    fn validate(&mut self, state: &S, epoch: usize) -> Result<f64>;
    /// Called when patience runs out. Returning `true` continues training
    /// with fresh patience.
    fn on_patience_exhausted(&mut self, _state: &mut S, _epoch: usize) -> Result<bool> {
        Ok(false)
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome<S> {
    /// State with the lowest validation loss.
    pub best: S,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
    pub curve: Vec<EpochRecord>,
}

/// The epoch loop: train, validate, schedule, stop, restore best.
pub fn run_protocol<S: Clone, H: EpochHooks<S>>(
    mut state: S,
    config: &TrainConfig,
    hooks: &mut H,
) -> Result<ProtocolOutcome<S>> {
    let mut ctl = EpochController::new(config);
    let mut best = state.clone();
    let mut curve = Vec::new();
    let mut stopped_early = false;
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        let lr = ctl.lr;
        let train_loss = hooks.train_epoch(&mut state, epoch, lr)?;
        let val_loss = match hooks.validate(&state, epoch) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let d = ctl.observe(epoch, val_loss);
        if d.improved {
            best = state.clone();
        }
        if d.stop {
            if hooks.on_patience_exhausted(&mut state, epoch)? {
                ctl.reset_patience();
                continue;
            }
            stopped_early = true;
            break;
        }
    }
    if curve.is_empty() {
        return Err(Error::Config("max_epochs must be positive".into()));
    }
    Ok(ProtocolOutcome {
        best,
        best_val_loss: ctl.best,
        best_epoch: ctl.best_epoch,
        epochs_run: epoch,
        stopped_early,
        final_lr: ctl.lr,
        curve,
    })
}

/// A grid extension performed during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionEvent {
    pub epoch: usize,
    pub from: usize,
    pub to: usize,
}

struct FitHooks<'a> {
    train: &'a SequenceBatch,
    val: &'a SequenceBatch,
    config: &'a TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pending: Option<usize>,
    extensions: Vec<ExtensionEvent>,
}

impl FitHooks<'_> {
    fn extend<M: Recurrent>(&mut self, model: &mut M, epoch: usize) -> Result<bool> {
        let Some(to) = self.pending.take() else {
            return Ok(false);
        };
        if model.extend_grid(to, self.train)? {
            self.optimizer.reset();
            self.extensions.push(ExtensionEvent {
                epoch,
                from: self.config.initial_grid_points(),
                to,
            });
            return Ok(true);
        }
        Ok(false)
    }
}

impl<M: Recurrent> EpochHooks<M> for FitHooks<'_> {
    fn train_epoch(&mut self, model: &mut M, epoch: usize, lr: f64) -> Result<f64> {
        if self.config.grid_extension_epoch.is_some_and(|e| epoch == e + 1) {
            self.extend(model, epoch - 1)?;
        }
        self.order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in self.order.chunks(self.config.batch_size) {
            let (loss, grads) = backward(model, self.train, Some(chunk), self.config.objective)?;
            self.optimizer.step(model.params_mut(), &grads, lr)?;
            total += loss * chunk.len() as f64;
        }
        Ok(total / self.order.len() as f64)
    }

    fn validate(&mut self, model: &M, _epoch: usize) -> Result<f64> {
        batch_loss(model, self.val, None, self.config.objective)
    }

    fn on_patience_exhausted(&mut self, model: &mut M, epoch: usize) -> Result<bool> {
        self.extend(model, epoch)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<M> {
    /// Parameters from the best validation epoch.
    pub model: M,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
    pub curve: Vec<EpochRecord>,
    pub extensions: Vec<ExtensionEvent>,
}

/// Mini-batch training with the plateau schedule, early stopping and
/// best-checkpoint restore. Shuffling is seeded by `config.seed`.
pub fn fit<M: Recurrent>(
    model: M,
    train: &SequenceBatch,
    val: &SequenceBatch,
    config: &TrainConfig,
) -> Result<FitOutcome<M>> {
    config.validate_protocol()?;
    if train.is_empty() {
        return Err(Error::Empty("training windows".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation windows".into()));
    }
    let mut hooks = FitHooks {
        train,
        val,
        config,
        optimizer: Optimizer::new(config.optimizer),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        order: (0..train.len()).collect(),
        pending: if config.grid_extension_epoch.is_some() {
            config.pending_extension()
        } else {
            None
        },
        extensions: Vec::new(),
    };
    let out = run_protocol(model, config, &mut hooks)?;
    Ok(FitOutcome {
        model: out.best,
        best_val_loss: out.best_val_loss,
        best_epoch: out.best_epoch,
        epochs_run: out.epochs_run,
        stopped_early: out.stopped_early,
        final_lr: out.final_lr,
        curve: out.curve,
        extensions: hooks.extensions,
    })
}

/// Unscaled forecasts and actuals of one split, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub forecast: Vec<f64>,
    pub actual: Vec<f64>,
    pub metrics: Metrics,
}

fn unscale(values: &[f64], scaler: &ScalerParams, target_feature: usize) -> Vec<f64> {
    values.iter().map(|&v| scaler.inverse(target_feature, v)).collect()
}

fn evaluation(pred: &[f64], batch: &SequenceBatch, scaler: &ScalerParams, target_feature: usize) -> Evaluation {
    let forecast = unscale(pred, scaler, target_feature);
    let actual = unscale(&batch.targets, scaler, target_feature);
    let metrics = metric_suite(&forecast, &actual);
    Evaluation {
        forecast,
        actual,
        metrics,
    }
}

/// Metrics in original units.
pub fn evaluate<M: Recurrent>(
    model: &M,
    batch: &SequenceBatch,
    scaler: &ScalerParams,
    target_feature: usize,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluation windows".into()));
    }
    let pred = forward(model, batch)?;
    Ok(evaluation(&pred, batch, scaler, target_feature))
}

/// The 24-hour persistence reference on the same windows.
pub fn evaluate_persistence(batch: &SequenceBatch, scaler: &ScalerParams, target_feature: usize) -> Evaluation {
    let pred = persistence_forecast(batch, target_feature);
    evaluation(&pred, batch, scaler, target_feature)
}

/// Outcome of one trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub dataset_id: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub validation: Metrics,
    /// Filled only for a selected winner or a direct train run.
    pub test: Option<Metrics>,
    pub wall_time_secs: f64,
    pub curve: Vec<EpochRecord>,
    pub extensions: Vec<ExtensionEvent>,
}

impl MetricsReport {
    /// MAE ≤ RMSE and SMAPE within [0, 200] for every metric set present.
    pub fn check(&self) -> Result<()> {
        for m in core::iter::once(&self.validation).chain(self.test.as_ref()) {
            if m.mae > m.rmse * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::NonFinite(format!("report with MAE {} above RMSE {}", m.mae, m.rmse)));
            }
            if !(0.0..=200.0).contains(&m.smape) {
                return Err(Error::NonFinite(format!("report SMAPE {} outside [0, 200]", m.smape)));
            }
        }
        Ok(())
    }
}

/// Train `model` and report validation metrics; test metrics are added by the
/// caller when appropriate.
#[allow(clippy::too_many_arguments)]
pub fn train_and_report<M: Recurrent>(
    model: M,
    train: &SequenceBatch,
    val: &SequenceBatch,
    scaler: &ScalerParams,
    target_feature: usize,
    config: &TrainConfig,
    model_id: &str,
    dataset_id: &str,
    config_hash: &str,
) -> Result<(M, MetricsReport)> {
    let out = fit(model, train, val, config)?;
    let validation = evaluate(&out.model, val, scaler, target_feature)?.metrics;
    let report = MetricsReport {
        model_id: model_id.into(),
        dataset_id: dataset_id.into(),
        config_hash: config_hash.into(),
        config: config.clone(),
        best_val_loss: out.best_val_loss,
        best_epoch: out.best_epoch,
        epochs_run: out.epochs_run,
        stopped_early: out.stopped_early,
        validation,
        test: None,
        wall_time_secs: 0.0,
        curve: out.curve,
        extensions: out.extensions,
    };
    Ok((out.model, report))
}
