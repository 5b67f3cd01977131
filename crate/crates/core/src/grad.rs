//! Parameter storage, gradients and finite-difference verification.
//!
//! Every model keeps its learnable tensors in a [`ParameterSet`]. A
//! [`ShareGroup`] aliases several coordinates onto one value: their
//! gradients are summed into a single slot and optimizers update the slot
//! once. Gradients are computed by hand-derived backpropagation through time
//! in each model; [`check_gradients`] compares them against central
//! differences.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::loss::Objective;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// One scalar inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareGroup {
    pub id: usize,
    /// First site is the canonical slot.
    pub sites: Vec<Coord>,
    /// Frozen sites read the shared value but contribute no gradient.
    pub frozen: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
    groups: Vec<ShareGroup>,
    next_group_id: usize,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a trainable tensor; names must be unique.
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let count: usize = shape.iter().product();
        crate::error::shape(name, count, data.len())?;
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    #[inline]
    pub fn data(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    /// Raw mutable access. Callers that write a shared coordinate must
    /// call [`ParameterSet::sync_shared`] afterwards.
    #[inline]
    pub fn data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    /// Two distinct tensors mutably at once; `a < b`.
    pub fn data_pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b, "data_pair_mut needs a < b");
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a].data, &mut hi[0].data)
    }

    /// Swap a tensor for one of a new shape. Share groups touching it are dropped.
    pub fn replace(&mut self, i: usize, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let count: usize = shape.iter().product();
        crate::error::shape(&self.tensors[i].name, count, data.len())?;
        self.groups.retain(|g| g.sites.iter().all(|c| c.tensor != i));
        let t = &mut self.tensors[i];
        t.shape = shape.to_vec();
        t.data = data;
        Ok(())
    }

    pub fn set_trainable(&mut self, i: usize, trainable: bool) {
        self.tensors[i].trainable = trainable;
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Distinct learnable values: trainable scalars minus aliased duplicates.
    pub fn trainable_count(&self) -> usize {
        let raw: usize = self
            .tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum();
        let aliased: usize = self
            .groups
            .iter()
            .filter(|g| self.tensors[g.sites[0].tensor].trainable)
            .map(|g| g.sites.len() - 1)
            .sum();
        raw - aliased
    }

    pub fn groups(&self) -> &[ShareGroup] {
        &self.groups
    }

    /// Alias `sites` onto one value, initialised to their mean. Returns the
    /// group id. A coordinate may belong to at most one group.
    pub fn add_share_group(&mut self, sites: &[Coord]) -> Result<usize> {
        if sites.is_empty() {
            return Err(Error::Lock("empty share group".into()));
        }
        for (k, c) in sites.iter().enumerate() {
            if c.tensor >= self.tensors.len() || c.index >= self.tensors[c.tensor].data.len() {
                return Err(Error::Lock(format!("coordinate {c:?} does not exist")));
            }
            if sites[..k].contains(c) || self.group_of(*c).is_some() {
                return Err(Error::Lock(format!("coordinate {c:?} is already shared")));
            }
        }
        let first = self.get(sites[0]);
        if sites.iter().any(|&c| self.get(c) != first) {
            let mean = sites.iter().map(|&c| self.get(c)).sum::<f64>() / sites.len() as f64;
            for c in sites {
                self.tensors[c.tensor].data[c.index] = mean;
            }
        }
        let id = self.next_group_id;
        self.next_group_id += 1;
        self.groups.push(ShareGroup {
            id,
            sites: sites.to_vec(),
            frozen: vec![false; sites.len()],
        });
        Ok(id)
    }

    pub fn clear_share_groups(&mut self) {
        self.groups.clear();
    }

    pub fn group_of(&self, c: Coord) -> Option<&ShareGroup> {
        self.groups.iter().find(|g| g.sites.contains(&c))
    }

    /// Exclude (or re-include) one site's gradient contribution.
    pub fn set_site_frozen(&mut self, group_id: usize, site: usize, frozen: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.id == group_id)
            .ok_or_else(|| Error::Lock(format!("unknown share group {group_id}")))?;
        let slot = g
            .frozen
            .get_mut(site)
            .ok_or_else(|| Error::Lock(format!("share group {group_id} has no site {site}")))?;
        *slot = frozen;
        Ok(())
    }

    /// True unless `c` is a non-canonical member of a share group.
    pub fn is_canonical(&self, c: Coord) -> bool {
        self.group_of(c).map(|g| g.sites[0] == c).unwrap_or(true)
    }

    pub fn get(&self, c: Coord) -> f64 {
        self.tensors[c.tensor].data[c.index]
    }

    /// Write one coordinate and every coordinate aliased to it.
    pub fn set(&mut self, c: Coord, value: f64) {
        let sites: Vec<Coord> = match self.group_of(c) {
            Some(g) => g.sites.clone(),
            None => vec![c],
        };
        for s in sites {
            self.tensors[s.tensor].data[s.index] = value;
        }
    }

    /// Copy every canonical value onto its aliases.
    pub fn sync_shared(&mut self) {
        for g in &self.groups {
            let v = self.tensors[g.sites[0].tensor].data[g.sites[0].index];
            for s in &g.sites[1..] {
                self.tensors[s.tensor].data[s.index] = v;
            }
        }
    }

    /// Replace each shared site's gradient by the sum over the group's active sites.
    pub fn accumulate_shared(&self, grads: &mut GradientSet) {
        for g in &self.groups {
            let total: f64 = g
                .sites
                .iter()
                .zip(&g.frozen)
                .filter(|(_, &frozen)| !frozen)
                .map(|(s, _)| grads.tensors[s.tensor][s.index])
                .sum();
            for s in &g.sites {
                grads.tensors[s.tensor][s.index] = total;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor `{}`", t.name)));
            }
        }
        Ok(())
    }
}

/// Gradient tensors congruent with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub names: Vec<String>,
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            names: params.tensors.iter().map(|t| t.name.clone()).collect(),
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_slice())
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, k: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(())
    }
}

/// A recurrent forecaster over `(features x window)` inputs.
///
/// `trace` runs one sample forward and records what `backprop` needs to
/// accumulate that sample's parameter gradients.
pub trait Recurrent: Clone {
    type Trace;

    fn params(&self) -> &ParameterSet;
    fn params_mut(&mut self) -> &mut ParameterSet;
    fn input_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    fn trace(&self, input: &[f64], window: usize) -> Result<(Vec<f64>, Self::Trace)>;

    fn backprop(&self, trace: &Self::Trace, d_forecast: &[f64], grads: &mut GradientSet)
        -> Result<()>;

    fn forecast(&self, input: &[f64], window: usize) -> Result<Vec<f64>> {
        self.trace(input, window).map(|(y, _)| y)
    }

    /// Refine spline grids to `new_interior_count` intervals using `probe`
    /// for sample points. Models without splines report `Ok(false)`.
    fn extend_grid(&mut self, _new_interior_count: usize, _probe: &SequenceBatch) -> Result<bool> {
        Ok(false)
    }
}

fn check_batch<M: Recurrent>(model: &M, batch: &SequenceBatch) -> Result<()> {
    crate::error::shape("batch feature count", model.input_dim(), batch.features)?;
    crate::error::shape("batch horizon", model.horizon(), batch.horizon)?;
    if batch.window == 0 {
        return Err(Error::Empty("window length".into()));
    }
    Ok(())
}

/// Forecasts for every sample, `samples x horizon`.
pub fn forward<M: Recurrent>(model: &M, batch: &SequenceBatch) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    let mut out = Vec::with_capacity(batch.len() * batch.horizon);
    for s in 0..batch.len() {
        out.extend(model.forecast(batch.input(s), batch.window)?);
    }
    Ok(out)
}

/// Mean loss over `samples` (all when `None`).
pub fn batch_loss<M: Recurrent>(
    model: &M,
    batch: &SequenceBatch,
    samples: Option<&[usize]>,
    objective: Objective,
) -> Result<f64> {
    check_batch(model, batch)?;
    let all: Vec<usize>;
    let idx = match samples {
        Some(s) => s,
        None => {
            all = (0..batch.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut total = 0.0;
    for &s in idx {
        let y = model.forecast(batch.input(s), batch.window)?;
        total += y
            .iter()
            .zip(batch.target(s))
            .map(|(p, t)| objective.element_loss(p - t))
            .sum::<f64>();
    }
    Ok(total / (idx.len() * batch.horizon) as f64)
}

/// Loss and exact gradients, unrolled through every time step of every
/// sample in `samples` (all when `None`). Shared coordinates receive the sum
/// of their sites' contributions.
pub fn backward<M: Recurrent>(
    model: &M,
    batch: &SequenceBatch,
    samples: Option<&[usize]>,
    objective: Objective,
) -> Result<(f64, GradientSet)> {
    check_batch(model, batch)?;
    let all: Vec<usize>;
    let idx = match samples {
        Some(s) => s,
        None => {
            all = (0..batch.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    let count = (idx.len() * batch.horizon) as f64;
    let mut grads = GradientSet::zeros_like(model.params());
    let mut total = 0.0;
    let mut dy = vec![0.0; batch.horizon];
    for &s in idx {
        let (y, trace) = model.trace(batch.input(s), batch.window)?;
        for ((d, p), t) in dy.iter_mut().zip(&y).zip(batch.target(s)) {
            let e = p - t;
            total += objective.element_loss(e);
            *d = objective.element_grad(e) / count;
        }
        model.backprop(&trace, &dy, &mut grads)?;
    }
    model.params().accumulate_shared(&mut grads);
    grads.check_finite()?;
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grads))
}

/// A scalar function of a parameter set with an analytic gradient.
pub trait Differentiable: Clone {
    fn parameters(&self) -> &ParameterSet;
    fn parameters_mut(&mut self) -> &mut ParameterSet;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grad(&self) -> Result<(f64, GradientSet)>;
}

/// A model bound to a batch and objective.
#[derive(Clone)]
pub struct BatchObjective<'a, M: Recurrent> {
    pub model: M,
    pub batch: &'a SequenceBatch,
    pub objective: Objective,
}

impl<M: Recurrent> Differentiable for BatchObjective<'_, M> {
    fn parameters(&self) -> &ParameterSet {
        self.model.params()
    }
    fn parameters_mut(&mut self) -> &mut ParameterSet {
        self.model.params_mut()
    }
    fn loss(&self) -> Result<f64> {
        batch_loss(&self.model, self.batch, None, self.objective)
    }
    fn loss_and_grad(&self) -> Result<(f64, GradientSet)> {
        backward(&self.model, self.batch, None, self.objective)
    }
}

/// Worst relative error for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + libm::fabs(numeric) + 1e-12)
}

/// Compare analytic gradients against central differences with step `h`.
///
/// Every trainable coordinate is perturbed by `±h`; a shared coordinate is
/// perturbed through all its aliases at once and checked once. The report
/// records, and does not judge, the worst relative error per tensor.
pub fn check_gradients<D: Differentiable>(problem: &D, h: f64, tolerance: f64) -> Result<GradientReport> {
    let (_, grads) = problem.loss_and_grad()?;
    let mut probe = problem.clone();
    let mut tensors = Vec::new();
    for (ti, t) in problem.parameters().tensors().iter().enumerate() {
        if !t.trainable {
            continue;
        }
        let mut check = TensorCheck {
            name: t.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        };
        for index in 0..t.data.len() {
            let c = Coord { tensor: ti, index };
            if !problem.parameters().is_canonical(c) {
                continue;
            }
            let orig = problem.parameters().get(c);
            probe.parameters_mut().set(c, orig + h);
            let plus = probe.loss()?;
            probe.parameters_mut().set(c, orig - h);
            let minus = probe.loss()?;
            probe.parameters_mut().set(c, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.tensors[ti][index];
            let rel = relative_error(analytic, numeric);
            check.coords_checked += 1;
            if rel > check.max_rel_error || check.coords_checked == 1 {
                check.max_rel_error = rel;
                check.worst_index = index;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradientReport { tensors, tolerance })
}
