//! Kolmogorov-Arnold recurrent network.
//!
//! One layer updates its hidden state as
//!
//! ```text
//! h_t[k] = sum_m W[k,m] h_{t-1}[m]                       (memory)
//!        + sum_j wb[k,j] silu(x_t[j])                    (SiLU residual branch)
//!        + sum_j ws[k,j] sum_i c[k,j,i] B_i(x_t[j])      (per-edge spline branch)
//!        + bias[k]
//! ```
//!
//! with no squashing after the sum. Layers stack by feeding each layer the
//! hidden-state sequence of the one below, and the head maps the final
//! hidden state of the top layer to the whole forecast horizon.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::grad::{Coord, GradientSet, ParameterSet, Recurrent};
use crate::head::{self, HeadMode};
use crate::ops;
use crate::spline::{self, BasisSpan, KnotGrid};

pub use crate::ops::silu;

const TENSORS_PER_LAYER: usize = 5;
const SPLINE_COEFFS: usize = 0;
const SPLINE_WEIGHT: usize = 1;
const BASIS_WEIGHT: usize = 2;
const RECURRENT_WEIGHT: usize = 3;
const BIAS: usize = 4;

/// Architecture of a [`KarnNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarnConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub horizon: usize,
    pub degree: usize,
    pub grid_points: usize,
    pub grid_range: (f64, f64),
    pub head: HeadMode,
}

impl Default for KarnConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            hidden_dim: 64,
            num_layers: 1,
            horizon: 24,
            degree: 2,
            grid_points: 5,
            grid_range: (-1.0, 1.0),
            head: HeadMode::LastState,
        }
    }
}

/// Dimensions and knot grid of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarnLayerShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub grid: KnotGrid,
}

/// Edges `(k, j)` of one layer whose spline coefficients are tied together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockGroup {
    pub id: usize,
    pub layer: usize,
    pub edges: Vec<(usize, usize)>,
}

/// Borrowed view of one layer's learnable tensors.
#[derive(Debug, Clone, Copy)]
pub struct KarnLayerParams<'a> {
    pub index: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub grid: &'a KnotGrid,
    /// `hidden x input x basis_count`
    pub spline_coeffs: &'a [f64],
    /// `hidden x input`
    pub spline_weight: &'a [f64],
    /// `hidden x input`
    pub basis_weight: &'a [f64],
    /// `hidden x hidden`
    pub recurrent_weight: &'a [f64],
    pub bias: &'a [f64],
}

impl KarnLayerParams<'_> {
    pub fn validate(&self) -> Result<()> {
        let (di, dh, nb) = (self.input_dim, self.hidden_dim, self.grid.basis_count());
        crate::error::shape("spline_coeffs", dh * di * nb, self.spline_coeffs.len())?;
        crate::error::shape("spline_weight", dh * di, self.spline_weight.len())?;
        crate::error::shape("basis_weight", dh * di, self.basis_weight.len())?;
        crate::error::shape("recurrent_weight", dh * dh, self.recurrent_weight.len())?;
        crate::error::shape("bias", dh, self.bias.len())
    }

    #[inline]
    fn edge_coeffs(&self, k: usize, j: usize) -> &[f64] {
        let nb = self.grid.basis_count();
        let e = k * self.input_dim + j;
        &self.spline_coeffs[e * nb..(e + 1) * nb]
    }

    fn spans(&self, x: &[f64]) -> Result<Vec<BasisSpan>> {
        x.iter().map(|&v| self.grid.eval_span(v)).collect()
    }

    /// Hidden update with precomputed SiLU values and basis spans.
    fn step_with(&self, silu_x: &[f64], spans: &[BasisSpan], h_prev: &[f64], out: &mut [f64]) {
        let (di, dh) = (self.input_dim, self.hidden_dim);
        for k in 0..dh {
            let mut acc = self.bias[k] + head::dot(&self.recurrent_weight[k * dh..(k + 1) * dh], h_prev);
            for j in 0..di {
                let e = k * di + j;
                acc += self.basis_weight[e] * silu_x[j];
                acc += self.spline_weight[e] * spans[j].dot(self.edge_coeffs(k, j));
            }
            out[k] = acc;
        }
    }
}

fn check_input(layer: &KarnLayerParams<'_>, x: &[f64]) -> Result<()> {
    crate::error::shape("layer input", layer.input_dim, x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input of KARN layer {}", layer.index)));
    }
    Ok(())
}

/// SiLU residual branch: `b[k] = sum_j wb[k,j] silu(x[j])`.
pub fn basis_branch(layer: &KarnLayerParams<'_>, x: &[f64]) -> Result<Vec<f64>> {
    layer.validate()?;
    check_input(layer, x)?;
    let di = layer.input_dim;
    Ok((0..layer.hidden_dim)
        .map(|k| {
            (0..di)
                .map(|j| layer.basis_weight[k * di + j] * silu(x[j]))
                .sum()
        })
        .collect())
}

/// Spline branch: `S[k] = sum_j ws[k,j] sum_i c[k,j,i] B_i(x[j])`.
pub fn spline_branch(layer: &KarnLayerParams<'_>, x: &[f64]) -> Result<Vec<f64>> {
    layer.validate()?;
    check_input(layer, x)?;
    let spans = layer.spans(x)?;
    let di = layer.input_dim;
    Ok((0..layer.hidden_dim)
        .map(|k| {
            (0..di)
                .map(|j| layer.spline_weight[k * di + j] * spans[j].dot(layer.edge_coeffs(k, j)))
                .sum()
        })
        .collect())
}

/// One recurrent update `h_t = W h_{t-1} + b_t + S_t + bias`.
pub fn step(layer: &KarnLayerParams<'_>, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    layer.validate()?;
    check_input(layer, x)?;
    crate::error::shape("previous hidden state", layer.hidden_dim, h_prev.len())?;
    if h_prev.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "previous hidden state of KARN layer {}",
            layer.index
        )));
    }
    let silu_x: Vec<f64> = x.iter().map(|&v| silu(v)).collect();
    let spans = layer.spans(x)?;
    let mut out = vec![0.0; layer.hidden_dim];
    layer.step_with(&silu_x, &spans, h_prev, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("hidden state of KARN layer {}", layer.index)));
    }
    Ok(out)
}

/// Recorded activations of one sample.
#[derive(Debug, Clone)]
pub struct KarnTrace {
    window: usize,
    /// Per layer: time-major inputs, `window x input_dim`.
    inputs: Vec<Vec<f64>>,
    /// Per layer: `h_0 .. h_n`, `(window + 1) x hidden_dim`.
    hidden: Vec<Vec<f64>>,
}

/// What [`KarnNetwork::extend_network_grid`] did to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExtension {
    pub layer: usize,
    pub old_interior_count: usize,
    pub new_interior_count: usize,
    /// Inputs whose refit used the uniform-probe fallback.
    pub fallback_inputs: Vec<usize>,
    /// Inputs whose refit was rank deficient (minimum-norm solution).
    pub rank_deficient_inputs: Vec<usize>,
}

/// Stacked KARN layers with an affine forecast head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarnNetwork {
    layers: Vec<KarnLayerShape>,
    horizon: usize,
    head_mode: HeadMode,
    params: ParameterSet,
    locks: Vec<LockGroup>,
    next_lock_id: usize,
}

fn layer_name(l: usize, what: &str) -> alloc::string::String {
    format!("layer{l}.{what}")
}

impl KarnNetwork {
    /// Randomly initialised network: Xavier-uniform basis, recurrent and head
    /// weights, spline weights of one, spline coefficients uniform in
    /// `[-0.1, 0.1]`, zero biases.
    pub fn new<R: Rng + ?Sized>(config: &KarnConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for l in 0..net.layers.len() {
            let (di, dh) = (net.layers[l].input_dim, net.layers[l].hidden_dim);
            let base = l * TENSORS_PER_LAYER;
            let n = net.params.data(base + SPLINE_COEFFS).len();
            net.params
                .data_mut(base + SPLINE_COEFFS)
                .copy_from_slice(&ops::uniform(rng, -0.1, 0.1, n));
            net.params.data_mut(base + SPLINE_WEIGHT).fill(1.0);
            net.params
                .data_mut(base + BASIS_WEIGHT)
                .copy_from_slice(&ops::xavier_uniform(rng, di, dh, dh * di));
            net.params
                .data_mut(base + RECURRENT_WEIGHT)
                .copy_from_slice(&ops::xavier_uniform(rng, dh, dh, dh * dh));
        }
        let hw = net.head_weight_index();
        let dh = net.hidden_dim();
        let n = net.params.data(hw).len();
        let fan_out = n / dh;
        net.params
            .data_mut(hw)
            .copy_from_slice(&ops::xavier_uniform(rng, dh, fan_out, n));
        Ok(net)
    }

    /// Every parameter zero.
    pub fn zeros(config: &KarnConfig) -> Result<Self> {
        if config.num_layers == 0 {
            return Err(Error::Config("a KARN needs at least one layer".into()));
        }
        if config.input_dim == 0 || config.hidden_dim == 0 || config.horizon == 0 {
            return Err(Error::Config("KARN dimensions must be positive".into()));
        }
        let grid = KnotGrid::new(
            config.degree,
            config.grid_points,
            config.grid_range.0,
            config.grid_range.1,
        )?;
        let nb = grid.basis_count();
        let mut params = ParameterSet::new();
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let di = if l == 0 { config.input_dim } else { config.hidden_dim };
            let dh = config.hidden_dim;
            params.push(&layer_name(l, "spline_coeffs"), &[dh, di, nb], vec![0.0; dh * di * nb])?;
            params.push(&layer_name(l, "spline_weight"), &[dh, di], vec![0.0; dh * di])?;
            params.push(&layer_name(l, "basis_weight"), &[dh, di], vec![0.0; dh * di])?;
            params.push(&layer_name(l, "recurrent_weight"), &[dh, dh], vec![0.0; dh * dh])?;
            params.push(&layer_name(l, "bias"), &[dh], vec![0.0; dh])?;
            layers.push(KarnLayerShape {
                input_dim: di,
                hidden_dim: dh,
                grid: grid.clone(),
            });
        }
        let ws = config.head.weight_shape(config.hidden_dim, config.horizon);
        params.push("head.weight", &ws, vec![0.0; ws[0] * ws[1]])?;
        let bl = config.head.bias_len(config.horizon);
        params.push("head.bias", &[bl], vec![0.0; bl])?;
        Ok(Self {
            layers,
            horizon: config.horizon,
            head_mode: config.head,
            params,
            locks: Vec::new(),
            next_lock_id: 0,
        })
    }

    /// Reassemble a network from stored parts, checking every shape.
    pub fn from_parts(
        layers: Vec<KarnLayerShape>,
        horizon: usize,
        head_mode: HeadMode,
        params: ParameterSet,
        locks: Vec<(usize, Vec<(usize, usize)>)>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a KARN needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            crate::error::shape("stacked layer input", w[0].hidden_dim, w[1].input_dim)?;
        }
        crate::error::shape("tensor count", layers.len() * TENSORS_PER_LAYER + 2, params.len())?;
        let mut net = Self {
            layers,
            horizon,
            head_mode,
            params,
            locks: Vec::new(),
            next_lock_id: 0,
        };
        for l in 0..net.layers.len() {
            net.layer(l).validate()?;
        }
        let dh = net.hidden_dim();
        let ws = head_mode.weight_shape(dh, horizon);
        crate::error::shape("head.weight", ws[0] * ws[1], net.params.data(net.head_weight_index()).len())?;
        crate::error::shape(
            "head.bias",
            head_mode.bias_len(horizon),
            net.params.data(net.head_weight_index() + 1).len(),
        )?;
        net.params.clear_share_groups();
        for (layer, edges) in locks {
            net.lock_edges(layer, &edges)?;
        }
        net.params.check_finite()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[KarnLayerShape] {
        &self.layers
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map(|l| l.hidden_dim).unwrap_or(0)
    }

    pub fn locks(&self) -> &[LockGroup] {
        &self.locks
    }

    fn head_weight_index(&self) -> usize {
        self.layers.len() * TENSORS_PER_LAYER
    }

    /// View of layer `l`'s parameters.
    pub fn layer(&self, l: usize) -> KarnLayerParams<'_> {
        let base = l * TENSORS_PER_LAYER;
        let shape = &self.layers[l];
        KarnLayerParams {
            index: l,
            input_dim: shape.input_dim,
            hidden_dim: shape.hidden_dim,
            grid: &shape.grid,
            spline_coeffs: self.params.data(base + SPLINE_COEFFS),
            spline_weight: self.params.data(base + SPLINE_WEIGHT),
            basis_weight: self.params.data(base + BASIS_WEIGHT),
            recurrent_weight: self.params.data(base + RECURRENT_WEIGHT),
            bias: self.params.data(base + BIAS),
        }
    }

    /// Mutable access to one of layer `l`'s tensors by name
    /// (`spline_coeffs`, `spline_weight`, `basis_weight`, `recurrent_weight`, `bias`).
    pub fn layer_tensor_mut(&mut self, l: usize, name: &str) -> Option<&mut [f64]> {
        let i = self.params.index_of(&layer_name(l, name))?;
        Some(self.params.data_mut(i))
    }

    /// Mutable head weight and bias.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let hw = self.head_weight_index();
        self.params.data_pair_mut(hw, hw + 1)
    }

    /// Time-major inputs of every layer and hidden sequences, for one sample
    /// given as `features x window`.
    fn run(&self, input: &[f64], window: usize) -> Result<KarnTrace> {
        let d0 = self.layers[0].input_dim;
        crate::error::shape("sample input", d0 * window, input.len())?;
        if window == 0 {
            return Err(Error::Empty("window length".into()));
        }
        let mut xs = vec![0.0; window * d0];
        for j in 0..d0 {
            for t in 0..window {
                xs[t * d0 + j] = input[j * window + t];
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let layer = self.layer(l);
            let (di, dh) = (layer.input_dim, layer.hidden_dim);
            let mut hs = vec![0.0; (window + 1) * dh];
            let mut silu_x = vec![0.0; di];
            for t in 0..window {
                let x = &xs[t * di..(t + 1) * di];
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("input of KARN layer {l}")));
                }
                for (s, &v) in silu_x.iter_mut().zip(x) {
                    *s = silu(v);
                }
                let spans = layer.spans(x)?;
                let (prev, next) = hs.split_at_mut((t + 1) * dh);
                layer.step_with(&silu_x, &spans, &prev[t * dh..], &mut next[..dh]);
            }
            if hs.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("hidden state of KARN layer {l}")));
            }
            let next_inputs = hs[dh..].to_vec();
            inputs.push(core::mem::replace(&mut xs, next_inputs));
            hidden.push(hs);
        }
        Ok(KarnTrace {
            window,
            inputs,
            hidden,
        })
    }

    fn layer_backward(
        &self,
        l: usize,
        xs: &[f64],
        hs: &[f64],
        dhs: &[f64],
        window: usize,
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>> {
        let layer = self.layer(l);
        let (di, dh) = (layer.input_dim, layer.hidden_dim);
        let nb = layer.grid.basis_count();
        let base = l * TENSORS_PER_LAYER;
        let mut dxs = vec![0.0; window * di];
        let mut carry = vec![0.0; dh];
        let mut dh_t = vec![0.0; dh];

        // split the gradient tensors of this layer into disjoint slices
        let (_, rest) = grads.tensors.split_at_mut(base);
        let (dc, rest) = rest.split_first_mut().unwrap();
        let (dws, rest) = rest.split_first_mut().unwrap();
        let (dwb, rest) = rest.split_first_mut().unwrap();
        let (dw, rest) = rest.split_first_mut().unwrap();
        let (db, _) = rest.split_first_mut().unwrap();

        for t in (1..=window).rev() {
            for k in 0..dh {
                dh_t[k] = dhs[t * dh + k] + carry[k];
            }
            let h_prev = &hs[(t - 1) * dh..t * dh];
            let x = &xs[(t - 1) * di..t * di];
            carry.fill(0.0);
            for k in 0..dh {
                let g = dh_t[k];
                if g == 0.0 {
                    continue;
                }
                db[k] += g;
                let w_row = &layer.recurrent_weight[k * dh..(k + 1) * dh];
                let dw_row = &mut dw[k * dh..(k + 1) * dh];
                for m in 0..dh {
                    dw_row[m] += g * h_prev[m];
                    carry[m] += g * w_row[m];
                }
            }
            let dx = &mut dxs[(t - 1) * di..t * di];
            for j in 0..di {
                let s = silu(x[j]);
                let sd = ops::silu_deriv(x[j]);
                let span = layer.grid.eval_span(x[j])?;
                let mut dxj = 0.0;
                for k in 0..dh {
                    let g = dh_t[k];
                    if g == 0.0 {
                        continue;
                    }
                    let e = k * di + j;
                    dwb[e] += g * s;
                    dxj += g * layer.basis_weight[e] * sd;
                    let coeffs = layer.edge_coeffs(k, j);
                    let ws = layer.spline_weight[e];
                    dws[e] += g * span.dot(coeffs);
                    let dce = &mut dc[e * nb + span.first..e * nb + span.first + span.len];
                    for (r, d) in dce.iter_mut().enumerate() {
                        *d += g * ws * span.values[r];
                    }
                    dxj += g * ws * span.dot_deriv(coeffs);
                }
                dx[j] = dxj;
            }
        }
        Ok(dxs)
    }

    /// Tie the spline coefficients of `edges` in layer `layer`. Coefficient
    /// vectors are averaged once and stay identical afterwards. Returns the
    /// lock id.
    pub fn lock_edges(&mut self, layer: usize, edges: &[(usize, usize)]) -> Result<usize> {
        let shape = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Lock(format!("layer {layer} does not exist")))?;
        let (di, dh, nb) = (shape.input_dim, shape.hidden_dim, shape.grid.basis_count());
        if edges.is_empty() {
            return Err(Error::Lock("no edges given".into()));
        }
        let unique: BTreeSet<_> = edges.iter().collect();
        if unique.len() != edges.len() {
            return Err(Error::Lock("edge listed twice".into()));
        }
        for &(k, j) in edges {
            if k >= dh || j >= di {
                return Err(Error::Lock(format!("edge ({k}, {j}) does not exist in layer {layer}")));
            }
            if self
                .locks
                .iter()
                .any(|g| g.layer == layer && g.edges.contains(&(k, j)))
            {
                return Err(Error::Lock(format!(
                    "edge ({k}, {j}) of layer {layer} already belongs to a lock group"
                )));
            }
        }
        let tensor = layer * TENSORS_PER_LAYER + SPLINE_COEFFS;
        if edges.len() > 1 {
            for i in 0..nb {
                let sites: Vec<Coord> = edges
                    .iter()
                    .map(|&(k, j)| Coord {
                        tensor,
                        index: (k * di + j) * nb + i,
                    })
                    .collect();
                self.params.add_share_group(&sites)?;
            }
        }
        let id = self.next_lock_id;
        self.next_lock_id += 1;
        self.locks.push(LockGroup {
            id,
            layer,
            edges: edges.to_vec(),
        });
        Ok(id)
    }

    fn relock_layer(&mut self, layer: usize) -> Result<()> {
        let shape = &self.layers[layer];
        let (di, nb) = (shape.input_dim, shape.grid.basis_count());
        let tensor = layer * TENSORS_PER_LAYER + SPLINE_COEFFS;
        let groups: Vec<Vec<(usize, usize)>> = self
            .locks
            .iter()
            .filter(|g| g.layer == layer && g.edges.len() > 1)
            .map(|g| g.edges.clone())
            .collect();
        for edges in groups {
            for i in 0..nb {
                let sites: Vec<Coord> = edges
                    .iter()
                    .map(|&(k, j)| Coord {
                        tensor,
                        index: (k * di + j) * nb + i,
                    })
                    .collect();
                self.params.add_share_group(&sites)?;
            }
        }
        Ok(())
    }

    /// Time-major inputs seen by layer `l` for every sample of `batch`.
    pub fn layer_inputs(&self, l: usize, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>> {
        (0..batch.len())
            .map(|s| {
                let mut tr = self.run(batch.input(s), batch.window)?;
                Ok(core::mem::take(&mut tr.inputs[l]))
            })
            .collect()
    }

    /// Spline-branch outputs of layer `l` at every step of every sample,
    /// flattened `samples x window x hidden`.
    pub fn spline_branch_outputs(&self, l: usize, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let layer = self.layer(l);
        let mut out = Vec::new();
        for xs in self.layer_inputs(l, batch)? {
            for x in xs.chunks(layer.input_dim) {
                out.extend(spline_branch(&layer, x)?);
            }
        }
        Ok(out)
    }

    /// Refit layer `layer_index`'s spline coefficients onto a grid with
    /// `new_interior_count` intervals. Each edge is refitted by least squares
    /// at the inputs it receives on `probe_batch`; every other parameter is
    /// left untouched.
    pub fn extend_network_grid(
        &mut self,
        layer_index: usize,
        new_interior_count: usize,
        probe_batch: &SequenceBatch,
    ) -> Result<LayerExtension> {
        if layer_index >= self.layers.len() {
            return Err(Error::Extension(format!("layer {layer_index} does not exist")));
        }
        if probe_batch.is_empty() {
            return Err(Error::Extension("probe batch is empty".into()));
        }
        let old_grid = self.layers[layer_index].grid.clone();
        if new_interior_count <= old_grid.interior_count() {
            return Err(Error::Extension(format!(
                "new interval count {new_interior_count} must exceed current {}",
                old_grid.interior_count()
            )));
        }
        let (di, dh) = (
            self.layers[layer_index].input_dim,
            self.layers[layer_index].hidden_dim,
        );
        let nb_old = old_grid.basis_count();

        let mut captured: Vec<Vec<f64>> = vec![Vec::new(); di];
        for xs in self.layer_inputs(layer_index, probe_batch)? {
            for x in xs.chunks(di) {
                for (j, &v) in x.iter().enumerate() {
                    captured[j].push(v);
                }
            }
        }

        let new_grid = old_grid.with_interior_count(new_interior_count)?;
        let nb_new = new_grid.basis_count();
        let coeffs = self.layer(layer_index).spline_coeffs.to_vec();
        let old_edge = |k: usize, j: usize| &coeffs[(k * di + j) * nb_old..(k * di + j + 1) * nb_old];
        let mut new_coeffs = vec![0.0; dh * di * nb_new];
        let mut fallback_inputs = Vec::new();
        let mut rank_deficient_inputs = Vec::new();

        let locked: Vec<&LockGroup> = self
            .locks
            .iter()
            .filter(|g| g.layer == layer_index && g.edges.len() > 1)
            .collect();
        let is_locked = |k: usize, j: usize| locked.iter().any(|g| g.edges.contains(&(k, j)));

        for (j, values) in captured.iter().enumerate() {
            let (samples, fallback) = spline::refit_samples(&old_grid, new_interior_count, values);
            if fallback {
                fallback_inputs.push(j);
            }
            let ks: Vec<usize> = (0..dh).filter(|&k| !is_locked(k, j)).collect();
            if ks.is_empty() {
                continue;
            }
            let sets: Vec<&[f64]> = ks.iter().map(|&k| old_edge(k, j)).collect();
            let (_, fitted, deficient) =
                spline::extend_grid_many(&old_grid, &sets, new_interior_count, &samples)?;
            if deficient {
                rank_deficient_inputs.push(j);
            }
            for (&k, c) in ks.iter().zip(fitted) {
                let e = k * di + j;
                new_coeffs[e * nb_new..(e + 1) * nb_new].copy_from_slice(&c);
            }
        }
        for g in &locked {
            let inputs: BTreeSet<usize> = g.edges.iter().map(|&(_, j)| j).collect();
            let pooled: Vec<f64> = inputs.iter().flat_map(|&j| captured[j].iter().cloned()).collect();
            let (samples, _) = spline::refit_samples(&old_grid, new_interior_count, &pooled);
            let (k0, j0) = g.edges[0];
            let (_, fitted, _) =
                spline::extend_grid_many(&old_grid, &[old_edge(k0, j0)], new_interior_count, &samples)?;
            for &(k, j) in &g.edges {
                let e = k * di + j;
                new_coeffs[e * nb_new..(e + 1) * nb_new].copy_from_slice(&fitted[0]);
            }
        }

        let tensor = layer_index * TENSORS_PER_LAYER + SPLINE_COEFFS;
        self.params.replace(tensor, &[dh, di, nb_new], new_coeffs)?;
        self.layers[layer_index].grid = new_grid;
        self.relock_layer(layer_index)?;
        Ok(LayerExtension {
            layer: layer_index,
            old_interior_count: old_grid.interior_count(),
            new_interior_count,
            fallback_inputs,
            rank_deficient_inputs,
        })
    }
}

impl Recurrent for KarnNetwork {
    type Trace = KarnTrace;

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn trace(&self, input: &[f64], window: usize) -> Result<(Vec<f64>, KarnTrace)> {
        let tr = self.run(input, window)?;
        let hw = self.head_weight_index();
        let y = head::head_forward(
            self.head_mode,
            self.params.data(hw),
            self.params.data(hw + 1),
            tr.hidden.last().unwrap(),
            self.hidden_dim(),
            window,
            self.horizon,
        )?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("KARN forecast".into()));
        }
        Ok((y, tr))
    }

    fn backprop(&self, trace: &KarnTrace, d_forecast: &[f64], grads: &mut GradientSet) -> Result<()> {
        let window = trace.window;
        let top = self.layers.len() - 1;
        let hw = self.head_weight_index();
        let dh = self.hidden_dim();
        let mut dhs = vec![0.0; (window + 1) * dh];
        {
            let (dw, db) = grads.tensors[hw..].split_at_mut(1);
            head::head_backward(
                self.head_mode,
                self.params.data(hw),
                &trace.hidden[top],
                dh,
                window,
                d_forecast,
                &mut dw[0],
                &mut db[0],
                &mut dhs,
            );
        }
        for l in (0..self.layers.len()).rev() {
            let dxs = self.layer_backward(l, &trace.inputs[l], &trace.hidden[l], &dhs, window, grads)?;
            if l > 0 {
                let below = self.layers[l - 1].hidden_dim;
                dhs = vec![0.0; (window + 1) * below];
                dhs[below..].copy_from_slice(&dxs);
            }
        }
        Ok(())
    }

    fn extend_grid(&mut self, new_interior_count: usize, probe: &SequenceBatch) -> Result<bool> {
        for l in 0..self.layers.len() {
            self.extend_network_grid(l, new_interior_count, probe)?;
        }
        Ok(true)
    }
}
