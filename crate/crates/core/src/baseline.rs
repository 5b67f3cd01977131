//! Vanilla RNN, GRU and LSTM forecasters with the same head as KARN.
//!
//! Gate layout inside the stacked weight matrices:
//! GRU `[reset, update, candidate]`, LSTM `[input, forget, cell, output]`.
//!
//! ```text
//! vanilla  h' = tanh(Wx x + Wh h + b)
//! GRU      r = σ(..), z = σ(..), n = tanh(Wxn x + bn + r ⊙ (Whn h)), h' = (1 - z) ⊙ n + z ⊙ h
//! LSTM     i, f, o = σ(..), g = tanh(..), c' = f ⊙ c + i ⊙ g, h' = o ⊙ tanh(c')
//! ```

use core::fmt;
use core::str::FromStr;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{GradientSet, ParameterSet, Recurrent};
use crate::head::{self, HeadMode};
use crate::ops::{self, sigmoid, tanh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "vanilla" => Ok(CellKind::Vanilla),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown recurrent cell `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub horizon: usize,
    pub head: HeadMode,
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    /// LSTM cell state; empty for the other cells.
    pub c: Vec<f64>,
}

/// Borrowed view of one layer's gate tensors.
#[derive(Debug, Clone, Copy)]
pub struct BaselineLayerParams<'a> {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `gates * hidden x input`
    pub weight_ih: &'a [f64],
    /// `gates * hidden x hidden`
    pub weight_hh: &'a [f64],
    /// `gates * hidden`
    pub bias: &'a [f64],
}

/// Per-step values kept for backpropagation.
#[derive(Debug, Clone)]
struct StepCache {
    /// Post-activation gates, `gates * hidden`.
    gates: Vec<f64>,
    /// GRU: `Whn h_prev`. LSTM: `tanh(c_t)`.
    extra: Vec<f64>,
}

impl BaselineLayerParams<'_> {
    fn affine(&self, x: &[f64], h: &[f64], gate_x: &mut [f64], gate_h: &mut [f64]) {
        let (di, dh) = (self.input_dim, self.hidden_dim);
        for r in 0..self.cell.gates() * dh {
            gate_x[r] = self.bias[r] + head::dot(&self.weight_ih[r * di..(r + 1) * di], x);
            gate_h[r] = head::dot(&self.weight_hh[r * dh..(r + 1) * dh], h);
        }
    }

    fn step_cached(&self, x: &[f64], state: &CellState) -> (CellState, StepCache) {
        let dh = self.hidden_dim;
        let g = self.cell.gates();
        let mut gx = vec![0.0; g * dh];
        let mut gh = vec![0.0; g * dh];
        self.affine(x, &state.h, &mut gx, &mut gh);
        match self.cell {
            CellKind::Vanilla => {
                let h: Vec<f64> = (0..dh).map(|k| tanh(gx[k] + gh[k])).collect();
                (
                    CellState { h: h.clone(), c: Vec::new() },
                    StepCache { gates: h, extra: Vec::new() },
                )
            }
            CellKind::Gru => {
                let mut gates = vec![0.0; 3 * dh];
                let mut h = vec![0.0; dh];
                for k in 0..dh {
                    let r = sigmoid(gx[k] + gh[k]);
                    let z = sigmoid(gx[dh + k] + gh[dh + k]);
                    let n = tanh(gx[2 * dh + k] + r * gh[2 * dh + k]);
                    gates[k] = r;
                    gates[dh + k] = z;
                    gates[2 * dh + k] = n;
                    h[k] = (1.0 - z) * n + z * state.h[k];
                }
                let extra = gh[2 * dh..].to_vec();
                (CellState { h, c: Vec::new() }, StepCache { gates, extra })
            }
            CellKind::Lstm => {
                let mut gates = vec![0.0; 4 * dh];
                let mut h = vec![0.0; dh];
                let mut c = vec![0.0; dh];
                let mut tc = vec![0.0; dh];
                for k in 0..dh {
                    let i = sigmoid(gx[k] + gh[k]);
                    let f = sigmoid(gx[dh + k] + gh[dh + k]);
                    let gg = tanh(gx[2 * dh + k] + gh[2 * dh + k]);
                    let o = sigmoid(gx[3 * dh + k] + gh[3 * dh + k]);
                    gates[k] = i;
                    gates[dh + k] = f;
                    gates[2 * dh + k] = gg;
                    gates[3 * dh + k] = o;
                    c[k] = f * state.c[k] + i * gg;
                    tc[k] = tanh(c[k]);
                    h[k] = o * tc[k];
                }
                (CellState { h, c }, StepCache { gates, extra: tc })
            }
        }
    }

    pub fn initial_state(&self) -> CellState {
        CellState {
            h: vec![0.0; self.hidden_dim],
            c: if self.cell == CellKind::Lstm {
                vec![0.0; self.hidden_dim]
            } else {
                Vec::new()
            },
        }
    }
}

/// One recurrent update of a baseline cell.
pub fn baseline_step(layer: &BaselineLayerParams<'_>, x: &[f64], state: &CellState) -> Result<CellState> {
    crate::error::shape("cell input", layer.input_dim, x.len())?;
    crate::error::shape("cell hidden state", layer.hidden_dim, state.h.len())?;
    if layer.cell == CellKind::Lstm {
        crate::error::shape("cell memory", layer.hidden_dim, state.c.len())?;
    }
    let (next, _) = layer.step_cached(x, state);
    if next.h.iter().chain(&next.c).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} state", layer.cell)));
    }
    Ok(next)
}

#[derive(Debug, Clone)]
struct LayerTrace {
    /// Time-major inputs, `window x input_dim`.
    inputs: Vec<f64>,
    /// `h_0 .. h_n`.
    hidden: Vec<f64>,
    /// LSTM `c_0 .. c_n`, otherwise empty.
    cells: Vec<f64>,
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
pub struct BaselineTrace {
    window: usize,
    layers: Vec<LayerTrace>,
}

const TENSORS_PER_LAYER: usize = 3;

/// Stacked recurrent baseline with an affine forecast head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNet {
    cell: CellKind,
    dims: Vec<(usize, usize)>,
    horizon: usize,
    head_mode: HeadMode,
    params: ParameterSet,
}

impl RecurrentNet {
    /// Xavier-uniform weights (per gate block), zero biases.
    pub fn new<R: Rng + ?Sized>(config: &BaselineConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let g = config.cell.gates();
        for (l, &(di, dh)) in net.dims.clone().iter().enumerate() {
            let base = l * TENSORS_PER_LAYER;
            let mut wih = Vec::with_capacity(g * dh * di);
            let mut whh = Vec::with_capacity(g * dh * dh);
            for _ in 0..g {
                wih.extend(ops::xavier_uniform(rng, di, dh, dh * di));
            }
            for _ in 0..g {
                whh.extend(ops::xavier_uniform(rng, dh, dh, dh * dh));
            }
            net.params.data_mut(base).copy_from_slice(&wih);
            net.params.data_mut(base + 1).copy_from_slice(&whh);
        }
        let hw = net.head_weight_index();
        let dh = config.hidden_dim;
        let n = net.params.data(hw).len();
        net.params
            .data_mut(hw)
            .copy_from_slice(&ops::xavier_uniform(rng, dh, n / dh, n));
        Ok(net)
    }

    pub fn zeros(config: &BaselineConfig) -> Result<Self> {
        if config.num_layers == 0 {
            return Err(Error::Config("a recurrent baseline needs at least one layer".into()));
        }
        if config.input_dim == 0 || config.hidden_dim == 0 || config.horizon == 0 {
            return Err(Error::Config("baseline dimensions must be positive".into()));
        }
        let g = config.cell.gates();
        let mut params = ParameterSet::new();
        let mut dims = Vec::new();
        for l in 0..config.num_layers {
            let di = if l == 0 { config.input_dim } else { config.hidden_dim };
            let dh = config.hidden_dim;
            params.push(&format!("layer{l}.weight_ih"), &[g * dh, di], vec![0.0; g * dh * di])?;
            params.push(&format!("layer{l}.weight_hh"), &[g * dh, dh], vec![0.0; g * dh * dh])?;
            params.push(&format!("layer{l}.bias"), &[g * dh], vec![0.0; g * dh])?;
            dims.push((di, dh));
        }
        let ws = config.head.weight_shape(config.hidden_dim, config.horizon);
        params.push("head.weight", &ws, vec![0.0; ws[0] * ws[1]])?;
        let bl = config.head.bias_len(config.horizon);
        params.push("head.bias", &[bl], vec![0.0; bl])?;
        Ok(Self {
            cell: config.cell,
            dims,
            horizon: config.horizon,
            head_mode: config.head,
            params,
        })
    }

    /// Reassemble from stored tensors.
    pub fn from_parts(
        cell: CellKind,
        dims: Vec<(usize, usize)>,
        horizon: usize,
        head_mode: HeadMode,
        params: ParameterSet,
    ) -> Result<Self> {
        let config = BaselineConfig {
            cell,
            input_dim: dims.first().map(|d| d.0).unwrap_or(0),
            hidden_dim: dims.first().map(|d| d.1).unwrap_or(0),
            num_layers: dims.len(),
            horizon,
            head: head_mode,
        };
        let template = Self::zeros(&config)?;
        crate::error::shape("tensor count", template.params.len(), params.len())?;
        for (a, b) in template.params.tensors().iter().zip(params.tensors()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Config(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        params.check_finite()?;
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn cell(&self) -> CellKind {
        self.cell
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn hidden_dim(&self) -> usize {
        self.dims.last().map(|d| d.1).unwrap_or(0)
    }

    fn head_weight_index(&self) -> usize {
        self.dims.len() * TENSORS_PER_LAYER
    }

    pub fn layer(&self, l: usize) -> BaselineLayerParams<'_> {
        let base = l * TENSORS_PER_LAYER;
        BaselineLayerParams {
            cell: self.cell,
            input_dim: self.dims[l].0,
            hidden_dim: self.dims[l].1,
            weight_ih: self.params.data(base),
            weight_hh: self.params.data(base + 1),
            bias: self.params.data(base + 2),
        }
    }

    /// Layer `l`'s `weight_ih`, `weight_hh` and `bias`, mutably.
    pub fn layer_tensor_mut(&mut self, l: usize, name: &str) -> Option<&mut [f64]> {
        let i = self.params.index_of(&format!("layer{l}.{name}"))?;
        Some(self.params.data_mut(i))
    }

    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let hw = self.head_weight_index();
        self.params.data_pair_mut(hw, hw + 1)
    }

    fn layer_backward(
        &self,
        l: usize,
        tr: &LayerTrace,
        dhs: &[f64],
        window: usize,
        grads: &mut GradientSet,
    ) -> Vec<f64> {
        let layer = self.layer(l);
        let (di, dh) = (layer.input_dim, layer.hidden_dim);
        let g = self.cell.gates();
        let base = l * TENSORS_PER_LAYER;
        let (_, rest) = grads.tensors.split_at_mut(base);
        let (dwih, rest) = rest.split_first_mut().unwrap();
        let (dwhh, rest) = rest.split_first_mut().unwrap();
        let (db, _) = rest.split_first_mut().unwrap();

        let mut dxs = vec![0.0; window * di];
        let mut dh_carry = vec![0.0; dh];
        let mut dc_carry = vec![0.0; dh];
        // gradients w.r.t. the input-side and hidden-side pre-activations
        let mut da_x = vec![0.0; g * dh];
        let mut da_h = vec![0.0; g * dh];

        for t in (1..=window).rev() {
            let cache = &tr.steps[t - 1];
            let h_prev = &tr.hidden[(t - 1) * dh..t * dh];
            let x = &tr.inputs[(t - 1) * di..t * di];
            let dh_t: Vec<f64> = (0..dh).map(|k| dhs[t * dh + k] + dh_carry[k]).collect();
            let mut dh_prev = vec![0.0; dh];
            match self.cell {
                CellKind::Vanilla => {
                    for k in 0..dh {
                        let h = cache.gates[k];
                        let da = dh_t[k] * (1.0 - h * h);
                        da_x[k] = da;
                        da_h[k] = da;
                    }
                }
                CellKind::Gru => {
                    for k in 0..dh {
                        let r = cache.gates[k];
                        let z = cache.gates[dh + k];
                        let n = cache.gates[2 * dh + k];
                        let hn = cache.extra[k];
                        let d = dh_t[k];
                        let dn = d * (1.0 - z);
                        let dz = d * (h_prev[k] - n);
                        dh_prev[k] += d * z;
                        let dan = dn * (1.0 - n * n);
                        let dr = dan * hn;
                        let dar = dr * r * (1.0 - r);
                        let daz = dz * z * (1.0 - z);
                        da_x[k] = dar;
                        da_h[k] = dar;
                        da_x[dh + k] = daz;
                        da_h[dh + k] = daz;
                        da_x[2 * dh + k] = dan;
                        da_h[2 * dh + k] = dan * r;
                    }
                }
                CellKind::Lstm => {
                    let c_prev = &tr.cells[(t - 1) * dh..t * dh];
                    for k in 0..dh {
                        let i = cache.gates[k];
                        let f = cache.gates[dh + k];
                        let gg = cache.gates[2 * dh + k];
                        let o = cache.gates[3 * dh + k];
                        let tc = cache.extra[k];
                        let d = dh_t[k];
                        let dc = dc_carry[k] + d * o * (1.0 - tc * tc);
                        let dai = dc * gg * i * (1.0 - i);
                        let daf = dc * c_prev[k] * f * (1.0 - f);
                        let dag = dc * i * (1.0 - gg * gg);
                        let dao = d * tc * o * (1.0 - o);
                        dc_carry[k] = dc * f;
                        for (gate, v) in [dai, daf, dag, dao].into_iter().enumerate() {
                            da_x[gate * dh + k] = v;
                            da_h[gate * dh + k] = v;
                        }
                    }
                }
            }
            let dx = &mut dxs[(t - 1) * di..t * di];
            for r in 0..g * dh {
                let ax = da_x[r];
                if ax != 0.0 {
                    db[r] += ax;
                    let w = &layer.weight_ih[r * di..(r + 1) * di];
                    let dw = &mut dwih[r * di..(r + 1) * di];
                    for j in 0..di {
                        dw[j] += ax * x[j];
                        dx[j] += ax * w[j];
                    }
                }
                let ah = da_h[r];
                if ah != 0.0 {
                    let w = &layer.weight_hh[r * dh..(r + 1) * dh];
                    let dw = &mut dwhh[r * dh..(r + 1) * dh];
                    for m in 0..dh {
                        dw[m] += ah * h_prev[m];
                        dh_prev[m] += ah * w[m];
                    }
                }
            }
            dh_carry = dh_prev;
        }
        dxs
    }
}

impl Recurrent for RecurrentNet {
    type Trace = BaselineTrace;

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.dims[0].0
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn trace(&self, input: &[f64], window: usize) -> Result<(Vec<f64>, BaselineTrace)> {
        let d0 = self.dims[0].0;
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
        let mut layers = Vec::with_capacity(self.dims.len());
        for l in 0..self.dims.len() {
            let layer = self.layer(l);
            let (di, dh) = (layer.input_dim, layer.hidden_dim);
            let mut state = layer.initial_state();
            let mut hidden = Vec::with_capacity((window + 1) * dh);
            let mut cells = Vec::new();
            hidden.extend_from_slice(&state.h);
            cells.extend_from_slice(&state.c);
            let mut steps = Vec::with_capacity(window);
            for t in 0..window {
                let (next, cache) = layer.step_cached(&xs[t * di..(t + 1) * di], &state);
                hidden.extend_from_slice(&next.h);
                cells.extend_from_slice(&next.c);
                steps.push(cache);
                state = next;
            }
            if hidden.iter().chain(&cells).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} layer {l} state", self.cell)));
            }
            let next_inputs = hidden[dh..].to_vec();
            layers.push(LayerTrace {
                inputs: core::mem::replace(&mut xs, next_inputs),
                hidden,
                cells,
                steps,
            });
        }
        let hw = self.head_weight_index();
        let y = head::head_forward(
            self.head_mode,
            self.params.data(hw),
            self.params.data(hw + 1),
            &layers.last().unwrap().hidden,
            self.hidden_dim(),
            window,
            self.horizon,
        )?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} forecast", self.cell)));
        }
        Ok((y, BaselineTrace { window, layers }))
    }

    fn backprop(&self, trace: &BaselineTrace, d_forecast: &[f64], grads: &mut GradientSet) -> Result<()> {
        let window = trace.window;
        let hw = self.head_weight_index();
        let dh = self.hidden_dim();
        let mut dhs = vec![0.0; (window + 1) * dh];
        {
            let (dw, db) = grads.tensors[hw..].split_at_mut(1);
            head::head_backward(
                self.head_mode,
                self.params.data(hw),
                &trace.layers.last().unwrap().hidden,
                dh,
                window,
                d_forecast,
                &mut dw[0],
                &mut db[0],
                &mut dhs,
            );
        }
        for l in (0..self.dims.len()).rev() {
            let dxs = self.layer_backward(l, &trace.layers[l], &dhs, window, grads);
            if l > 0 {
                let below = self.dims[l - 1].1;
                dhs = vec![0.0; (window + 1) * below];
                dhs[below..].copy_from_slice(&dxs);
            }
        }
        Ok(())
    }
}
