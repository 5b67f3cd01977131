//! SGD, Adam and AdamW.

use core::fmt;
use core::str::FromStr;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{GradientSet, ParameterSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAMW_DECAY: f64 = 1e-2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
    AdamW,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::AdamW];
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected adam, sgd or adamw)"
            ))),
        }
    }
}

/// Optimizer with lazily allocated moment buffers.
///
/// Moments are reallocated whenever a tensor changes size (grid extension).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, tensor: usize) -> Option<&[f64]> {
        self.first.get(tensor).map(|v| v.as_slice())
    }

    pub fn second_moment(&self, tensor: usize) -> Option<&[f64]> {
        self.second.get(tensor).map(|v| v.as_slice())
    }

    /// Drop moment state, e.g. after the parameter layout changed.
    pub fn reset(&mut self) {
        self.step = 0;
        self.first.clear();
        self.second.clear();
    }

    fn ensure_state(&mut self, params: &ParameterSet) {
        let congruent = self.first.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(&self.first)
                .all(|(t, m)| t.data.len() == m.len());
        if !congruent {
            self.first = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
            self.second = self.first.clone();
        }
    }

    /// One update. Shared coordinates carry identical gradients, so every
    /// alias receives the same update; aliases are re-synced afterwards.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientSet, lr: f64) -> Result<()> {
        crate::error::shape("gradient tensor count", params.len(), grads.tensors.len())?;
        for (i, g) in grads.tensors.iter().enumerate() {
            crate::error::shape(&grads.names[i], params.data(i).len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`", grads.names[i])));
            }
        }
        if self.kind != OptimizerKind::Sgd {
            self.ensure_state(params);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
        for (i, g) in grads.tensors.iter().enumerate() {
            if !params.tensor(i).trainable {
                continue;
            }
            let p = params.data_mut(i);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for c in 0..p.len() {
                        let d = g[c];
                        m[c] = ADAM_BETA1 * m[c] + (1.0 - ADAM_BETA1) * d;
                        v[c] = ADAM_BETA2 * v[c] + (1.0 - ADAM_BETA2) * d * d;
                        let mh = m[c] / bc1;
                        let vh = v[c] / bc2;
                        if self.kind == OptimizerKind::AdamW {
                            p[c] -= lr * ADAMW_DECAY * p[c];
                        }
                        p[c] -= lr * mh / (libm::sqrt(vh) + ADAM_EPS);
                    }
                }
            }
        }
        params.sync_shared();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Coord;
    use alloc::string::ToString;

    fn one(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("w", &[1], vec![value]).unwrap();
        p
    }

    fn grad(p: &ParameterSet, g: f64) -> GradientSet {
        let mut gs = GradientSet::zeros_like(p);
        gs.tensors[0][0] = g;
        gs
    }

    fn grad1(g: f64) -> GradientSet {
        grad(&one(0.0), g)
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0);
        let g = grad(&p, 2.0);
        Optimizer::new(OptimizerKind::Sgd).step(&mut p, &g, 0.1).unwrap();
        assert!((p.data(0)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign() {
        for g0 in [3.0, -0.02, 250.0] {
            let mut p = one(0.5);
            let g = grad(&p, g0);
            Optimizer::new(OptimizerKind::Adam).step(&mut p, &g, 1e-3).unwrap();
            let expect = 0.5 - 1e-3 * g0 / (libm::fabs(g0) + 1e-8);
            assert!((p.data(0)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        for kind in OptimizerKind::ALL {
            let mut fresh = one(0.5);
            Optimizer::new(kind).step(&mut fresh, &grad1(0.0), 1e-3).unwrap();
            let expect = if kind == OptimizerKind::AdamW { 0.5 - 1e-3 * ADAMW_DECAY * 0.5 } else { 0.5 };
            assert_eq!(fresh.data(0)[0], expect);
        }
        let mut p = one(0.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut p, &grad1(1.0), 1e-3).unwrap();
        let after = p.data(0)[0];
        let m1 = opt.first_moment(0).unwrap()[0];
        let mut sgd = Optimizer::new(OptimizerKind::Sgd);
        let mut q = p.clone();
        sgd.step(&mut q, &grad1(0.0), 1.0).unwrap();
        assert_eq!(q.data(0)[0], after);
        opt.step(&mut p, &grad1(0.0), 1e-3).unwrap();
        assert!((opt.first_moment(0).unwrap()[0] - 0.9 * m1).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut p = one(0.5);
        let g = grad(&p, f64::NAN);
        let err = Optimizer::new(OptimizerKind::AdamW).step(&mut p, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.data(0)[0], 0.5);
    }

    #[test]
    fn frozen_tensor_untouched_and_shares_stay_equal() {
        let mut p = ParameterSet::new();
        p.push("a", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        p.push("b", &[1], vec![4.0]).unwrap();
        p.set_trainable(1, false);
        p.add_share_group(&[Coord { tensor: 0, index: 0 }, Coord { tensor: 0, index: 2 }])
            .unwrap();
        let mut g = GradientSet::zeros_like(&p);
        g.tensors[0] = vec![0.3, -1.0, 0.5];
        g.tensors[1] = vec![9.0];
        p.accumulate_shared(&mut g);
        let mut opt = Optimizer::new(OptimizerKind::AdamW);
        for _ in 0..4 {
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert_eq!(p.data(1), &[4.0]);
        assert_eq!(p.data(0)[0], p.data(0)[2]);
    }

    #[test]
    fn kinds_parse() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.to_string().parse::<OptimizerKind>().unwrap(), k);
        }
    }
}
