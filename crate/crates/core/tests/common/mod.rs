#![allow(dead_code)]

use karn_core::data::SequenceBatch;
use karn_core::grad::Recurrent;
use karn_core::ops;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Polynomial coefficients, lowest degree first.
type Poly = Vec<f64>;

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Poly {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Piecewise-polynomial expansion of every B-spline basis function on an
/// arbitrary knot vector. `pieces[i][m]` is basis `i` on `[t_m, t_{m+1})`.
pub struct PiecewiseBasis {
    pub knots: Vec<f64>,
    pub degree: usize,
    pieces: Vec<Vec<Poly>>,
}

impl PiecewiseBasis {
    pub fn new(knots: &[f64], degree: usize) -> Self {
        let intervals = knots.len() - 1;
        // degree 0: indicator of one interval
        let mut level: Vec<Vec<Poly>> = (0..intervals)
            .map(|i| (0..intervals).map(|m| vec![if i == m { 1.0 } else { 0.0 }]).collect())
            .collect();
        for d in 1..=degree {
            let count = intervals - d;
            let mut next = Vec::with_capacity(count);
            for i in 0..count {
                let left_den = knots[i + d] - knots[i];
                let right_den = knots[i + d + 1] - knots[i + 1];
                // (x - t_i) / left_den and (t_{i+d+1} - x) / right_den
                let left: Poly = if left_den == 0.0 {
                    vec![0.0]
                } else {
                    vec![-knots[i] / left_den, 1.0 / left_den]
                };
                let right: Poly = if right_den == 0.0 {
                    vec![0.0]
                } else {
                    vec![knots[i + d + 1] / right_den, -1.0 / right_den]
                };
                let pieces = (0..intervals)
                    .map(|m| poly_add(&poly_mul(&left, &level[i][m]), &poly_mul(&right, &level[i + 1][m])))
                    .collect();
                next.push(pieces);
            }
            level = next;
        }
        Self {
            knots: knots.to_vec(),
            degree,
            pieces: level,
        }
    }

    pub fn count(&self) -> usize {
        self.pieces.len()
    }

    /// Interval containing `x`; the closing knot of the core range belongs to
    /// the interval on its left.
    pub fn interval(&self, x: f64, last_core: usize) -> usize {
        let m = self.knots.windows(2).position(|w| w[0] <= x && x < w[1]);
        m.unwrap_or(last_core).min(last_core)
    }

    pub fn eval(&self, x: f64, last_core: usize) -> Vec<f64> {
        let m = self.interval(x, last_core);
        self.pieces.iter().map(|p| poly_eval(&p[m], x)).collect()
    }
}

/// Oracle row for a uniform grid of degree `p` with `g` core intervals.
pub fn oracle_row(knots: &[f64], p: usize, g: usize, x: f64) -> Vec<f64> {
    PiecewiseBasis::new(knots, p).eval(x, p + g - 1)
}

pub fn random_batch(samples: usize, features: usize, window: usize, horizon: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SequenceBatch::empty(features, window, horizon);
    for s in 0..samples {
        let x = ops::uniform(&mut rng, 0.0, 1.0, features * window);
        let y = ops::uniform(&mut rng, 0.0, 1.0, horizon);
        b.push(&x, &y, s);
    }
    b
}

/// Overwrite every parameter with uniform noise (keeps share groups in sync).
pub fn randomize<M: Recurrent>(model: &mut M, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.params_mut();
    for i in 0..p.len() {
        for v in p.data_mut(i) {
            *v = rng.random_range(-scale..scale);
        }
    }
    p.sync_shared();
}
