//! Uniform B-spline grids.
//!
//! A [`KnotGrid`] covers a core range `[lo, hi]` split into `G` equal
//! intervals and padded with `p` extra knots on each side, so that exactly
//! `G + p` basis functions of degree `p` are supported on the core range and
//! sum to one everywhere on it. Inputs are clamped to the core range before
//! evaluation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstsq;

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 3;

/// Number of uniform probes used when no usable sample points are available.
pub const FALLBACK_PROBES: usize = 512;

/// Extended uniform knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    degree: usize,
    interior_count: usize,
    range_lo: f64,
    range_hi: f64,
    knots: Vec<f64>,
}

/// Non-zero basis values at one input: `values[r]` is `B_{first + r}(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpan {
    pub first: usize,
    pub len: usize,
    pub values: [f64; MAX_DEGREE + 1],
    /// `d B_{first + r} / dx` at the clamped input, zero when `x` was clamped.
    pub derivs: [f64; MAX_DEGREE + 1],
}

/// All `G + p` basis values at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasisRow {
    pub values: Vec<f64>,
}

/// Result of refitting coefficients onto a finer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridExtension {
    pub grid: KnotGrid,
    pub coeffs: Vec<f64>,
    /// Set when the fine-grid design matrix was rank deficient and the
    /// minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Build an extended uniform grid.
pub fn make_grid(
    degree: usize,
    interior_count: usize,
    range_lo: f64,
    range_hi: f64,
) -> Result<KnotGrid> {
    KnotGrid::new(degree, interior_count, range_lo, range_hi)
}

impl KnotGrid {
    pub fn new(degree: usize, interior_count: usize, range_lo: f64, range_hi: f64) -> Result<Self> {
        if !(1..=MAX_DEGREE).contains(&degree) {
            return Err(Error::InvalidGrid(format!(
                "degree must be in 1..={MAX_DEGREE}, got {degree}"
            )));
        }
        if interior_count == 0 {
            return Err(Error::InvalidGrid("interval count must be positive".into()));
        }
        if !(range_lo.is_finite() && range_hi.is_finite()) || range_lo >= range_hi {
            return Err(Error::InvalidGrid(format!(
                "range must satisfy lo < hi, got [{range_lo}, {range_hi}]"
            )));
        }
        let width = range_hi - range_lo;
        let g = interior_count as f64;
        let knots = (0..interior_count + 2 * degree + 1)
            .map(|i| {
                let offset = i as f64 - degree as f64;
                range_lo + width * (offset / g)
            })
            .collect();
        Ok(Self {
            degree,
            interior_count,
            range_lo,
            range_hi,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_lo, self.range_hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        self.interior_count + self.degree
    }

    pub fn spacing(&self) -> f64 {
        (self.range_hi - self.range_lo) / self.interior_count as f64
    }

    /// Same degree and range with a different interval count.
    pub fn with_interior_count(&self, interior_count: usize) -> Result<Self> {
        Self::new(self.degree, interior_count, self.range_lo, self.range_hi)
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.range_lo, self.range_hi)
    }

    /// Index `s` of the knot interval `[t_s, t_{s+1})` holding the clamped
    /// input. The right end of the core range is assigned to the last core
    /// interval so that the partition of unity holds there too.
    fn span_index(&self, x: f64) -> usize {
        let p = self.degree;
        let last = p + self.interior_count - 1;
        let guess = libm::floor((x - self.range_lo) / self.spacing());
        let mut s = if guess <= 0.0 {
            p
        } else {
            (p + guess as usize).min(last)
        };
        // floating point can put the guess one interval off near knots
        while s > p && x < self.knots[s] {
            s -= 1;
        }
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Non-zero basis values and their input derivatives at `x`.
    pub fn eval_span(&self, x: f64) -> Result<BasisSpan> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("spline input {x}")));
        }
        let inside = x >= self.range_lo && x <= self.range_hi;
        let xc = self.clamp(x);
        let p = self.degree;
        let s = self.span_index(xc);
        let t = &self.knots;

        // Cox-de Boor in triangular form; `prev` keeps the degree p-1 row.
        let mut n = [0.0; MAX_DEGREE + 1];
        let mut prev = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            if j == p {
                prev = n;
            }
            left[j] = xc - t[s + 1 - j];
            right[j] = t[s + j] - xc;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let mut derivs = [0.0; MAX_DEGREE + 1];
        if inside {
            let first = s - p;
            for (r, d) in derivs.iter_mut().enumerate().take(p + 1) {
                let i = first + r;
                let mut acc = 0.0;
                if r >= 1 {
                    let denom = t[i + p] - t[i];
                    if denom != 0.0 {
                        acc += p as f64 * prev[r - 1] / denom;
                    }
                }
                if r < p {
                    let denom = t[i + p + 1] - t[i + 1];
                    if denom != 0.0 {
                        acc -= p as f64 * prev[r] / denom;
                    }
                }
                *d = acc;
            }
        }

        Ok(BasisSpan {
            first: s - p,
            len: p + 1,
            values: n,
            derivs,
        })
    }
}

/// All basis values at `x` (after clamping to the core range).
pub fn eval_basis(grid: &KnotGrid, x: f64) -> Result<SplineBasisRow> {
    let span = grid.eval_span(x)?;
    let mut values = vec![0.0; grid.basis_count()];
    values[span.first..span.first + span.len].copy_from_slice(&span.values[..span.len]);
    Ok(SplineBasisRow { values })
}

/// `sum_i c_i B_i(x)`.
pub fn eval_spline(grid: &KnotGrid, coeffs: &[f64], x: f64) -> Result<f64> {
    crate::error::shape("spline coefficients", grid.basis_count(), coeffs.len())?;
    let span = grid.eval_span(x)?;
    Ok(span.dot(coeffs))
}

/// Derivative of [`eval_spline`] with respect to `x`; zero outside the core range.
pub fn eval_spline_deriv(grid: &KnotGrid, coeffs: &[f64], x: f64) -> Result<f64> {
    crate::error::shape("spline coefficients", grid.basis_count(), coeffs.len())?;
    let span = grid.eval_span(x)?;
    Ok(span.dot_deriv(coeffs))
}

impl BasisSpan {
    #[inline]
    pub fn dot(&self, coeffs: &[f64]) -> f64 {
        let c = &coeffs[self.first..self.first + self.len];
        c.iter().zip(&self.values).map(|(c, b)| c * b).sum()
    }

    #[inline]
    pub fn dot_deriv(&self, coeffs: &[f64]) -> f64 {
        let c = &coeffs[self.first..self.first + self.len];
        c.iter().zip(&self.derivs).map(|(c, b)| c * b).sum()
    }
}

/// Refit a coarse spline onto a grid with `new_interior_count` intervals by
/// least squares over `sample_points`.
pub fn extend_grid(
    old_grid: &KnotGrid,
    old_coeffs: &[f64],
    new_interior_count: usize,
    sample_points: &[f64],
) -> Result<GridExtension> {
    let (grid, mut coeffs, rank_deficient) =
        extend_grid_many(old_grid, &[old_coeffs], new_interior_count, sample_points)?;
    Ok(GridExtension {
        grid,
        coeffs: coeffs.pop().unwrap_or_default(),
        rank_deficient,
    })
}

/// [`extend_grid`] for several coefficient vectors sharing one grid and one
/// set of sample points. The design matrix is factored once.
pub fn extend_grid_many(
    old_grid: &KnotGrid,
    old_coeffs: &[&[f64]],
    new_interior_count: usize,
    sample_points: &[f64],
) -> Result<(KnotGrid, Vec<Vec<f64>>, bool)> {
    if new_interior_count <= old_grid.interior_count {
        return Err(Error::Extension(format!(
            "new interval count {new_interior_count} must exceed current {}",
            old_grid.interior_count
        )));
    }
    for c in old_coeffs {
        crate::error::shape("spline coefficients", old_grid.basis_count(), c.len())?;
    }
    if sample_points.is_empty() {
        return Err(Error::Extension("no sample points".into()));
    }
    let (lo, hi) = old_grid.range();
    if let Some(x) = sample_points
        .iter()
        .find(|x| !x.is_finite() || **x < lo || **x > hi)
    {
        return Err(Error::Extension(format!(
            "sample point {x} outside core range [{lo}, {hi}]"
        )));
    }
    let new_grid = old_grid.with_interior_count(new_interior_count)?;
    let cols = new_grid.basis_count();
    let distinct = sample_points
        .iter()
        .map(|x| x.to_bits())
        .collect::<BTreeSet<_>>()
        .len();
    if distinct < cols {
        return Err(Error::Extension(format!(
            "underdetermined: {distinct} distinct sample points for {cols} coefficients"
        )));
    }

    let rows = sample_points.len();
    let mut design = vec![0.0; rows * cols];
    let mut coarse_spans = Vec::with_capacity(rows);
    for (r, &x) in sample_points.iter().enumerate() {
        let span = new_grid.eval_span(x)?;
        let row = &mut design[r * cols..(r + 1) * cols];
        row[span.first..span.first + span.len].copy_from_slice(&span.values[..span.len]);
        coarse_spans.push(old_grid.eval_span(x)?);
    }
    let targets: Vec<Vec<f64>> = old_coeffs
        .iter()
        .map(|c| coarse_spans.iter().map(|s| s.dot(c)).collect())
        .collect();

    let solution = lstsq::min_norm_lstsq(&design, rows, cols, &targets);
    Ok((new_grid, solution.x, solution.rank < cols))
}

/// Sample points for refitting: the clamped inputs when they pin down every
/// fine-grid coefficient, otherwise [`FALLBACK_PROBES`] uniform probes. The
/// flag reports whether the fallback was taken.
pub fn refit_samples(grid: &KnotGrid, new_interior_count: usize, captured: &[f64]) -> (Vec<f64>, bool) {
    let needed = new_interior_count + grid.degree();
    let clamped: Vec<f64> = captured
        .iter()
        .filter(|x| x.is_finite())
        .map(|&x| grid.clamp(x))
        .collect();
    let distinct = clamped
        .iter()
        .map(|x| x.to_bits())
        .collect::<BTreeSet<_>>()
        .len();
    if distinct >= needed {
        (clamped, false)
    } else {
        (uniform_probes(grid, FALLBACK_PROBES), true)
    }
}

/// `count` evenly spaced points covering the core range, ends included.
pub fn uniform_probes(grid: &KnotGrid, count: usize) -> Vec<f64> {
    let (lo, hi) = grid.range();
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|k| lo + (hi - lo) * (k as f64 / (count - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_grid_knots() {
        let g = make_grid(1, 2, -1.0, 1.0).unwrap();
        assert_eq!(g.knots(), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.basis_count(), 3);
    }

    #[test]
    fn quadratic_grid_spacing() {
        let g = make_grid(2, 4, -1.0, 1.0).unwrap();
        assert_eq!(g.knots().len(), 9);
        for w in g.knots().windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() < 1e-12);
        }
        assert_eq!(g.basis_count(), 6);
        assert!((g.knots()[2] + 1.0).abs() < 1e-12);
        assert!((g.knots()[6] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn largest_search_grid() {
        assert_eq!(make_grid(3, 14, 0.0, 1.0).unwrap().basis_count(), 17);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(make_grid(0, 3, -1.0, 1.0).is_err());
        assert!(make_grid(4, 3, -1.0, 1.0).is_err());
        assert!(make_grid(2, 0, -1.0, 1.0).is_err());
        assert!(make_grid(2, 3, 1.0, -1.0).is_err());
        assert!(make_grid(2, 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn nan_rejected() {
        let g = make_grid(2, 3, -1.0, 1.0).unwrap();
        assert!(eval_basis(&g, f64::NAN).is_err());
    }

    #[test]
    fn hat_function_peak() {
        // knots -0.5, 0, 0.5, 1, 1.5: B_1 rises on [0, 0.5] and falls on [0.5, 1]
        let g = make_grid(1, 2, 0.0, 1.0).unwrap();
        let v = eval_spline(&g, &[0.0, 1.0, 0.0], 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = eval_spline(&g, &[0.0, 1.0, 0.0], 0.25).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn coefficient_length_checked() {
        let g = make_grid(2, 3, -1.0, 1.0).unwrap();
        assert!(eval_spline(&g, &[1.0; 4], 0.0).is_err());
    }

    #[test]
    fn clamping_holds_edge_values() {
        let g = make_grid(2, 3, -1.0, 1.0).unwrap();
        let c = [0.3, -1.0, 2.0, 0.5, 0.7];
        let at_hi = eval_spline(&g, &c, 1.0).unwrap();
        assert_eq!(eval_spline(&g, &c, 7.0).unwrap(), at_hi);
        assert_eq!(eval_spline_deriv(&g, &c, 7.0).unwrap(), 0.0);
        assert_eq!(eval_spline_deriv(&g, &c, -3.0).unwrap(), 0.0);
        let row = eval_basis(&g, 1.0).unwrap();
        assert!((row.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_spline_extension() {
        let g = make_grid(2, 4, -1.0, 1.0).unwrap();
        let c = vec![0.7; g.basis_count()];
        let probes = uniform_probes(&g, 200);
        let ext = extend_grid(&g, &c, 8, &probes).unwrap();
        assert_eq!(ext.grid.interior_count(), 8);
        assert!(!ext.rank_deficient);
        for v in &ext.coeffs {
            assert!((v - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn extension_rejects_bad_requests() {
        let g = make_grid(2, 4, -1.0, 1.0).unwrap();
        let c = vec![0.0; g.basis_count()];
        let probes = uniform_probes(&g, 50);
        assert!(extend_grid(&g, &c, 4, &probes).is_err());
        assert!(extend_grid(&g, &c, 6, &[]).is_err());
        assert!(extend_grid(&g, &c, 6, &[0.1; 100]).is_err());
        assert!(extend_grid(&g, &c, 6, &[2.0; 100]).is_err());
    }

    #[test]
    fn rank_deficient_samples_flagged() {
        // samples only in [0, 1] leave the leftmost fine bases unconstrained
        let g = make_grid(2, 4, -1.0, 1.0).unwrap();
        let c: Vec<f64> = (0..g.basis_count()).map(|i| i as f64 * 0.1).collect();
        let samples: Vec<f64> = (0..100).map(|k| k as f64 / 99.0).collect();
        let ext = extend_grid(&g, &c, 8, &samples).unwrap();
        assert!(ext.rank_deficient);
        for &x in &samples {
            let a = eval_spline(&g, &c, x).unwrap();
            let b = eval_spline(&ext.grid, &ext.coeffs, x).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn refit_samples_fallback() {
        let g = make_grid(2, 4, -1.0, 1.0).unwrap();
        let (s, fallback) = refit_samples(&g, 10, &[0.0, 0.5]);
        assert!(fallback);
        assert_eq!(s.len(), FALLBACK_PROBES);
        let many: Vec<f64> = (0..40).map(|k| k as f64 / 10.0 - 2.0).collect();
        let (s, fallback) = refit_samples(&g, 10, &many);
        assert!(!fallback);
        assert_eq!(s.len(), 40);
        assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
