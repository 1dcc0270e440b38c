//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! Two implementations share one parameterization: plain `f64` evaluation
//! (forward and inverse) used for sampling, and a taped forward used for
//! training and density evaluation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numcore::{softplus, Graph, Tensor, Var};

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;
/// Floor on the spline slope used when taking its logarithm.
pub const SLOPE_FLOOR: f64 = 1e-8;

static SLOPE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times a spline slope was floored at [`SLOPE_FLOOR`].
pub fn slope_clamp_count() -> u64 {
    SLOPE_CLAMPS.load(Ordering::Relaxed)
}

/// Offset so that a raw derivative parameter of 0 gives slope exactly 1.
pub fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

/// Raw parameters per transformed dimension: `K` widths, `K` heights,
/// `K − 1` interior derivatives.
pub fn raw_param_count(bins: usize) -> usize {
    3 * bins - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Knots of one monotone spline.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineKnots {
    pub widths: Vec<f64>,
    pub heights: Vec<f64>,
    /// The `K − 1` interior knot derivatives; both boundary derivatives are 1.
    pub derivatives: Vec<f64>,
    pub tail_bound: f64,
}

impl SplineKnots {
    pub fn new(widths: Vec<f64>, heights: Vec<f64>, derivatives: Vec<f64>, tail_bound: f64) -> Result<Self> {
        let k = widths.len();
        if k == 0 || heights.len() != k || derivatives.len() + 1 != k {
            return Err(Error::Shape(format!(
                "spline with {k} widths, {} heights, {} derivatives",
                heights.len(),
                derivatives.len()
            )));
        }
        if !(tail_bound > 0.0) {
            return Err(Error::Contract("tail bound must be positive".into()));
        }
        let span = 2.0 * tail_bound;
        for (what, v) in [("widths", &widths), ("heights", &heights)] {
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Contract(format!("bin {what} must be positive")));
            }
            let s: f64 = v.iter().sum();
            if (s - span).abs() > 1e-9 * span {
                return Err(Error::Contract(format!("bin {what} sum to {s}, expected {span}")));
            }
        }
        if derivatives.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Contract("knot derivatives must be positive".into()));
        }
        Ok(Self {
            widths,
            heights,
            derivatives,
            tail_bound,
        })
    }

    /// Knots from unconstrained network outputs (softmax widths and heights,
    /// softplus derivatives), matching the taped parameterization exactly.
    pub fn from_raw(raw: &[f64], bins: usize, tail_bound: f64) -> Self {
        assert_eq!(raw.len(), raw_param_count(bins));
        let span = 2.0 * tail_bound;
        let widths = normalized_bins(&raw[..bins], MIN_BIN_WIDTH, span);
        let heights = normalized_bins(&raw[bins..2 * bins], MIN_BIN_HEIGHT, span);
        let off = derivative_offset();
        let derivatives = raw[2 * bins..]
            .iter()
            .map(|&r| softplus(r + off) + MIN_DERIVATIVE)
            .collect();
        Self {
            widths,
            heights,
            derivatives,
            tail_bound,
        }
    }

    pub fn identity(bins: usize, tail_bound: f64) -> Self {
        let w = 2.0 * tail_bound / bins as f64;
        Self {
            widths: vec![w; bins],
            heights: vec![w; bins],
            derivatives: vec![1.0; bins - 1],
            tail_bound,
        }
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    fn knot_derivative(&self, i: usize) -> f64 {
        if i == 0 || i == self.bins() {
            1.0
        } else {
            self.derivatives[i - 1]
        }
    }

    /// Left edges of the bins, computed as `cumsum(w) − w − B`.
    fn left_edges(values: &[f64], bound: f64) -> Vec<f64> {
        let mut acc = 0.0;
        values
            .iter()
            .map(|&v| {
                acc += v;
                acc - v - bound
            })
            .collect()
    }

    /// Forward map of a single value: `(y, log dy/dx)`.
    pub fn forward(&self, x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("spline input {x}")));
        }
        let b = self.tail_bound;
        if !(-b..=b).contains(&x) {
            return Ok((x, 0.0));
        }
        let xs = Self::left_edges(&self.widths, b);
        let ys = Self::left_edges(&self.heights, b);
        let k = search(&xs, x);
        let (xk, wk, yk, hk) = (xs[k], self.widths[k], ys[k], self.heights[k]);
        let (dk, dk1) = (self.knot_derivative(k), self.knot_derivative(k + 1));
        let s = hk / wk;
        let xi = (x - xk) / wk;
        let xi1m = xi * (1.0 - xi);
        let num = hk * (s * xi * xi + dk * xi1m);
        let den = s + (dk1 + dk - 2.0 * s) * xi1m;
        let y = yk + num / den;
        let one_m = 1.0 - xi;
        let slope_num = s * s * (dk1 * xi * xi + 2.0 * s * xi1m + dk * one_m * one_m);
        let slope = slope_num / (den * den);
        Ok((y, floored_ln(slope)))
    }

    /// Inverse map: `(x, log dx/dy)`.
    pub fn inverse(&self, y: f64) -> Result<(f64, f64)> {
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("spline input {y}")));
        }
        let b = self.tail_bound;
        if !(-b..=b).contains(&y) {
            return Ok((y, 0.0));
        }
        let xs = Self::left_edges(&self.widths, b);
        let ys = Self::left_edges(&self.heights, b);
        let k = search(&ys, y);
        let (xk, wk, yk, hk) = (xs[k], self.widths[k], ys[k], self.heights[k]);
        let (dk, dk1) = (self.knot_derivative(k), self.knot_derivative(k + 1));
        let s = hk / wk;
        let dy = y - yk;
        let t = dk1 + dk - 2.0 * s;
        let a = hk * (s - dk) + dy * t;
        let bq = hk * dk - dy * t;
        let c = -s * dy;
        let disc = (bq * bq - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c) / (-bq - disc.sqrt());
        let x = xi * wk + xk;
        let xi1m = xi * (1.0 - xi);
        let den = s + t * xi1m;
        let one_m = 1.0 - xi;
        let slope_num = s * s * (dk1 * xi * xi + 2.0 * s * xi1m + dk * one_m * one_m);
        let slope = slope_num / (den * den);
        Ok((x, -floored_ln(slope)))
    }
}

fn floored_ln(slope: f64) -> f64 {
    if slope < SLOPE_FLOOR {
        SLOPE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        SLOPE_FLOOR.ln()
    } else {
        slope.ln()
    }
}

fn normalized_bins(raw: &[f64], min_frac: f64, span: f64) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|&r| (r - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let k = raw.len() as f64;
    e.iter()
        .map(|&v| ((v / z) * (1.0 - min_frac * k) + min_frac) * span)
        .collect()
}

/// Index of the bin containing `v`, given left edges.
fn search(left: &[f64], v: f64) -> usize {
    match left.iter().rposition(|&e| e <= v) {
        Some(k) => k,
        None => 0,
    }
}

/// Applies one spline per vector component. Returns the transformed vector
/// and the summed log-derivative of the chosen direction.
pub fn rq_spline(x: &[f64], params: &[SplineKnots], direction: Direction) -> Result<(Vec<f64>, f64)> {
    if x.len() != params.len() {
        return Err(Error::Shape(format!("{} inputs but {} splines", x.len(), params.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut log_det = 0.0;
    for (&v, p) in x.iter().zip(params) {
        let (y, ld) = match direction {
            Direction::Forward => p.forward(v)?,
            Direction::Inverse => p.inverse(v)?,
        };
        out.push(y);
        log_det += ld;
    }
    Ok((out, log_det))
}

/// Taped forward spline.
///
/// `x` is `[n, 1]`, `raw` is `[n, 3K − 1]`. Returns `(y, log_det)`, both
/// `[n, 1]`. Rows outside `[-B, B]` pass through with zero log-det.
pub fn spline_forward_tape(g: &mut Graph, x: Var, raw: Var, bins: usize, tail_bound: f64) -> (Var, Var) {
    let n = g.value(x).rows();
    let k = bins;
    let span = 2.0 * tail_bound;
    let bound = tail_bound;

    let bin_sizes = |g: &mut Graph, start: usize, min_frac: f64| {
        let r = g.cols(raw, start, k);
        let sm = g.softmax_rows(r);
        let sc = g.scale(sm, 1.0 - min_frac * k as f64);
        let fl = g.add_scalar(sc, min_frac);
        g.scale(fl, span)
    };
    let widths = bin_sizes(g, 0, MIN_BIN_WIDTH);
    let heights = bin_sizes(g, k, MIN_BIN_HEIGHT);

    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let derivs = if k > 1 {
        let rd = g.cols(raw, 2 * k, k - 1);
        let shifted = g.add_scalar(rd, derivative_offset());
        let sp = g.softplus(shifted);
        let d = g.add_scalar(sp, MIN_DERIVATIVE);
        g.concat(&[ones, d, ones])
    } else {
        g.concat(&[ones, ones])
    };

    let left = |g: &mut Graph, sizes: Var| {
        let c = g.cumsum_rows(sizes);
        let e = g.sub(c, sizes);
        g.add_scalar(e, -bound)
    };
    let xs = left(g, widths);
    let ys = left(g, heights);

    let xv = g.value(x).data().to_vec();
    let inside: Vec<bool> = xv.iter().map(|v| (-bound..=bound).contains(v)).collect();
    let xc = g.clamp(x, -bound, bound);
    let xc_vals = g.value(xc).data().to_vec();
    let idx: Vec<usize> = {
        let edges = g.value(xs);
        (0..n).map(|r| search(edges.row(r), xc_vals[r])).collect()
    };
    let idx1: Vec<usize> = idx.iter().map(|i| i + 1).collect();

    let xk = g.gather(xs, idx.clone());
    let wk = g.gather(widths, idx.clone());
    let yk = g.gather(ys, idx.clone());
    let hk = g.gather(heights, idx.clone());
    let dk = g.gather(derivs, idx);
    let dk1 = g.gather(derivs, idx1);

    let s = g.div(hk, wk);
    let dx = g.sub(xc, xk);
    let xi = g.div(dx, wk);
    let xi2 = g.square(xi);
    let negxi = g.neg(xi);
    let one_m = g.add_scalar(negxi, 1.0);
    let xi1m = g.mul(xi, one_m);

    // numerator h·(s ξ² + d_k ξ(1−ξ))
    let sxi2 = g.mul(s, xi2);
    let dkx = g.mul(dk, xi1m);
    let inner = g.add(sxi2, dkx);
    let num = g.mul(hk, inner);
    // denominator s + (d_{k+1} + d_k − 2s) ξ(1−ξ)
    let dsum = g.add(dk1, dk);
    let two_s = g.scale(s, 2.0);
    let t = g.sub(dsum, two_s);
    let tx = g.mul(t, xi1m);
    let den = g.add(s, tx);
    let frac = g.div(num, den);
    let y_in = g.add(yk, frac);

    // slope numerator s²(d_{k+1} ξ² + 2 s ξ(1−ξ) + d_k (1−ξ)²)
    let a1 = g.mul(dk1, xi2);
    let a2 = g.mul(two_s, xi1m);
    let om2 = g.square(one_m);
    let a3 = g.mul(dk, om2);
    let a12 = g.add(a1, a2);
    let poly = g.add(a12, a3);
    let s2 = g.square(s);
    let snum = g.mul(s2, poly);
    let lnum = g.log(snum);
    let lden = g.log(den);
    let lden2 = g.scale(lden, 2.0);
    let ld_in = g.sub(lnum, lden2);

    let zeros = g.constant(Tensor::zeros(&[n, 1]));
    let y = g.select(inside.clone(), y_in, x);
    let ld = g.select(inside, ld_in, zeros);
    (y, ld)
}
