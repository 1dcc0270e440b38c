//! Power-iteration estimate of the largest singular value.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the singular value estimate.
pub const SIGMA_FLOOR: f64 = f64::EPSILON;

/// Persistent left-singular vector for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f64>,
}

impl PowerIteration {
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut u);
        Self { u }
    }

    /// Runs `iters` rounds of `v = Wᵀu/‖Wᵀu‖, u = Wv/‖Wv‖`, updating `u` in
    /// place, and returns `(σ̂, v)` with `σ̂ = uᵀWv`.
    pub fn run(&mut self, w: &Tensor, iters: usize) -> (f64, Vec<f64>) {
        let (r, c) = (w.rows(), w.cols());
        debug_assert_eq!(self.u.len(), r);
        let mut v = vec![0.0; c];
        for _ in 0..iters.max(1) {
            mat_t_vec(w, &self.u, &mut v);
            normalize(&mut v);
            let mut u = vec![0.0; r];
            mat_vec(w, &v, &mut u);
            if normalize(&mut u) > 0.0 {
                self.u = u;
            }
        }
        // one more half-step so v matches the final u
        mat_t_vec(w, &self.u, &mut v);
        normalize(&mut v);
        let mut wv = vec![0.0; r];
        mat_vec(w, &v, &mut wv);
        let sigma: f64 = self.u.iter().zip(&wv).map(|(a, b)| a * b).sum();
        (sigma, v)
    }

    /// Estimate with the current `u`, without updating it.
    pub fn estimate(&self, w: &Tensor) -> (f64, Vec<f64>) {
        let mut v = vec![0.0; w.cols()];
        mat_t_vec(w, &self.u, &mut v);
        normalize(&mut v);
        let mut wv = vec![0.0; w.rows()];
        mat_vec(w, &v, &mut wv);
        let sigma = self.u.iter().zip(&wv).map(|(a, b)| a * b).sum();
        (sigma, v)
    }
}

/// Returns `(weight / σ̂, σ̂)`. A (numerically) zero matrix yields `σ̂` at the
/// floor and the weight unchanged.
pub fn spectral_normalize(weight: &Tensor, iters: usize, state: &mut PowerIteration) -> Result<(Tensor, f64)> {
    if weight.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "spectral normalization needs a matrix, got {:?}",
            weight.shape()
        )));
    }
    if iters == 0 {
        return Err(Error::Contract("power iteration count must be >= 1".into()));
    }
    if state.u.len() != weight.rows() {
        return Err(Error::Shape("power-iteration vector length".into()));
    }
    let (sigma, _) = state.run(weight, iters);
    if !(sigma > SIGMA_FLOOR) {
        return Ok((weight.clone(), SIGMA_FLOOR));
    }
    Ok((weight.map(|x| x / sigma), sigma))
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
    n
}

fn mat_vec(w: &Tensor, v: &[f64], out: &mut [f64]) {
    let c = w.cols();
    for (o, row) in out.iter_mut().zip(w.data().chunks(c)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn mat_t_vec(w: &Tensor, u: &[f64], out: &mut [f64]) {
    let c = w.cols();
    out.fill(0.0);
    for (row, &ui) in w.data().chunks(c).zip(u) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * ui;
        }
    }
}
