use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::envs::{DoubleIntegrator, Environment};
use crate::error::{Error, Result};
use crate::seeding;

const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

/// Transition entropy against policy entropy for a Gaussian policy on a
/// double integrator. Only the velocity block of `s'` depends on the action,
/// so entropies are over that block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChangeOfVariables {
    /// Monte-Carlo estimate of `H(p_π(· | s))`.
    pub state_entropy: f64,
    /// Monte-Carlo estimate of `H(π(· | s))`.
    pub action_entropy: f64,
    /// Closed-form `H(π) + log|ds'/da|`.
    pub analytic_state_entropy: f64,
    pub analytic_action_entropy: f64,
    /// `log|ds'/da|` as reported by the environment.
    pub logdet_term: f64,
    /// `|analytic − Monte Carlo|` for the state entropy.
    pub residual: f64,
    /// Standard error of the state-entropy estimate.
    pub std_error: f64,
}

impl ChangeOfVariables {
    /// Whether the residual lies within `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.residual <= k * self.std_error
    }
}

/// Samples `a ~ N(mean, diag(std²))`, pushes each sample through the
/// unclamped dynamics from `s` and scores `s'` under its own density,
/// recovered by inverting the velocity update and applying the Jacobian.
pub fn verify_change_of_variables(
    env: &DoubleIntegrator,
    s: &[f64],
    mean: &[f64],
    std: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<ChangeOfVariables> {
    let spec = env.spec();
    let m = spec.action_dim;
    if s.len() != spec.state_dim || mean.len() != m || std.len() != m {
        return Err(Error::Shape(
            "state or policy parameters do not match the environment".into(),
        ));
    }
    if std.iter().any(|&v| !(v > 0.0)) || n_samples < 2 {
        return Err(Error::Contract(
            "positive standard deviations and at least two samples required".into(),
        ));
    }
    let dt = spec.dt;
    let logdet = env.log_jacobian(s, mean);
    let log_norm: f64 = std
        .iter()
        .map(|v| v.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum();
    let log_pi = |a: &[f64]| -> f64 {
        -log_norm
            - 0.5
                * a.iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((a, mu), sd)| ((a - mu) / sd).powi(2))
                    .sum::<f64>()
    };

    let mut rng = seeding::rng(seed, seeding::streams::EVAL);
    let mut state_terms = Vec::with_capacity(n_samples);
    let mut action_terms = Vec::with_capacity(n_samples);
    let mut a = vec![0.0; m];
    for _ in 0..n_samples {
        for j in 0..m {
            let e: f64 = rng.sample(StandardNormal);
            a[j] = mean[j] + std[j] * e;
        }
        let next = env.dynamics(s, &a);
        let recovered: Vec<f64> = (0..m).map(|j| (next[m + j] - s[m + j]) / dt).collect();
        state_terms.push(-(log_pi(&recovered) - logdet));
        action_terms.push(-log_pi(&a));
    }
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let state_entropy = mean_of(&state_terms);
    let var = state_terms.iter().map(|x| (x - state_entropy).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
    let analytic_action: f64 = std.iter().map(|v| 0.5 * LN_2PI_E + v.ln()).sum();
    let analytic_state = analytic_action + logdet;
    Ok(ChangeOfVariables {
        state_entropy,
        action_entropy: mean_of(&action_terms),
        analytic_state_entropy: analytic_state,
        analytic_action_entropy: analytic_action,
        logdet_term: logdet,
        residual: (analytic_state - state_entropy).abs(),
        std_error: (var / n_samples as f64).sqrt(),
    })
}
