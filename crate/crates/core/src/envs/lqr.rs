//! Finite-horizon LQR reference controller for [`DoubleIntegrator`].
//!
//! Axes are decoupled, so the Riccati recursion runs on one 2×2 system and
//! the gains are shared by every axis. Actions are clipped to the bounds,
//! which makes the controller near-optimal rather than optimal.

use super::{Controller, DoubleIntegrator, EnvState, Environment};

#[derive(Clone, Debug)]
pub struct LqrController {
    /// `gains[t] = [k_p, k_v]`, action `a = −k_p·(p − goal) − k_v·v`.
    pub gains: Vec<[f64; 2]>,
    axes: usize,
    goal: Vec<f64>,
    low: Vec<f64>,
    high: Vec<f64>,
}

impl LqrController {
    pub fn new(env: &DoubleIntegrator) -> Self {
        let spec = env.spec();
        let dt = spec.dt;
        let (q_p, q_v, r) = (env.position_weight, env.velocity_weight, env.action_weight);
        let a = [[1.0, dt], [0.0, 1.0]];
        let b = [0.0, dt];
        let mut p = [[0.0f64; 2]; 2];
        let mut gains = vec![[0.0; 2]; spec.horizon];
        for t in (0..spec.horizon).rev() {
            // Pb = P·B, bPb = Bᵀ·P·B
            let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
            let bpb = b[0] * pb[0] + b[1] * pb[1];
            // BᵀPA as a row vector
            let bpa = [pb[0] * a[0][0] + pb[1] * a[1][0], pb[0] * a[0][1] + pb[1] * a[1][1]];
            let k = [bpa[0] / (r + bpb), bpa[1] / (r + bpb)];
            // closed loop A − B·K
            let acl = [
                [a[0][0] - b[0] * k[0], a[0][1] - b[0] * k[1]],
                [a[1][0] - b[1] * k[0], a[1][1] - b[1] * k[1]],
            ];
            let mut next = [[q_p, 0.0], [0.0, q_v]];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for u in 0..2 {
                        for w in 0..2 {
                            acc += a[u][i] * p[u][w] * acl[w][j];
                        }
                    }
                    next[i][j] += acc;
                }
            }
            p = next;
            gains[t] = k;
        }
        Self {
            gains,
            axes: env.axes,
            goal: env.goal.clone(),
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }
}

impl Controller for LqrController {
    fn control(&self, state: &EnvState) -> Vec<f64> {
        let k = self.gains[state.t.min(self.gains.len() - 1)];
        let n = self.axes;
        (0..n)
            .map(|i| {
                let a = -k[0] * (state.s[i] - self.goal[i]) - k[1] * state.s[n + i];
                a.clamp(self.low[i], self.high[i])
            })
            .collect()
    }
}

/// Mean ground-truth return of the clipped LQR controller over `episodes`
/// seeded initial states.
pub fn lqr_reference_return(env: &DoubleIntegrator, episodes: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let ctrl = LqrController::new(env);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let start = env.reset(&mut rng);
        let (_, _, rewards) = super::rollout(env, &ctrl, start).expect("rollout within horizon");
        total += rewards.iter().sum::<f64>();
    }
    total / episodes as f64
}
