//! Deterministic, invertible toy environments with ground-truth rewards.
//!
//! Both shipped systems are per-axis double integrators: position advances
//! by `v·dt`, velocity by `a·dt`. Given `(s, s')` the action is recovered
//! exactly from the velocity change, and `ds'/da = dt·I` everywhere.

pub mod lqr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::counter::Counter;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::Shape("action bound length".into()));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Contract("action bounds need low < high".into()));
        }
        Ok(())
    }

    /// Maps a squashed action in `[-1, 1]^m` to environment units.
    pub fn scale_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&u, (&lo, &hi))| lo + (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
            .collect()
    }

    /// Inverse of [`EnvSpec::scale_action`].
    pub fn unit_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn clamp_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let a = action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| {
                if a < lo || a > hi {
                    clamped = true;
                }
                a.clamp(lo, hi)
            })
            .collect();
        (a, clamped)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct Step {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The action actually applied, after clamping.
    pub action: Vec<f64>,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draws an initial state from `p₀`.
    fn reset(&self, rng: &mut dyn RngCore) -> EnvState;

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<Step>;

    /// The unique action taking `s` to `s_next`.
    fn invert_action(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>>;

    /// `log |det ∂s'/∂a|` on the action-affected coordinates.
    fn log_jacobian(&self, s: &[f64], a: &[f64]) -> f64;

    /// How many actions have been clamped into bounds so far.
    fn clamp_count(&self) -> u64;
}

/// Deterministic controller acting in environment units.
pub trait Controller {
    fn control(&self, state: &EnvState) -> Vec<f64>;
}

/// Per-axis double integrator with quadratic ground-truth reward
/// `−(‖p − goal‖² + 0.1‖v‖² + 0.01‖a‖²)` and state layout
/// `[p_0..p_n, v_0..v_n]`.
#[derive(Clone, Debug)]
pub struct DoubleIntegrator {
    spec: EnvSpec,
    pub axes: usize,
    pub goal: Vec<f64>,
    pub start_low: Vec<f64>,
    pub start_high: Vec<f64>,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub action_weight: f64,
    clamps: Counter,
}

pub const DOUBLE_INTEGRATOR_1D: &str = "DoubleIntegrator1D";
pub const POINT_MASS_2D: &str = "PointMass2D";
pub const ENV_NAMES: [&str; 2] = [DOUBLE_INTEGRATOR_1D, POINT_MASS_2D];

impl DoubleIntegrator {
    fn build(name: &str, axes: usize, bound: f64, start_low: Vec<f64>, start_high: Vec<f64>) -> Self {
        Self {
            spec: EnvSpec {
                name: name.to_string(),
                state_dim: 2 * axes,
                action_dim: axes,
                action_low: vec![-bound; axes],
                action_high: vec![bound; axes],
                horizon: 200,
                dt: 0.05,
            },
            axes,
            goal: vec![0.0; axes],
            start_low,
            start_high,
            position_weight: 1.0,
            velocity_weight: 0.1,
            action_weight: 0.01,
            clamps: Counter::default(),
        }
    }

    /// `d = 2` (x, v), `m = 1`, `T = 200`, `dt = 0.05`, actions in `[-2, 2]`,
    /// starting near `x = 1` at rest.
    pub fn one_d() -> Self {
        Self::build(DOUBLE_INTEGRATOR_1D, 1, 2.0, vec![0.98, -0.02], vec![1.02, 0.02])
    }

    /// `d = 4` (position, velocity), `m = 2`, goal at the origin, starting
    /// near `(1, −1)` at rest.
    pub fn point_mass() -> Self {
        Self::build(
            POINT_MASS_2D,
            2,
            2.0,
            vec![0.98, -1.02, -0.02, -0.02],
            vec![1.02, -0.98, 0.02, 0.02],
        )
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            DOUBLE_INTEGRATOR_1D => Ok(Self::one_d()),
            POINT_MASS_2D => Ok(Self::point_mass()),
            other => Err(Error::Config {
                key: "env".into(),
                reason: format!("unknown environment `{other}` (known: {ENV_NAMES:?})"),
            }),
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        assert!(dt > 0.0);
        self.spec.dt = dt;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        assert!(horizon >= 1);
        self.spec.horizon = horizon;
        self
    }

    pub fn with_start_box(mut self, low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), self.spec.state_dim);
        assert_eq!(high.len(), self.spec.state_dim);
        self.start_low = low;
        self.start_high = high;
        self
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let n = self.axes;
        let pos: f64 = (0..n).map(|i| (s[i] - self.goal[i]).powi(2)).sum();
        let vel: f64 = (0..n).map(|i| s[n + i].powi(2)).sum();
        let act: f64 = a.iter().map(|x| x * x).sum();
        -(self.position_weight * pos + self.velocity_weight * vel + self.action_weight * act)
    }

    /// Deterministic transition without bounds or horizon checks.
    pub fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let n = self.axes;
        let dt = self.spec.dt;
        let mut next = s.to_vec();
        for i in 0..n {
            next[i] = s[i] + s[n + i] * dt;
            next[n + i] = s[n + i] + a[i] * dt;
        }
        next
    }
}

impl Environment for DoubleIntegrator {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> EnvState {
        let s = self
            .start_low
            .iter()
            .zip(&self.start_high)
            .map(|(&lo, &hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo })
            .collect();
        EnvState { s, t: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<Step> {
        let horizon = self.spec.horizon;
        if state.t >= horizon {
            return Err(Error::EpisodeDone { t: state.t, horizon });
        }
        if action.len() != self.spec.action_dim || state.s.len() != self.spec.state_dim {
            return Err(Error::Shape("state/action dimension".into()));
        }
        let (a, clamped) = self.spec.clamp_action(action);
        if clamped {
            self.clamps.bump();
        }
        let reward = self.reward(&state.s, &a);
        let next = EnvState {
            s: self.dynamics(&state.s, &a),
            t: state.t + 1,
        };
        Ok(Step {
            done: next.t == horizon,
            next,
            reward,
            action: a,
        })
    }

    fn invert_action(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
        let n = self.axes;
        let dt = self.spec.dt;
        if s.len() != 2 * n || s_next.len() != 2 * n {
            return Err(Error::Shape("state dimension".into()));
        }
        let residual = (0..n)
            .map(|i| (s_next[i] - (s[i] + s[n + i] * dt)).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = 1.0 + s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if residual > 1e-9 * scale {
            return Err(Error::Unreachable { residual });
        }
        let a: Vec<f64> = (0..n).map(|i| (s_next[n + i] - s[n + i]) / dt).collect();
        let excess = a
            .iter()
            .zip(self.spec.action_low.iter().zip(&self.spec.action_high))
            .map(|(&a, (&lo, &hi))| (lo - a).max(a - hi).max(0.0))
            .fold(0.0, f64::max);
        if excess > 1e-9 {
            return Err(Error::Unreachable { residual: excess });
        }
        Ok(a)
    }

    fn log_jacobian(&self, _s: &[f64], _a: &[f64]) -> f64 {
        self.axes as f64 * self.spec.dt.ln()
    }

    fn clamp_count(&self) -> u64 {
        self.clamps.get()
    }
}

/// Rolls out a deterministic controller for one episode; returns the state
/// sequence, applied actions and rewards.
pub fn rollout<E: Environment + ?Sized, C: Controller + ?Sized>(
    env: &E,
    controller: &C,
    start: EnvState,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let mut states = vec![start.s.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut state = start;
    loop {
        let a = controller.control(&state);
        let step = env.step(&state, &a)?;
        states.push(step.next.s.clone());
        actions.push(step.action);
        rewards.push(step.reward);
        state = step.next;
        if step.done {
            break;
        }
    }
    Ok((states, actions, rewards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_integrator_step() {
        let env = DoubleIntegrator::one_d();
        let st = EnvState {
            s: vec![1.0, 0.0],
            t: 0,
        };
        let step = env.step(&st, &[0.0]).unwrap();
        assert_eq!(step.next.s, vec![1.0, 0.0]);
        assert_eq!(step.reward, -1.0);
        assert!(!step.done);
        assert_eq!(env.spec().horizon, 200);
    }

    #[test]
    fn point_mass_fixed_point() {
        let env = DoubleIntegrator::point_mass();
        let st = EnvState {
            s: vec![0.3, -0.4, 0.0, 0.0],
            t: 5,
        };
        let step = env.step(&st, &[0.0, 0.0]).unwrap();
        assert_eq!(step.next.s, st.s);
        assert!((step.reward + 0.25).abs() < 1e-15);
    }

    #[test]
    fn done_at_horizon_and_error_after() {
        let env = DoubleIntegrator::one_d().with_horizon(2);
        let s0 = EnvState {
            s: vec![0.0, 0.0],
            t: 0,
        };
        let s1 = env.step(&s0, &[1.0]).unwrap();
        assert!(!s1.done);
        let s2 = env.step(&s1.next, &[1.0]).unwrap();
        assert!(s2.done);
        assert!(matches!(env.step(&s2.next, &[1.0]), Err(Error::EpisodeDone { .. })));
    }

    #[test]
    fn out_of_bounds_actions_are_clamped_and_counted() {
        let env = DoubleIntegrator::one_d();
        let st = EnvState {
            s: vec![0.0, 0.0],
            t: 0,
        };
        let step = env.step(&st, &[10.0]).unwrap();
        assert_eq!(step.action, vec![2.0]);
        assert_eq!(env.clamp_count(), 1);
    }

    #[test]
    fn invert_action_recovers_applied_action() {
        let env = DoubleIntegrator::one_d();
        let s = [0.3, -0.7];
        let next = env.dynamics(&s, &[1.25]);
        let a = env.invert_action(&s, &next).unwrap();
        assert!((a[0] - 1.25).abs() < 1e-12);
        let pm = DoubleIntegrator::point_mass();
        let s = [0.1, 0.2, 0.3, -0.4];
        let next = pm.dynamics(&s, &[-0.5, 1.5]);
        let a = pm.invert_action(&s, &next).unwrap();
        assert!((a[0] + 0.5).abs() < 1e-12 && (a[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn unreachable_pair_reports_residual() {
        let env = DoubleIntegrator::one_d();
        match env.invert_action(&[0.0, 1.0], &[1.0, 1.0]) {
            Err(Error::Unreachable { residual }) => assert!((residual - 0.95).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        // velocity change needing |a| > bound
        assert!(env.invert_action(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn log_jacobian_constants() {
        let env = DoubleIntegrator::one_d();
        assert!((env.log_jacobian(&[0.0, 0.0], &[0.0]) - 0.05f64.ln()).abs() < 1e-15);
        let pm = DoubleIntegrator::point_mass();
        assert!((pm.log_jacobian(&[0.0; 4], &[0.0; 2]) - 2.0 * 0.05f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env = DoubleIntegrator::point_mass();
        let h = 1e-6;
        for _ in 0..100 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // Jacobian of the velocity block w.r.t. the action
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[j] += h;
                am[j] -= h;
                let (fp, fm) = (env.dynamics(&s, &ap), env.dynamics(&s, &am));
                for i in 0..2 {
                    jac[i][j] = (fp[2 + i] - fm[2 + i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let want = env.log_jacobian(&s, &a);
            assert!((det.abs().ln() - want).abs() / want.abs() < 1e-6);
        }
    }

    #[test]
    fn reset_respects_the_start_box() {
        let env = DoubleIntegrator::point_mass();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let st = env.reset(&mut rng);
            assert_eq!(st.t, 0);
            for (i, v) in st.s.iter().enumerate() {
                assert!(*v >= env.start_low[i] && *v <= env.start_high[i]);
            }
        }
    }

    #[test]
    fn unknown_name() {
        assert!(DoubleIntegrator::by_name("Hopper").is_err());
        assert_eq!(DoubleIntegrator::by_name("PointMass2D").unwrap().axes, 2);
    }
}
