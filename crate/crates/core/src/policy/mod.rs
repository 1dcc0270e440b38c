//! Finite-horizon soft actor-critic with time-to-horizon observations and
//! an optional action dimension selecting the reward's noise level.

pub mod agent;
pub mod replay;
pub mod reward;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use agent::{Act, ActMode, Agent, AgentSidecar, UpdateStats};
pub use replay::{Batch, ReplayBuffer, ReplayEntry};
pub use reward::{compute_reward, RewardModel};
pub use train::{evaluate, train_expert, train_imitation, CurvePoint, TrainOutcome};

/// SAC settings. The entropy coefficient is fixed; there is no discount.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub alpha: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub total_steps: usize,
    /// Floor on the flow reward during imitation.
    pub reward_floor: f64,
    /// Optional floor on the environment reward while training an expert.
    /// Clipping the large quadratic costs far from the goal keeps the
    /// undiscounted critic targets from blowing up early in training.
    pub ground_truth_floor: Option<f64>,
    /// Restore, after training, the actor whose deterministic rollouts
    /// scored highest on the training reward at an evaluation point. Ground
    /// truth never enters the selection for imitation.
    pub keep_best: bool,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![512, 512],
            critic_hidden: vec![1024, 1024],
            alpha: 0.1,
            tau: 5e-4,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 256,
            replay_capacity: 1_000_000,
            warmup_steps: 1000,
            updates_per_step: 1,
            eval_interval: 5000,
            eval_episodes: 10,
            total_steps: 100_000,
            reward_floor: -100.0,
            ground_truth_floor: None,
            keep_best: false,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        if !(self.alpha > 0.0) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", format!("must lie in (0, 1], got {}", self.tau));
        }
        for (key, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0) {
                return bad(key, format!("must be positive, got {lr}"));
            }
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        for (key, h) in [
            ("actor_hidden", &self.actor_hidden),
            ("critic_hidden", &self.critic_hidden),
        ] {
            if h.contains(&0) {
                return bad(key, "hidden sizes must be positive".into());
            }
        }
        if !(self.reward_floor.is_finite()) {
            return bad("reward_floor", "must be finite".into());
        }
        if self.ground_truth_floor.is_some_and(|f| !f.is_finite()) {
            return bad("ground_truth_floor", "must be finite".into());
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min", "must be below log_std_max".into());
        }
        Ok(())
    }
}

/// `s ⊕ t_H` with `t_H = (T − t) / T`.
pub fn augment(s: &[f64], t: usize, horizon: usize) -> Vec<f64> {
    let mut v = s.to_vec();
    v.push(horizon.saturating_sub(t) as f64 / horizon as f64);
    v
}
