use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::replay::{Batch, ReplayBuffer};
use super::{augment, SacConfig};
use crate::envs::{Controller, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::flow::model::sidecar_path;
use crate::numcore::checkpoint;
use crate::numcore::{Access, Activation, Graph, Mlp, MlpOptions, OptimizerState, ParamStore, Tensor, Var};
use crate::seeding;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Added inside the tanh-Jacobian logarithm.
pub const SQUASH_EPS: f64 = 1e-6;
pub const AGENT_SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    /// Squashed action in `[-1, 1]^k`.
    pub action: Vec<f64>,
    /// Log-density of `action` under the squashed policy.
    pub log_prob: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Monte-Carlo estimate `-mean log π` on the batch states.
    pub entropy: f64,
}

/// Squashed-Gaussian actor, twin critics and their Polyak targets.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: SacConfig,
    pub env: EnvSpec,
    /// Environment state plus time-to-horizon.
    pub obs_dim: usize,
    /// Squashed action dimension: environment actions, then `h_raw` when
    /// the agent controls the reward's noise level.
    pub action_dim: usize,
    actor: Mlp,
    actor_store: ParamStore,
    q1: Mlp,
    q2: Mlp,
    critic_store: ParamStore,
    target_store: ParamStore,
    actor_opt: OptimizerState,
    critic_opt: OptimizerState,
    pub replay: ReplayBuffer,
    updates: u64,
}

/// Squashed-Gaussian log-density of `u = mean + std·eps` and its tanh,
/// row-wise on plain values.
fn squashed(mean: &[f64], log_std: &[f64], eps: &[f64]) -> (Vec<f64>, f64) {
    let mut a = Vec::with_capacity(mean.len());
    let mut lp = 0.0;
    for j in 0..mean.len() {
        let u = mean[j] + log_std[j].exp() * eps[j];
        let t = u.tanh();
        lp += -0.5 * eps[j] * eps[j] - log_std[j] - 0.5 * LN_2PI - (1.0 - t * t + SQUASH_EPS).ln();
        a.push(t);
    }
    (a, lp)
}

impl Agent {
    pub fn new(env: &EnvSpec, noise_dim: bool, config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let obs_dim = env.state_dim + 1;
        let action_dim = env.action_dim + noise_dim as usize;
        let mut rng = seeding::rng(seed, seeding::streams::INIT);
        let mut actor_store = ParamStore::new();
        let tanh = MlpOptions {
            hidden: Activation::Tanh,
            spectral_hidden: false,
            output_scale: 1.0,
        };
        let relu = MlpOptions {
            hidden: Activation::Relu,
            ..tanh
        };
        let sizes = |inp: usize, hidden: &[usize], out: usize| {
            let mut v = vec![inp];
            v.extend(hidden);
            v.push(out);
            v
        };
        let actor = Mlp::new(
            &mut actor_store,
            "actor",
            &sizes(obs_dim, &config.actor_hidden, 2 * action_dim),
            tanh,
            &mut rng,
        );
        let mut critic_store = ParamStore::new();
        let qs = sizes(obs_dim + action_dim, &config.critic_hidden, 1);
        let q1 = Mlp::new(&mut critic_store, "q1", &qs, relu, &mut rng);
        let q2 = Mlp::new(&mut critic_store, "q2", &qs, relu, &mut rng);
        let target_store = critic_store.clone();
        Ok(Self {
            actor_opt: OptimizerState::adam(config.actor_lr),
            critic_opt: OptimizerState::adam(config.critic_lr),
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            env: env.clone(),
            obs_dim,
            action_dim,
            actor,
            actor_store,
            q1,
            q2,
            critic_store,
            target_store,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn critic_store(&self) -> &ParamStore {
        &self.critic_store
    }

    pub fn critic_store_mut(&mut self) -> &mut ParamStore {
        &mut self.critic_store
    }

    pub fn target_store(&self) -> &ParamStore {
        &self.target_store
    }

    pub fn target_store_mut(&mut self) -> &mut ParamStore {
        &mut self.target_store
    }

    pub fn actor_store(&self) -> &ParamStore {
        &self.actor_store
    }

    pub fn actor_store_mut(&mut self) -> &mut ParamStore {
        &mut self.actor_store
    }

    /// Input width of each critic (observation, including `t_H`, plus action).
    pub fn critic_input_dim(&self) -> usize {
        self.q1.input_dim()
    }

    /// Mean and clamped log-std, each `[n, k]`.
    fn heads(&self, g: &mut Graph, obs: Var, access: Access) -> (Var, Var) {
        let out = self.actor.forward(g, &self.actor_store, obs, access);
        let mean = g.cols(out, 0, self.action_dim);
        let raw = g.cols(out, self.action_dim, self.action_dim);
        let ls = g.clamp(raw, self.config.log_std_min, self.config.log_std_max);
        (mean, ls)
    }

    fn head_values(&self, obs: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(obs)?);
        let (m, ls) = self.heads(&mut g, o, Access::Frozen);
        Ok((g.value(m).clone(), g.value(ls).clone()))
    }

    /// Pre-squash mean and log-std for one observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, ls) = self.head_values(&[obs.to_vec()])?;
        Ok((m.into_data(), ls.into_data()))
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActMode, rng: &mut R) -> Result<Act> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "observation of length {}, agent expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        let (mean, log_std) = self.distribution(obs)?;
        let eps: Vec<f64> = match mode {
            ActMode::Stochastic => (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect(),
            ActMode::Deterministic => vec![0.0; self.action_dim],
        };
        let (action, log_prob) = squashed(&mean, &log_std, &eps);
        Ok(Act { action, log_prob })
    }

    fn q_forward(&self, g: &mut Graph, store: &ParamStore, obs: Var, act: Var, access: Access) -> (Var, Var) {
        let x = g.concat(&[obs, act]);
        let a = self.q1.forward(g, store, x, access);
        let b = self.q2.forward(g, store, x, access);
        (a, b)
    }

    /// Twin critic values `(Q1, Q2)` for explicit observation/action rows.
    pub fn q_values(&self, obs: &[Vec<f64>], action: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(obs)?);
        let a = g.constant(Tensor::from_rows(action)?);
        let (q1, q2) = self.q_forward(&mut g, &self.critic_store, o, a, Access::Frozen);
        Ok((g.value(q1).data().to_vec(), g.value(q2).data().to_vec()))
    }

    /// Bootstrapped targets `y = r + [not terminal]·(min Q̄(s', a') − α log π(a'|s'))`.
    pub fn critic_targets<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<Vec<f64>> {
        let n = batch.len();
        let (mean, log_std) = self.head_values(&batch.next_obs)?;
        let mut next_actions = Vec::with_capacity(n);
        let mut next_lp = Vec::with_capacity(n);
        for r in 0..n {
            let eps: Vec<f64> = (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
            let (a, lp) = squashed(mean.row(r), log_std.row(r), &eps);
            next_actions.push(a);
            next_lp.push(lp);
        }
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(&batch.next_obs)?);
        let a = g.constant(Tensor::from_rows(&next_actions)?);
        let (t1, t2) = self.q_forward(&mut g, &self.target_store, o, a, Access::Frozen);
        let (t1, t2) = (g.value(t1).data(), g.value(t2).data());
        Ok((0..n)
            .map(|r| {
                if batch.terminal[r] {
                    batch.reward[r]
                } else {
                    batch.reward[r] + t1[r].min(t2[r]) - self.config.alpha * next_lp[r]
                }
            })
            .collect())
    }

    fn diverged(&self, what: &str, value: f64, batch: &Batch) -> Error {
        let rmin = batch.reward.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmax = batch.reward.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Error::Diverged {
            epoch: 0,
            batch: self.updates as usize,
            detail: format!(
                "{what} is {value}; batch of {} with rewards in [{rmin}, {rmax}], first obs {:?}, first action {:?}",
                batch.len(),
                batch.obs.first(),
                batch.action.first()
            ),
        }
    }

    /// One critic step, one actor step and a Polyak target update.
    pub fn sac_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::Contract("empty SAC batch".into()));
        }
        let n = batch.len();
        let alpha = self.config.alpha;
        let y = self.critic_targets(batch, rng)?;

        // critics
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(&batch.obs)?);
        let a = g.constant(Tensor::from_rows(&batch.action)?);
        let yv = g.constant(Tensor::column(&y));
        let (q1, q2) = self.q_forward(&mut g, &self.critic_store, o, a, Access::Train);
        let d1 = g.sub(q1, yv);
        let d2 = g.sub(q2, yv);
        let s1 = g.square(d1);
        let s2 = g.square(d2);
        let m1 = g.mean(s1);
        let m2 = g.mean(s2);
        let critic_loss = g.add(m1, m2);
        let cl = g.value(critic_loss).item();
        if !cl.is_finite() {
            return Err(self.diverged("critic loss", cl, batch));
        }
        self.critic_store.zero_grad();
        g.backward_into(critic_loss, &mut self.critic_store)?;
        self.critic_opt.step(&mut self.critic_store)?;

        // actor, by reparameterization through frozen critics
        let mut g = Graph::new();
        let o = g.constant(Tensor::from_rows(&batch.obs)?);
        let (mean, log_std) = self.heads(&mut g, o, Access::Train);
        let eps: Vec<f64> = (0..n * self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        let e = g.constant(Tensor::matrix(n, self.action_dim, eps.clone())?);
        let std = g.exp(log_std);
        let noise = g.mul(std, e);
        let u = g.add(mean, noise);
        let act = g.tanh(u);
        let sq = g.square(act);
        let neg = g.neg(sq);
        let inside = g.add_scalar(neg, 1.0 + SQUASH_EPS);
        let log_jac = g.log(inside);
        let e2: Vec<f64> = eps.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).collect();
        let gauss_const = g.constant(Tensor::matrix(n, self.action_dim, e2)?);
        let gauss = g.sub(gauss_const, log_std);
        let per = g.sub(gauss, log_jac);
        let log_pi = g.sum_cols(per);
        let (q1, q2) = self.q_forward(&mut g, &self.critic_store, o, act, Access::Frozen);
        let qmin = g.minimum(q1, q2);
        let scaled = g.scale(log_pi, alpha);
        let obj = g.sub(scaled, qmin);
        let actor_loss = g.mean(obj);
        let al = g.value(actor_loss).item();
        if !al.is_finite() {
            return Err(self.diverged("actor loss", al, batch));
        }
        let entropy = -g.value(log_pi).data().iter().sum::<f64>() / n as f64;
        self.actor_store.zero_grad();
        g.backward_into(actor_loss, &mut self.actor_store)?;
        self.actor_opt.step(&mut self.actor_store)?;

        self.target_store.polyak_from(&self.critic_store, self.config.tau);
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss: cl,
            actor_loss: al,
            entropy,
        })
    }

    /// Environment-unit action and `h_raw` (when present) for the
    /// deterministic policy.
    pub fn deterministic(&self, state: &EnvState) -> Result<Vec<f64>> {
        let obs = augment(&state.s, state.t, self.env.horizon);
        let mut rng = seeding::rng(0, 0);
        Ok(self.act(&obs, ActMode::Deterministic, &mut rng)?.action)
    }

    pub fn sidecar(&self) -> AgentSidecar {
        AgentSidecar {
            format_version: AGENT_SIDECAR_VERSION,
            env: self.env.clone(),
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            horizon: self.env.horizon,
            alpha: self.config.alpha,
            tau: self.config.tau,
            config: self.config.clone(),
            updates: self.updates,
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut t = checkpoint::store_tensors(&self.actor_store);
        t.extend(checkpoint::store_tensors(&self.critic_store));
        t.extend(
            checkpoint::store_tensors(&self.target_store)
                .into_iter()
                .map(|(n, v)| (format!("target.{n}"), v)),
        );
        t
    }

    /// Network parameters to `path`, JSON sidecar to `path.json`. Optimizer
    /// moments and the replay buffer are not saved.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.tensors())?;
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        for p in [path, side_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    what: "agent checkpoint".into(),
                    path: p.to_path_buf(),
                });
            }
        }
        let side: AgentSidecar = serde_json::from_slice(&std::fs::read(&side_path)?)?;
        if side.format_version != AGENT_SIDECAR_VERSION {
            return Err(Error::Format(format!("agent sidecar version {}", side.format_version)));
        }
        let noise_dim = side.action_dim == side.env.action_dim + 1;
        let mut agent = Agent::new(&side.env, noise_dim, side.config, 0)?;
        let tensors = checkpoint::load(path)?;
        checkpoint::restore_store(&mut agent.actor_store, &tensors)?;
        checkpoint::restore_store(&mut agent.critic_store, &tensors)?;
        let targets: Vec<(String, Tensor)> = tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("target.").map(|s| (s.to_string(), t.clone())))
            .collect();
        checkpoint::restore_store(&mut agent.target_store, &targets)?;
        agent.updates = side.updates;
        Ok(agent)
    }
}

impl Controller for Agent {
    fn control(&self, state: &EnvState) -> Vec<f64> {
        let unit = self.deterministic(state).expect("observation matches the agent");
        self.env.scale_action(&unit[..self.env.action_dim])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSidecar {
    pub format_version: u32,
    pub env: EnvSpec,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub tau: f64,
    pub config: SacConfig,
    pub updates: u64,
}
