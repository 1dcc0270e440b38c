use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::agent::{ActMode, Agent, UpdateStats};
use super::replay::ReplayEntry;
use super::reward::RewardModel;
use super::{augment, SacConfig};
use crate::envs::{rollout, Environment};
use crate::error::Result;
use crate::flow::ConditionalFlowModel;
use crate::seeding::{self, streams};

/// One learning-curve row. Interval statistics are `None` when no
/// gradient update happened in the interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Mean return of the same deterministic rollouts under the training
    /// reward (the flow reward, at the agent's chosen noise level, for
    /// imitation).
    pub eval_training_return: f64,
    /// Mean training reward since the previous row (flow reward for
    /// imitation, ground truth for experts).
    pub mean_imitation_reward: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub mean_h: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub curve: Vec<CurvePoint>,
}

/// Mean and standard deviation of the ground-truth return of the
/// deterministic policy over `episodes` rollouts seeded by `seed`.
pub fn evaluate<E: Environment + ?Sized>(agent: &Agent, env: &E, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = seeding::rng(seed, streams::EVAL);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let start = env.reset(&mut rng);
        let (_, _, rewards) = rollout(env, agent, start)?;
        returns.push(rewards.iter().sum::<f64>());
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean training-reward return of deterministic rollouts from the same
/// start states as [`evaluate`].
fn evaluate_training_reward<E: Environment + ?Sized>(
    agent: &Agent,
    env: &E,
    reward: Option<&RewardModel>,
    config: &SacConfig,
    seed: u64,
) -> Result<f64> {
    let spec = env.spec();
    let m = spec.action_dim;
    let mut rng = seeding::rng(seed, streams::EVAL);
    let mut total = 0.0;
    for _ in 0..config.eval_episodes {
        let mut state = env.reset(&mut rng);
        loop {
            let obs = augment(&state.s, state.t, spec.horizon);
            let unit = agent.act(&obs, ActMode::Deterministic, &mut rng)?.action;
            let out = env.step(&state, &spec.scale_action(&unit[..m]))?;
            total += match reward {
                Some(model) => model.reward(&state.s, &out.next.s, model.flow.noise.h_from_unit(unit[m])),
                None => out.reward,
            };
            if out.done {
                break;
            }
            state = out.next;
        }
    }
    Ok(total / config.eval_episodes as f64)
}

#[derive(Default)]
struct Interval {
    reward_sum: f64,
    steps: usize,
    h_sum: f64,
    stats: Vec<UpdateStats>,
}

impl Interval {
    fn mean_of(&self, f: impl Fn(&UpdateStats) -> f64) -> Option<f64> {
        (!self.stats.is_empty()).then(|| self.stats.iter().map(f).sum::<f64>() / self.stats.len() as f64)
    }
}

fn run<E: Environment + ?Sized>(
    env: &E,
    reward: Option<&RewardModel>,
    config: &SacConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut agent = Agent::new(env.spec(), reward.is_some(), config.clone(), seed)?;
    let spec = env.spec().clone();
    let m = spec.action_dim;
    let horizon = spec.horizon;
    let mut explore = seeding::rng(seed, streams::EXPLORE);
    let mut batch_rng = seeding::rng(seed, streams::BATCH);
    let mut state = env.reset(&mut explore);
    let mut curve = Vec::new();
    let mut interval = Interval::default();
    let mut best: Option<(f64, crate::numcore::ParamStore)> = None;

    for step in 1..=config.total_steps {
        let obs = augment(&state.s, state.t, horizon);
        let unit: Vec<f64> = if step <= config.warmup_steps {
            (0..agent.action_dim).map(|_| explore.gen_range(-1.0..1.0)).collect()
        } else {
            agent.act(&obs, ActMode::Stochastic, &mut explore)?.action
        };
        let out = env.step(&state, &spec.scale_action(&unit[..m]))?;
        let r = match reward {
            Some(model) => {
                let h = model.flow.noise.h_from_unit(unit[m]);
                interval.h_sum += h;
                model.reward(&state.s, &out.next.s, h)
            }
            None => config.ground_truth_floor.map_or(out.reward, |f| out.reward.max(f)),
        };
        interval.reward_sum += r;
        interval.steps += 1;
        agent.replay.push(ReplayEntry {
            obs,
            action: unit,
            reward: r,
            next_obs: augment(&out.next.s, out.next.t, horizon),
            terminal: out.done,
        })?;
        state = if out.done { env.reset(&mut explore) } else { out.next };

        if step > config.warmup_steps {
            for _ in 0..config.updates_per_step {
                let batch = agent.replay.sample(config.batch_size, &mut batch_rng);
                interval.stats.push(agent.sac_update(&batch, &mut batch_rng)?);
            }
        }

        if step % config.eval_interval == 0 || step == config.total_steps {
            let (mean, std) = evaluate(&agent, env, config.eval_episodes, seed)?;
            let training_return = evaluate_training_reward(&agent, env, reward, config, seed)?;
            if config.keep_best && best.as_ref().map_or(true, |(b, _)| training_return > *b) {
                best = Some((training_return, agent.actor_store().clone()));
            }
            let point = CurvePoint {
                step,
                eval_return_mean: mean,
                eval_return_std: std,
                eval_training_return: training_return,
                mean_imitation_reward: interval.reward_sum / interval.steps.max(1) as f64,
                actor_loss: interval.mean_of(|s| s.actor_loss),
                critic_loss: interval.mean_of(|s| s.critic_loss),
                policy_entropy: interval.mean_of(|s| s.entropy),
                mean_h: reward.map(|_| interval.h_sum / interval.steps.max(1) as f64),
            };
            log::info!(
                "step {step}: eval return {mean:.3} ± {std:.3}, train reward {:.3}",
                point.mean_imitation_reward
            );
            curve.push(point);
            interval = Interval::default();
        }
    }
    if let Some((score, actor)) = best {
        log::info!("restoring the actor with the best training-reward return {score:.3}");
        *agent.actor_store_mut() = actor;
    }
    Ok(TrainOutcome { agent, curve })
}

/// SAC on the environment's ground-truth reward.
pub fn train_expert<E: Environment + ?Sized>(env: &E, config: &SacConfig, seed: u64) -> Result<TrainOutcome> {
    run(env, None, config, seed)
}

/// SAC on the frozen flow reward; the agent picks the reward's noise level
/// with an extra squashed action dimension.
pub fn train_imitation<E: Environment + ?Sized>(
    env: &E,
    flow: &ConditionalFlowModel,
    config: &SacConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let model = RewardModel::new(flow, config.reward_floor);
    let out = run(env, Some(&model), config, seed)?;
    if model.floor_count() > 0 {
        log::warn!(
            "{} imitation rewards were floored at {}",
            model.floor_count(),
            config.reward_floor
        );
    }
    Ok(out)
}

pub fn write_curve<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write_curve(std::fs::File::create(path)?, curve)
}
