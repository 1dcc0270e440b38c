//! Fixtures shared by the benchmarks.

use ilflow_core::flow::{ConditionalFlowModel, FlowConfig, NoiseConfig};
use ilflow_core::policy::{augment, Agent, ReplayEntry, SacConfig};
use ilflow_core::{seeding, DoubleIntegrator, Environment};
use rand::Rng;

/// Untrained flow over PointMass2D states with default hyperparameters.
pub fn flow() -> ConditionalFlowModel {
    let env = DoubleIntegrator::by_name("PointMass2D").expect("known env");
    ConditionalFlowModel::identity(env.spec().state_dim, FlowConfig::default(), NoiseConfig::default())
        .expect("default flow")
}

/// Random conditioning states, next states and noise levels.
pub fn flow_batch(n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = seeding::rng(0, 0);
    let mut rows = || {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let s: Vec<Vec<f64>> = rows();
    let s_next: Vec<Vec<f64>> = rows();
    let h = (0..n).map(|i| 4.5 * i as f64 / n as f64).collect();
    (s, s_next, h)
}

/// DoubleIntegrator1D agent whose replay buffer holds `steps` random
/// transitions.
pub fn agent(hidden: usize, batch_size: usize, steps: usize) -> (Agent, DoubleIntegrator) {
    let env = DoubleIntegrator::by_name("DoubleIntegrator1D").expect("known env");
    let spec = env.spec().clone();
    let config = SacConfig {
        actor_hidden: vec![hidden, hidden],
        critic_hidden: vec![hidden, hidden],
        batch_size,
        replay_capacity: steps.max(1),
        ..SacConfig::default()
    };
    let mut agent = Agent::new(&spec, false, config, 0).expect("valid agent");
    let mut rng = seeding::rng(0, seeding::streams::EXPLORE);
    let mut state = env.reset(&mut rng);
    for _ in 0..steps {
        let unit: Vec<f64> = (0..spec.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = env.step(&state, &spec.scale_action(&unit)).expect("step");
        agent
            .replay
            .push(ReplayEntry {
                obs: augment(&state.s, state.t, spec.horizon),
                action: unit,
                reward: out.reward,
                next_obs: augment(&out.next.s, out.next.t, spec.horizon),
                terminal: out.done,
            })
            .expect("valid entry");
        state = if out.done { env.reset(&mut rng) } else { out.next };
    }
    (agent, env)
}
