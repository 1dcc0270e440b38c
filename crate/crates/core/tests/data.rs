use ilflow_core::analysis::spearman;
use ilflow_core::data::{self, DatasetKind, TrajectorySet};
use ilflow_core::envs::lqr::LqrController;
use ilflow_core::envs::{DoubleIntegrator, Environment};

fn returns(set: &TrajectorySet) -> Vec<f64> {
    set.trajectories.iter().map(|t| t.rewards.iter().sum()).collect()
}

#[test]
fn noisier_rollouts_earn_less() {
    for env in [DoubleIntegrator::one_d(), DoubleIntegrator::point_mass()] {
        let lqr = LqrController::new(&env);
        let noisy = data::collect_noisy_expert(&lqr, &env, 120, 1.5, 4).unwrap();
        let levels: Vec<f64> = noisy.trajectories.iter().map(|t| t.meta.noise_level.unwrap()).collect();
        assert!(levels.iter().all(|&l| (0.0..=1.5).contains(&l)));
        let rho = spearman(&levels, &returns(&noisy)).unwrap();
        assert!(rho < -0.8, "{}: Spearman {rho}", env.spec().name);

        let expert = data::collect_expert(&lqr, &env, 20, 4).unwrap();
        let random = data::collect_random(&env, 20, 4).unwrap();
        assert!(expert.mean_return() > noisy.mean_return());
        assert!(noisy.mean_return() > random.mean_return());
    }
}

#[test]
fn saved_noisy_set_records_its_noise_bound() {
    let env = DoubleIntegrator::one_d();
    let lqr = LqrController::new(&env);
    let set = data::collect_noisy_expert(&lqr, &env, 5, 1.5, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noisy.csv");
    set.save(&path).unwrap();
    let back = TrajectorySet::load(&path).unwrap();
    assert_eq!(back.header.kind, DatasetKind::NoisyExpert);
    assert_eq!(back.header.l_max, Some(1.5));
    assert_eq!(back, set);
}
