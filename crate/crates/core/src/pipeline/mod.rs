//! Run configuration, run directories and the sequential stages: expert
//! training, dataset collection, flow fitting, imitation, evaluation,
//! calibration, verification and flow sampling.

pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub use config::{load_config, parse_config, CalibrationConfig, DatasetConfig, RunConfig};
pub use manifest::{sha256_file, FileEntry, Manifest, RunLock, StageRecord, Versions};

use crate::analysis::{self, calibrate, CalibrationSummary};
use crate::data::{self, subset_split, DatasetKind, TrajectorySet};
use crate::envs::lqr::lqr_reference_return;
use crate::envs::{DoubleIntegrator, Environment};
use crate::error::{Error, Result};
use crate::flow::{train_flow, ConditionalFlowModel};
use crate::policy::{evaluate, train_expert, train_imitation, Agent, TrainOutcome};
use crate::seeding;

pub const EXPERT_AGENT: &str = "expert_agent";
pub const FLOW: &str = "flow";
pub const IMITATION_AGENT: &str = "imitation_agent";

pub fn dataset_artifact(kind: DatasetKind) -> String {
    format!("dataset.{}", kind.as_str())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// UTC timestamp run id, e.g. `20260314-091502`.
pub fn timestamp_run_id() -> String {
    chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string()
}

/// Most recent run directory (by name) under `output_dir` that has a
/// manifest.
pub fn latest_run(output_dir: &Path) -> Option<String> {
    let mut ids: Vec<String> = std::fs::read_dir(output_dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("manifest.json").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    ids.pop()
}

/// How a stage picks its run directory when no id is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunSelection {
    /// Always start a fresh timestamped run.
    New,
    /// Continue the latest run, or start one if there is none.
    Latest,
}

/// An open run directory holding the writer lock.
#[derive(Debug)]
pub struct Run {
    pub config: RunConfig,
    pub root: PathBuf,
    pub manifest: Manifest,
    _lock: RunLock,
}

/// What a finished stage wrote, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageOutput {
    pub stage: String,
    pub files: Vec<String>,
    pub wall_time_s: f64,
    /// One-line human summary.
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub env: String,
    pub episodes: usize,
    pub imitation: Option<ReturnStats>,
    pub expert: Option<ReturnStats>,
    pub random_mean: f64,
    pub lqr_reference: f64,
    /// `(R − R_random) / (R_expert − R_random)` for the imitation agent.
    pub normalized_vs_expert: Option<f64>,
    /// Same score against the LQR reference.
    pub normalized_vs_lqr: Option<f64>,
}

/// `(r − baseline) / (reference − baseline)`.
pub fn normalized_score(r: f64, baseline: f64, reference: f64) -> f64 {
    (r - baseline) / (reference - baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<VerifyCheck>,
}

/// Exact and Monte-Carlo checks that need no trained model: the sequence
/// entropy decomposition and reverse-KL recombination on `instances` random
/// tabular problems, and the change of variables on the run's environment.
pub fn verify_oracles(env: &DoubleIntegrator, instances: usize, mc_samples: usize, seed: u64) -> Result<VerifyReport> {
    use rand::Rng;
    let mut rng = seeding::rng(seed, seeding::streams::EVAL);
    let mut worst_entropy: f64 = 0.0;
    let mut worst_rkl: f64 = 0.0;
    let mut self_kl_zero = true;
    for _ in 0..instances {
        let states = rng.gen_range(1..=4);
        let actions = rng.gen_range(1..=3);
        let horizon = rng.gen_range(1..=5);
        let mdp = analysis::random_mdp(states, actions, horizon, 0.0, &mut rng);
        let pi = analysis::random_policy(states, actions, 0.0, &mut rng);
        let ex = analysis::random_policy(states, actions, 0.0, &mut rng);
        worst_entropy = worst_entropy.max(analysis::verify_entropy_decomposition(&mdp, &pi)?.abs_diff);
        let r = analysis::exact_rkl(&mdp, &pi, &ex)?;
        worst_rkl = worst_rkl.max((r.rkl - r.recombined()).abs());
        self_kl_zero &= analysis::exact_rkl(&mdp, &pi, &pi)?.rkl == 0.0;
    }
    let m = env.spec().action_dim;
    let s = env.reset(&mut rng).s;
    let cov = analysis::verify_change_of_variables(env, &s, &vec![0.0; m], &vec![0.5; m], mc_samples, seed)?;
    let unit = analysis::verify_change_of_variables(
        &env.clone().with_dt(1.0),
        &s,
        &vec![0.0; m],
        &vec![0.5; m],
        mc_samples.min(10_000),
        seed,
    )?;
    let checks = vec![
        VerifyCheck {
            name: "entropy_decomposition".into(),
            passed: worst_entropy < 1e-12,
            detail: format!("max |lhs - rhs| = {worst_entropy:.3e} over {instances} instances"),
        },
        VerifyCheck {
            name: "rkl_recombination".into(),
            passed: worst_rkl < 1e-12 && self_kl_zero,
            detail: format!("max |rkl - (cross - entropy)| = {worst_rkl:.3e}; self-divergence zero: {self_kl_zero}"),
        },
        VerifyCheck {
            name: "change_of_variables".into(),
            passed: cov.within(3.0) && (cov.logdet_term - env.log_jacobian(&s, &vec![0.0; m])).abs() == 0.0,
            detail: format!(
                "residual {:.3e} vs 3 std errors {:.3e}; log-det {:.6}",
                cov.residual,
                3.0 * cov.std_error,
                cov.logdet_term
            ),
        },
        VerifyCheck {
            name: "unit_step_jacobian".into(),
            passed: unit.logdet_term == 0.0 && (unit.state_entropy - unit.action_entropy).abs() < 1e-12,
            detail: format!("log-det {} at dt = 1", unit.logdet_term),
        },
    ];
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

impl Run {
    /// Opens (creating if needed) `output_dir/run_id` and takes its lock.
    pub fn open(config: RunConfig, run_id: Option<String>, selection: RunSelection) -> Result<Self> {
        config.validate()?;
        let run_id = run_id
            .or_else(|| config.run_id.clone())
            .or_else(|| match selection {
                RunSelection::Latest => latest_run(&config.output_dir),
                RunSelection::New => None,
            })
            .unwrap_or_else(timestamp_run_id);
        let root = config.output_dir.join(&run_id);
        std::fs::create_dir_all(&root)?;
        for sub in manifest::SUBDIRS {
            std::fs::create_dir_all(root.join(sub))?;
        }
        let lock = RunLock::acquire(&root)?;
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let mut m = Manifest::load(&manifest_path)?;
            m.config = config.clone();
            m
        } else {
            Manifest::new(&run_id, &config)
        };
        Ok(Self {
            config,
            root,
            manifest,
            _lock: lock,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn env(&self) -> Result<DoubleIntegrator> {
        self.config.environment()
    }

    /// Absolute path of a named upstream artifact, or a clear error naming
    /// the stage that produces it.
    pub fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let rel = self.manifest.artifact(name).ok_or_else(|| Error::MissingArtifact {
            what: format!("{name} (run `{producer}` first)"),
            path: self.root.join("manifest.json"),
        })?;
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: format!("{name} (run `{producer}` first)"),
                path,
            });
        }
        Ok(path)
    }

    /// Hashes `files`, records the stage and rewrites the manifest.
    fn finish(
        &mut self,
        stage: &str,
        started: (u64, Instant),
        files: Vec<String>,
        artifacts: &[(&str, &str)],
        summary: String,
    ) -> Result<StageOutput> {
        for rel in &files {
            let path = self.root.join(rel);
            self.manifest.files.insert(
                rel.clone(),
                FileEntry {
                    sha256: sha256_file(&path)?,
                    bytes: std::fs::metadata(&path)?.len(),
                    stage: stage.into(),
                },
            );
        }
        for (name, rel) in artifacts {
            self.manifest.artifacts.insert((*name).into(), (*rel).into());
        }
        self.manifest.seeds.insert(stage.into(), self.config.seed);
        let wall = started.1.elapsed().as_secs_f64();
        self.manifest.stages.push(StageRecord {
            stage: stage.into(),
            seed: self.config.seed,
            started_at: started.0,
            wall_time_s: wall,
            config_sha256: manifest::sha256_bytes(self.config.to_json()?.as_bytes()),
            outputs: files.clone(),
        });
        self.manifest.save(&self.root.join("manifest.json"))?;
        log::info!("{stage}: {summary}");
        Ok(StageOutput {
            stage: stage.into(),
            files,
            wall_time_s: wall,
            summary,
        })
    }

    fn write_agent(&self, outcome: &TrainOutcome, name: &str) -> Result<Vec<String>> {
        let ckpt = format!("checkpoints/{name}.ckpt");
        let curve = format!("logs/{name}_curve.csv");
        outcome.agent.save(&self.path(&ckpt))?;
        crate::policy::train::save_curve(&self.path(&curve), &outcome.curve)?;
        Ok(vec![ckpt.clone(), format!("{ckpt}.json"), curve])
    }

    pub fn train_expert(&mut self) -> Result<StageOutput> {
        let started = (unix_now(), Instant::now());
        let env = self.env()?;
        let outcome = train_expert(&env, &self.config.expert_sac(), self.config.seed)?;
        let files = self.write_agent(&outcome, "expert")?;
        let last = outcome.curve.last().map_or(f64::NAN, |p| p.eval_return_mean);
        self.finish(
            "train-expert",
            started,
            files,
            &[(EXPERT_AGENT, "checkpoints/expert.ckpt")],
            format!("final evaluation return {last:.3}"),
        )
    }

    fn load_dataset(&self, kind: DatasetKind) -> Result<TrajectorySet> {
        TrajectorySet::load(&self.require(&dataset_artifact(kind), "collect")?)
    }

    /// Collects `n` trajectories of `kind` (defaults from the dataset
    /// section).
    pub fn collect(&mut self, kind: DatasetKind, n: Option<usize>) -> Result<StageOutput> {
        let started = (unix_now(), Instant::now());
        let env = self.env()?;
        let d = &self.config.dataset;
        let seed = self.config.seed;
        let set = match kind {
            DatasetKind::Random => data::collect_random(&env, n.unwrap_or(d.n_random), seed)?,
            DatasetKind::Expert | DatasetKind::NoisyExpert => {
                let expert = Agent::load(&self.require(EXPERT_AGENT, "train-expert")?)?;
                if kind == DatasetKind::Expert {
                    data::collect_expert(&expert, &env, n.unwrap_or(d.n_expert), seed)?
                } else {
                    data::collect_noisy_expert(&expert, &env, n.unwrap_or(d.n_noisy), d.l_max, seed)?
                }
            }
        };
        if set.trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rel = format!("datasets/{}.csv", kind.as_str());
        set.save(&self.path(&rel))?;
        let artifact = dataset_artifact(kind);
        self.finish(
            "collect",
            started,
            vec![rel.clone()],
            &[(artifact.as_str(), rel.as_str())],
            format!(
                "{} {} trajectories, mean return {:.3}",
                set.trajectories.len(),
                kind.as_str(),
                set.mean_return()
            ),
        )
    }

    pub fn train_flow(&mut self) -> Result<StageOutput> {
        let started = (unix_now(), Instant::now());
        let expert = self.load_dataset(DatasetKind::Expert)?;
        let ds = data::to_transitions(&expert, self.config.dataset.subset, self.config.seed)?;
        let trained = train_flow(
            &ds,
            &self.config.noise,
            &self.config.flow,
            &self.config.flow_train,
            self.config.seed,
        )?;
        let ckpt = "checkpoints/flow.ckpt";
        trained.model.save(&self.path(ckpt))?;
        let log = "logs/flow_loss.csv";
        crate::flow::train::save_loss_log(&self.path(log), &trained.losses)?;
        let best = &trained.losses[trained.best_epoch.saturating_sub(1).min(trained.losses.len() - 1)];
        self.finish(
            "train-flow",
            started,
            vec![ckpt.into(), format!("{ckpt}.json"), log.into()],
            &[(FLOW, ckpt)],
            format!(
                "{} transitions, best epoch {} (validation NLL {:.4})",
                ds.len(),
                trained.best_epoch,
                best.val_nll
            ),
        )
    }

    pub fn train_il(&mut self) -> Result<StageOutput> {
        let started = (unix_now(), Instant::now());
        let flow = ConditionalFlowModel::load(&self.require(FLOW, "train-flow")?)?;
        let env = self.env()?;
        let outcome = train_imitation(&env, &flow, &self.config.sac, self.config.seed)?;
        let files = self.write_agent(&outcome, "imitation")?;
        let last = outcome.curve.last().map_or(f64::NAN, |p| p.eval_return_mean);
        self.finish(
            "train-il",
            started,
            files,
            &[(IMITATION_AGENT, "checkpoints/imitation.ckpt")],
            format!("final ground-truth evaluation return {last:.3}"),
        )
    }

    /// Ground-truth returns of whichever agents exist, with random and LQR
    /// baselines.
    pub fn eval(&mut self) -> Result<(StageOutput, EvalReport)> {
        let started = (unix_now(), Instant::now());
        let env = self.env()?;
        let episodes = self.config.sac.eval_episodes;
        let seed = self.config.seed;
        let stats = |name: &str| -> Result<Option<ReturnStats>> {
            match self.manifest.artifact(name) {
                None => Ok(None),
                Some(rel) => {
                    let agent = Agent::load(&self.root.join(rel))?;
                    let (mean, std) = evaluate(&agent, &env, episodes, seed)?;
                    Ok(Some(ReturnStats { mean, std }))
                }
            }
        };
        let imitation = stats(IMITATION_AGENT)?;
        let expert = stats(EXPERT_AGENT)?;
        if imitation.is_none() && expert.is_none() {
            return Err(Error::MissingArtifact {
                what: "trained agent (run `train-expert` or `train-il` first)".into(),
                path: self.root.join("manifest.json"),
            });
        }
        let random_mean = data::collect_random(&env, episodes, seed)?.mean_return();
        let lqr_reference = lqr_reference_return(&env, episodes, seed);
        let report = EvalReport {
            env: self.config.env.clone(),
            episodes,
            normalized_vs_expert: match (&imitation, &expert) {
                (Some(i), Some(e)) => Some(normalized_score(i.mean, random_mean, e.mean)),
                _ => None,
            },
            normalized_vs_lqr: imitation
                .as_ref()
                .or(expert.as_ref())
                .map(|r| normalized_score(r.mean, random_mean, lqr_reference)),
            imitation,
            expert,
            random_mean,
            lqr_reference,
        };
        let rel = "reports/eval.json";
        std::fs::write(self.path(rel), serde_json::to_vec_pretty(&report)?)?;
        let summary = format!(
            "imitation {:?}, expert {:?}, random {:.3}, LQR {:.3}",
            report.imitation.as_ref().map(|r| r.mean),
            report.expert.as_ref().map(|r| r.mean),
            random_mean,
            lqr_reference
        );
        let out = self.finish("eval", started, vec![rel.into()], &[("eval_report", rel)], summary)?;
        Ok((out, report))
    }

    /// Scores held-out expert, noisy-expert and random trajectories under
    /// the flow. Held-out trajectories are the expert rollouts outside the
    /// training subset; missing noisy and random sets are collected first.
    pub fn calibrate(&mut self) -> Result<(StageOutput, CalibrationSummary)> {
        let flow = ConditionalFlowModel::load(&self.require(FLOW, "train-flow")?)?;
        for kind in [DatasetKind::NoisyExpert, DatasetKind::Random] {
            if self.manifest.artifact(&dataset_artifact(kind)).is_none() {
                self.collect(kind, None)?;
            }
        }
        let started = (unix_now(), Instant::now());
        let expert = self.load_dataset(DatasetKind::Expert)?;
        let (_, held) = subset_split(expert.trajectories.len(), self.config.dataset.subset, self.config.seed)?;
        if held.is_empty() {
            return Err(Error::Config {
                key: "dataset.subset".into(),
                reason: "no expert trajectories are held out from flow training".into(),
            });
        }
        let held_out = TrajectorySet {
            header: data::DatasetHeader {
                count: held.len(),
                ..expert.header.clone()
            },
            trajectories: held.iter().map(|&i| expert.trajectories[i].clone()).collect(),
        };
        let noisy = self.load_dataset(DatasetKind::NoisyExpert)?;
        let random = self.load_dataset(DatasetKind::Random)?;
        let c = self.config.calibration.clone();
        let report = calibrate(&flow, &[&held_out, &noisy, &random], c.h_eval)?;
        let dir = self.path("reports/calibration");
        let mut files: Vec<String> = report
            .save(&dir)?
            .iter()
            .map(|p| {
                p.strip_prefix(&self.root)
                    .expect("inside run")
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        let probe = &held_out.trajectories[0].states[0];
        let rows = analysis::sweep(&flow, probe, c.sweep_samples, c.sweep_bins, self.config.seed)?;
        let sweep_rel = "reports/calibration/sweep.csv";
        analysis::calibration::write_sweep(std::fs::File::create(self.path(sweep_rel))?, &rows)?;
        files.push(sweep_rel.into());
        let noisy_rho = report
            .summary_for(DatasetKind::NoisyExpert)
            .and_then(|k| k.spearman_trajectory);
        let summary = format!(
            "noisy-expert trajectory Spearman {:?}, expert above random p95: {:?}",
            noisy_rho, report.summary.expert_above_random_p95
        );
        let out = self.finish(
            "calibrate",
            started,
            files,
            &[("calibration", "reports/calibration/summary.json")],
            summary,
        )?;
        Ok((out, report.summary))
    }

    pub fn verify(&mut self) -> Result<(StageOutput, VerifyReport)> {
        let started = (unix_now(), Instant::now());
        let env = self.env()?;
        let report = verify_oracles(&env, 100, 100_000, self.config.seed)?;
        let rel = "reports/verify.json";
        std::fs::write(self.path(rel), serde_json::to_vec_pretty(&report)?)?;
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        let summary = if failed.is_empty() {
            format!("all {} checks passed", report.checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        };
        let out = self.finish("verify", started, vec![rel.into()], &[("verify_report", rel)], summary)?;
        Ok((out, report))
    }

    /// Writes `n` flow samples of `s'` given `state` at noise level `h`.
    pub fn sample_flow(&mut self, state: &[f64], h: f64, n: usize) -> Result<StageOutput> {
        let started = (unix_now(), Instant::now());
        let flow = ConditionalFlowModel::load(&self.require(FLOW, "train-flow")?)?;
        let samples = flow.sample_with_log_prob(state, h, n, self.config.seed)?;
        let rel = format!("reports/samples_h{h}.csv");
        let mut w = csv::Writer::from_path(self.path(&rel))?;
        let mut header: Vec<String> = (0..flow.dim()).map(|i| format!("s{i}")).collect();
        header.push("log_prob".into());
        w.write_record(&header)?;
        for (x, lp) in &samples {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(lp.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        self.finish(
            "sample-flow",
            started,
            vec![rel],
            &[],
            format!("{n} samples at h = {h}"),
        )
    }
}
