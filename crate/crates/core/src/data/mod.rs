//! Demonstration datasets: expert, noisy-expert and random rollouts, and
//! their flattening into state-only transition pairs.
//!
//! Files are one JSON header line followed by a CSV table (with its own
//! column-name row).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{Controller, EnvSpec, EnvState, Environment};
use crate::error::{Error, Result};
use crate::seeding::{self, streams};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Expert,
    NoisyExpert,
    Random,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Expert => "expert",
            DatasetKind::NoisyExpert => "noisy_expert",
            DatasetKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(DatasetKind::Expert),
            "noisy_expert" => Ok(DatasetKind::NoisyExpert),
            "random" => Ok(DatasetKind::Random),
            other => Err(Error::Config {
                key: "kind".into(),
                reason: format!("unknown dataset kind `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub env: String,
    pub seed: u64,
    /// Action-noise standard deviation `L`, in units of the half action range.
    pub noise_level: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states.
    pub states: Vec<Vec<f64>>,
    /// `T` applied (clamped) actions.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn check_lengths(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return Err(Error::Shape(format!(
                "trajectory with {} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        Ok(())
    }

    /// Replays the recorded actions from `states[0]` and checks every state
    /// and reward; returns the largest state deviation.
    pub fn replay<E: Environment + ?Sized>(&self, env: &E) -> Result<f64> {
        self.check_lengths()?;
        let mut state = EnvState {
            s: self.states[0].clone(),
            t: 0,
        };
        let mut worst: f64 = 0.0;
        for (t, a) in self.actions.iter().enumerate() {
            let step = env.step(&state, a)?;
            for (x, y) in step.next.s.iter().zip(&self.states[t + 1]) {
                worst = worst.max((x - y).abs());
            }
            worst = worst.max((step.reward - self.rewards[t]).abs());
            state = step.next;
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
    pub env: EnvSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

fn rollout_with<E, F>(env: &E, seed: u64, index: usize, mut policy: F) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    F: FnMut(&EnvState, &mut rand_chacha::ChaCha8Rng) -> Vec<f64>,
{
    let mut rng = seeding::rng(seed, streams::TRAJECTORY + index as u64);
    let mut state = env.reset(&mut rng);
    let mut states = vec![state.s.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    loop {
        let a = policy(&state, &mut rng);
        let step = env.step(&state, &a)?;
        states.push(step.next.s.clone());
        actions.push(step.action);
        rewards.push(step.reward);
        state = step.next;
        if step.done {
            break;
        }
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
        meta: TrajectoryMeta {
            env: env.spec().name.clone(),
            seed,
            noise_level: None,
        },
    })
}

fn header(env: &dyn Environment, kind: DatasetKind, seed: u64, count: usize) -> DatasetHeader {
    DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        kind,
        seed,
        count,
        env: env.spec().clone(),
        l_max: None,
    }
}

/// Deterministic expert rollouts; trajectory `i` draws its initial state
/// from a stream derived from `seed` and `i`.
pub fn collect_expert<C, E>(expert: &C, env: &E, n_traj: usize, seed: u64) -> Result<TrajectorySet>
where
    C: Controller + Sync + ?Sized,
    E: Environment,
{
    let trajectories = crate::parallel::install(|| {
        (0..n_traj)
            .into_par_iter()
            .map(|i| rollout_with(env, seed, i, |s, _| expert.control(s)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TrajectorySet {
        header: header(env, DatasetKind::Expert, seed, n_traj),
        trajectories,
    })
}

/// Expert rollouts with per-trajectory Gaussian action noise.
///
/// Each trajectory draws `L ~ U(0, l_max)` once; every step applies
/// `a_expert + ω` with `ω ~ N(0, L²)` measured in half action ranges (so
/// `L = 1` is noise as wide as the bounds), clamped into the bounds.
pub fn collect_noisy_expert<C, E>(expert: &C, env: &E, n_traj: usize, l_max: f64, seed: u64) -> Result<TrajectorySet>
where
    C: Controller + Sync + ?Sized,
    E: Environment,
{
    if !(l_max > 0.0) {
        return Err(Error::Config {
            key: "l_max".into(),
            reason: "must be positive".into(),
        });
    }
    let spec = env.spec();
    let trajectories = crate::parallel::install(|| {
        (0..n_traj)
            .into_par_iter()
            .map(|i| {
                let mut level_rng = seeding::rng(seed, streams::NOISE + ((i as u64) << 8));
                let level = level_rng.gen_range(0.0..l_max);
                let mut traj = rollout_with(env, seed, i, |s, rng| {
                    let a = expert.control(s);
                    if level == 0.0 {
                        return a;
                    }
                    let normal = Normal::new(0.0, level).expect("finite level");
                    let noisy: Vec<f64> = a
                        .iter()
                        .zip(spec.action_low.iter().zip(&spec.action_high))
                        .map(|(&a, (&lo, &hi))| a + normal.sample(rng) * 0.5 * (hi - lo))
                        .collect();
                    spec.clamp_action(&noisy).0
                })?;
                traj.meta.noise_level = Some(level);
                Ok(traj)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut header = header(env, DatasetKind::NoisyExpert, seed, n_traj);
    header.l_max = Some(l_max);
    Ok(TrajectorySet { header, trajectories })
}

/// Uniform random actions within the bounds at every step.
pub fn collect_random<E: Environment>(env: &E, n_traj: usize, seed: u64) -> Result<TrajectorySet> {
    let spec = env.spec();
    let trajectories = crate::parallel::install(|| {
        (0..n_traj)
            .into_par_iter()
            .map(|i| {
                rollout_with(env, seed, i, |_, rng| {
                    spec.action_low
                        .iter()
                        .zip(&spec.action_high)
                        .map(|(&lo, &hi)| rng.gen_range(lo..hi))
                        .collect()
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TrajectorySet {
        header: header(env, DatasetKind::Random, seed, n_traj),
        trajectories,
    })
}

impl TrajectorySet {
    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return f64::NAN;
        }
        self.trajectories.iter().map(Trajectory::total_return).sum::<f64>() / self.trajectories.len() as f64
    }

    fn columns(&self) -> Vec<String> {
        let (d, m) = (self.header.env.state_dim, self.header.env.action_dim);
        let mut cols = vec!["traj_id".to_string(), "t".to_string()];
        cols.extend((0..d).map(|i| format!("s{i}")));
        cols.extend((0..m).map(|i| format!("a{i}")));
        cols.push("r".into());
        if self.header.kind == DatasetKind::NoisyExpert {
            cols.push("L".into());
        }
        cols
    }

    /// One row per step `t < T`, plus a final row per trajectory holding
    /// the terminal state with empty action and reward fields.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns())?;
        let (d, m) = (self.header.env.state_dim, self.header.env.action_dim);
        let noisy = self.header.kind == DatasetKind::NoisyExpert;
        for (id, traj) in self.trajectories.iter().enumerate() {
            traj.check_lengths()?;
            for t in 0..=traj.len() {
                let mut rec = vec![id.to_string(), t.to_string()];
                rec.extend(traj.states[t].iter().map(|v| v.to_string()));
                if t < traj.len() {
                    rec.extend(traj.actions[t].iter().map(|v| v.to_string()));
                    rec.push(traj.rewards[t].to_string());
                } else {
                    rec.extend(std::iter::repeat(String::new()).take(m + 1));
                }
                if noisy {
                    rec.push(traj.meta.noise_level.unwrap_or(0.0).to_string());
                }
                debug_assert_eq!(rec.len(), 2 + d + m + 1 + noisy as usize);
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let header: DatasetHeader = read_header(&mut reader)?;
        let (d, m) = (header.env.state_dim, header.env.action_dim);
        let noisy = header.kind == DatasetKind::NoisyExpert;
        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for rec in rdr.records() {
            let rec = rec?;
            let id: usize = parse_field(&rec, 0)?;
            let t: usize = parse_field(&rec, 1)?;
            if id == trajectories.len() {
                trajectories.push(Trajectory {
                    states: Vec::new(),
                    actions: Vec::new(),
                    rewards: Vec::new(),
                    meta: TrajectoryMeta {
                        env: header.env.name.clone(),
                        seed: header.seed,
                        noise_level: None,
                    },
                });
            }
            let traj = trajectories
                .get_mut(id)
                .filter(|tr| tr.states.len() == t)
                .ok_or_else(|| Error::Format(format!("row out of order: traj {id}, t {t}")))?;
            traj.states
                .push((0..d).map(|i| parse_field(&rec, 2 + i)).collect::<Result<_>>()?);
            if !rec.get(2 + d).unwrap_or("").is_empty() {
                traj.actions
                    .push((0..m).map(|i| parse_field(&rec, 2 + d + i)).collect::<Result<_>>()?);
                traj.rewards.push(parse_field(&rec, 2 + d + m)?);
            }
            if noisy {
                traj.meta.noise_level = Some(parse_field(&rec, 3 + d + m)?);
            }
        }
        if trajectories.len() != header.count {
            return Err(Error::Format(format!(
                "header promises {} trajectories, file has {}",
                header.count,
                trajectories.len()
            )));
        }
        for tr in &trajectories {
            tr.check_lengths()?;
        }
        Ok(TrajectorySet { header, trajectories })
    }
}

fn read_header<T: serde::de::DeserializeOwned, R: BufRead>(reader: &mut R) -> Result<T> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim().is_empty() {
        return Err(Error::Format("missing JSON header line".into()));
    }
    Ok(serde_json::from_str(line.trim_end())?)
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad or missing field {i} in row {:?}", rec)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionHeader {
    pub format_version: u32,
    pub kind: String,
    pub source_kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
    pub env: EnvSpec,
}

/// State-only `(s, s')` pairs with provenance indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub spec: EnvSpec,
    pub source_kind: DatasetKind,
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
    /// Index of the source trajectory in the originating set.
    pub traj_ids: Vec<usize>,
    pub steps: Vec<usize>,
}

/// Trajectory indices used for training and the held-out remainder when
/// `subset` trajectories are drawn by a shuffle seeded by `seed`. Without a
/// subset every trajectory is used, in order.
pub fn subset_split(n: usize, subset: Option<usize>, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let keep = subset.unwrap_or(n);
    if keep > n {
        return Err(Error::Config {
            key: "subset".into(),
            reason: format!("asked for {keep} trajectories, only {n} available"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if subset.is_some() {
        order.shuffle(&mut seeding::rng(seed, streams::SUBSET));
    }
    let held_out = order.split_off(keep);
    Ok((order, held_out))
}

/// Flattens `set` into transitions, keeping the first `subset` trajectories
/// after a shuffle seeded by `seed` (all of them when `subset` is `None`).
pub fn to_transitions(set: &TrajectorySet, subset: Option<usize>, seed: u64) -> Result<TransitionDataset> {
    let (order, _) = subset_split(set.trajectories.len(), subset, seed)?;
    let mut ds = TransitionDataset {
        spec: set.header.env.clone(),
        source_kind: set.header.kind,
        seed,
        states: Vec::new(),
        next_states: Vec::new(),
        traj_ids: Vec::new(),
        steps: Vec::new(),
    };
    for &id in &order {
        let tr = &set.trajectories[id];
        tr.check_lengths()?;
        for t in 0..tr.len() {
            ds.states.push(tr.states[t].clone());
            ds.next_states.push(tr.states[t + 1].clone());
            ds.traj_ids.push(id);
            ds.steps.push(t);
        }
    }
    Ok(ds)
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.state_dim
    }

    /// Selects rows by index, keeping provenance.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            source_kind: self.source_kind,
            seed: self.seed,
            states: rows.iter().map(|&i| self.states[i].clone()).collect(),
            next_states: rows.iter().map(|&i| self.next_states[i].clone()).collect(),
            traj_ids: rows.iter().map(|&i| self.traj_ids[i]).collect(),
            steps: rows.iter().map(|&i| self.steps[i]).collect(),
        }
    }

    /// Random `(train, validation)` split with `round(len·fraction)`
    /// validation rows (at least one when the dataset has two or more).
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::rng(seed, streams::SPLIT));
        let mut n_val = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        let (val, train) = order.split_at(n_val.min(n));
        (self.select(train), self.select(val))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let header = TransitionHeader {
            format_version: DATASET_FORMAT_VERSION,
            kind: "transitions".into(),
            source_kind: self.source_kind,
            seed: self.seed,
            count: self.len(),
            env: self.spec.clone(),
        };
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let d = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut cols = vec!["traj_id".to_string(), "t".to_string()];
        cols.extend((0..d).map(|i| format!("s{i}")));
        cols.extend((0..d).map(|i| format!("s_next{i}")));
        w.write_record(&cols)?;
        for i in 0..self.len() {
            let mut rec = vec![self.traj_ids[i].to_string(), self.steps[i].to_string()];
            rec.extend(self.states[i].iter().map(|v| v.to_string()));
            rec.extend(self.next_states[i].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let header: TransitionHeader = read_header(&mut reader)?;
        let d = header.env.state_dim;
        let mut ds = TransitionDataset {
            spec: header.env.clone(),
            source_kind: header.source_kind,
            seed: header.seed,
            states: Vec::new(),
            next_states: Vec::new(),
            traj_ids: Vec::new(),
            steps: Vec::new(),
        };
        let mut rdr = csv::Reader::from_reader(reader);
        for rec in rdr.records() {
            let rec = rec?;
            ds.traj_ids.push(parse_field(&rec, 0)?);
            ds.steps.push(parse_field(&rec, 1)?);
            ds.states
                .push((0..d).map(|i| parse_field(&rec, 2 + i)).collect::<Result<_>>()?);
            ds.next_states
                .push((0..d).map(|i| parse_field(&rec, 2 + d + i)).collect::<Result<_>>()?);
        }
        if ds.len() != header.count {
            return Err(Error::Format(format!(
                "header promises {} transitions, file has {}",
                header.count,
                ds.len()
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::lqr::LqrController;
    use crate::envs::DoubleIntegrator;

    #[test]
    fn expert_trajectories_have_full_horizon_and_replay() {
        let env = DoubleIntegrator::one_d();
        let lqr = LqrController::new(&env);
        let set = collect_expert(&lqr, &env, 3, 11).unwrap();
        assert_eq!(set.trajectories.len(), 3);
        for tr in &set.trajectories {
            assert_eq!(tr.len(), 200);
            assert!(tr.replay(&env).unwrap() < 1e-10);
        }
        assert_ne!(set.trajectories[0].states[0], set.trajectories[1].states[0]);
    }

    #[test]
    fn transitions_count_and_subset_determinism() {
        let env = DoubleIntegrator::one_d();
        let set = collect_random(&env, 12, 3).unwrap();
        let all = to_transitions(&set, None, 0).unwrap();
        assert_eq!(all.len(), 12 * 200);
        let a = to_transitions(&set, Some(10), 5).unwrap();
        let b = to_transitions(&set, Some(10), 5).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a, b);
        let c = to_transitions(&set, Some(10), 6).unwrap();
        assert_ne!(a.traj_ids, c.traj_ids);
        assert!(to_transitions(&set, Some(13), 0).is_err());
    }

    #[test]
    fn random_action_moments() {
        let env = DoubleIntegrator::point_mass();
        let set = collect_random(&env, 20, 1).unwrap();
        let n = 20.0 * 200.0;
        for j in 0..2 {
            let mean: f64 = set
                .trajectories
                .iter()
                .flat_map(|t| t.actions.iter().map(move |a| a[j]))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 4.0 * 4.0 / (12.0 * n).sqrt(), "mean={mean}");
        }
        for tr in &set.trajectories {
            assert!(tr.replay(&env).unwrap() < 1e-10);
        }
    }

    #[test]
    fn noisy_expert_records_levels() {
        let env = DoubleIntegrator::one_d();
        let lqr = LqrController::new(&env);
        let set = collect_noisy_expert(&lqr, &env, 8, 1.5, 2).unwrap();
        assert_eq!(set.header.l_max, Some(1.5));
        for tr in &set.trajectories {
            let l = tr.meta.noise_level.unwrap();
            assert!((0.0..1.5).contains(&l));
            assert!(tr.replay(&env).unwrap() < 1e-10);
        }
    }

    #[test]
    fn dataset_file_round_trip_is_byte_stable() {
        let env = DoubleIntegrator::one_d();
        let lqr = LqrController::new(&env);
        let set = collect_noisy_expert(&lqr, &env, 2, 1.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noisy.csv");
        set.save(&p).unwrap();
        let back = TrajectorySet::load(&p).unwrap();
        assert_eq!(back, set);
        let mut a = Vec::new();
        let mut b = Vec::new();
        set.write(&mut a).unwrap();
        collect_noisy_expert(&lqr, &env, 2, 1.5, 4)
            .unwrap()
            .write(&mut b)
            .unwrap();
        assert_eq!(a, b);
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        let hdr: serde_json::Value = serde_json::from_str(first).unwrap();
        assert_eq!(hdr["kind"], "noisy_expert");
        assert_eq!(hdr["l_max"], 1.5);

        let ds = to_transitions(&set, None, 0).unwrap();
        let q = dir.path().join("pairs.csv");
        ds.save(&q).unwrap();
        assert_eq!(TransitionDataset::load(&q).unwrap(), ds);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let env = DoubleIntegrator::one_d();
        let ds = to_transitions(&collect_random(&env, 1, 0).unwrap(), None, 0).unwrap();
        let (tr, va) = ds.split(0.1, 3);
        assert_eq!(va.len(), 20);
        assert_eq!(tr.len() + va.len(), ds.len());
    }
}
