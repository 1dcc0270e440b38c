use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{DatasetKind, TrajectorySet};
use crate::error::{Error, Result};
use crate::flow::ConditionalFlowModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub kind: DatasetKind,
    pub index: usize,
    pub noise_level: Option<f64>,
    pub total_return: f64,
    pub total_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub kind: DatasetKind,
    pub index: usize,
    pub t: usize,
    pub reward: f64,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: DatasetKind,
    pub trajectories: usize,
    pub mean_return: f64,
    pub mean_log_prob: f64,
    /// Trajectory log-prob at the 5th, 25th, 50th, 75th and 95th percentiles.
    pub percentiles: [f64; 5],
    pub spearman_trajectory: Option<f64>,
    pub spearman_step: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub h_eval: f64,
    pub spearman_trajectory: f64,
    pub spearman_step: f64,
    pub per_kind: Vec<KindSummary>,
    /// Fraction of expert trajectories scoring above the 95th percentile of
    /// random-policy trajectories, when both are present.
    pub expert_above_random_p95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub trajectories: Vec<TrajectoryRecord>,
    pub steps: Vec<StepRecord>,
    pub summary: CalibrationSummary,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Linear-interpolated percentile `q ∈ [0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-step standardized log-densities `log p̃(s_{t+1} | s_t, h)` of every
/// trajectory, in input order.
fn score(flow: &ConditionalFlowModel, set: &TrajectorySet, h: f64) -> Result<Vec<Vec<f64>>> {
    set.trajectories
        .par_iter()
        .map(|traj| {
            if traj.states.first().map_or(true, |s| s.len() != flow.dim()) {
                return Err(Error::Shape(format!(
                    "trajectory states have dimension {:?}, flow expects {}",
                    traj.states.first().map(|s| s.len()),
                    flow.dim()
                )));
            }
            let n = traj.states.len() - 1;
            flow.log_prob_standardized_batch(&traj.states[..n], &traj.states[1..], &vec![h; n])
        })
        .collect()
}

/// Scores every dataset under the frozen flow at noise level `h_eval`.
pub fn calibrate(flow: &ConditionalFlowModel, datasets: &[&TrajectorySet], h_eval: f64) -> Result<CalibrationReport> {
    let scored: Vec<Vec<Vec<f64>>> = crate::parallel::install(|| {
        datasets
            .iter()
            .map(|set| score(flow, set, h_eval))
            .collect::<Result<_>>()
    })?;

    let mut trajectories = Vec::new();
    let mut steps = Vec::new();
    let mut per_kind = Vec::new();
    for (set, lps) in datasets.iter().zip(&scored) {
        let kind = set.header.kind;
        let mut t_ret = Vec::new();
        let mut t_lp = Vec::new();
        let mut s_r = Vec::new();
        let mut s_lp = Vec::new();
        for (index, (traj, lp)) in set.trajectories.iter().zip(lps).enumerate() {
            let total_log_prob = lp.iter().sum::<f64>();
            trajectories.push(TrajectoryRecord {
                kind,
                index,
                noise_level: traj.meta.noise_level,
                total_return: traj.total_return(),
                total_log_prob,
            });
            t_ret.push(traj.total_return());
            t_lp.push(total_log_prob);
            for (t, (&r, &l)) in traj.rewards.iter().zip(lp).enumerate() {
                steps.push(StepRecord {
                    kind,
                    index,
                    t,
                    reward: r,
                    log_prob: l,
                });
                s_r.push(r);
                s_lp.push(l);
            }
        }
        let n = t_lp.len().max(1) as f64;
        per_kind.push(KindSummary {
            kind,
            trajectories: t_lp.len(),
            mean_return: t_ret.iter().sum::<f64>() / n,
            mean_log_prob: t_lp.iter().sum::<f64>() / n,
            percentiles: [5.0, 25.0, 50.0, 75.0, 95.0].map(|q| percentile(&t_lp, q)),
            spearman_trajectory: spearman(&t_ret, &t_lp),
            spearman_step: spearman(&s_r, &s_lp),
        });
    }

    let all_ret: Vec<f64> = trajectories.iter().map(|r| r.total_return).collect();
    let all_lp: Vec<f64> = trajectories.iter().map(|r| r.total_log_prob).collect();
    let step_r: Vec<f64> = steps.iter().map(|r| r.reward).collect();
    let step_lp: Vec<f64> = steps.iter().map(|r| r.log_prob).collect();
    let by_kind = |k: DatasetKind| -> Vec<f64> {
        trajectories
            .iter()
            .filter(|r| r.kind == k)
            .map(|r| r.total_log_prob)
            .collect()
    };
    let expert = by_kind(DatasetKind::Expert);
    let random = by_kind(DatasetKind::Random);
    let expert_above_random_p95 = (!expert.is_empty() && !random.is_empty()).then(|| {
        let p95 = percentile(&random, 95.0);
        expert.iter().filter(|&&v| v > p95).count() as f64 / expert.len() as f64
    });
    let summary = CalibrationSummary {
        h_eval,
        spearman_trajectory: spearman(&all_ret, &all_lp).unwrap_or(f64::NAN),
        spearman_step: spearman(&step_r, &step_lp).unwrap_or(f64::NAN),
        per_kind,
        expert_above_random_p95,
    };
    Ok(CalibrationReport {
        trajectories,
        steps,
        summary,
    })
}

impl CalibrationReport {
    pub fn summary_for(&self, kind: DatasetKind) -> Option<&KindSummary> {
        self.summary.per_kind.iter().find(|k| k.kind == kind)
    }

    pub fn write_trajectories<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.trajectories {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_steps<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.steps {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `trajectories.csv`, `steps.csv` and `summary.json` inside `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let paths = [
            dir.join("trajectories.csv"),
            dir.join("steps.csv"),
            dir.join("summary.json"),
        ];
        self.write_trajectories(std::fs::File::create(&paths[0])?)?;
        self.write_steps(std::fs::File::create(&paths[1])?)?;
        std::fs::write(&paths[2], serde_json::to_vec_pretty(&self.summary)?)?;
        Ok(paths.to_vec())
    }
}

/// Per-dimension histogram of flow samples at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepHistogram {
    pub h: f64,
    pub dim: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Samples `n` next states from `s` at `h ∈ {0, h_max/4, h_max/2, h_max}`
/// and bins each dimension into `bins` equal-width buckets shared across
/// noise levels.
pub fn sweep(flow: &ConditionalFlowModel, s: &[f64], n: usize, bins: usize, seed: u64) -> Result<Vec<SweepHistogram>> {
    if bins == 0 || n == 0 {
        return Err(Error::Contract("sweep needs at least one sample and one bin".into()));
    }
    let h_max = flow.noise.h_max;
    let levels = [0.0, h_max / 4.0, h_max / 2.0, h_max];
    let samples: Vec<Vec<Vec<f64>>> = levels
        .iter()
        .map(|&h| flow.sample(s, h, n, seed))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for d in 0..flow.dim() {
        let all = samples.iter().flatten().map(|x| x[d]);
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        for (level, set) in levels.iter().zip(&samples) {
            let mut counts = vec![0usize; bins];
            for x in set {
                let b = (((x[d] - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, &count) in counts.iter().enumerate() {
                out.push(SweepHistogram {
                    h: *level,
                    dim: d,
                    bin_low: lo + b as f64 * width,
                    bin_high: lo + (b + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_reference_values() {
        // scipy.stats.spearmanr([1, 2, 3, 4, 5], [5, 6, 7, 8, 7]) = 0.8207826816681233
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        assert!((r - 0.820_782_681_668_123_3).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), None);
        // Monotone transforms do not change the ranks.
        let x = [0.3, -1.0, 2.5, 0.1];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert_eq!(spearman(&x, &y), Some(1.0));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 95.0), 4.8);
        assert_eq!(percentile(&v, 100.0), 5.0);
    }
}
