//! Maximum-likelihood fitting of the noise-conditioned flow.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{ConditionalFlowModel, FlowConfig};
use super::noise::{NoiseConfig, Standardizer};
use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::numcore::{Access, Graph, OptimizerState, Tensor};
use crate::seeding::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 256,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            validation_fraction: 0.1,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug)]
pub struct FlowTraining {
    pub model: ConditionalFlowModel,
    pub losses: Vec<EpochLoss>,
    /// Epoch (1-based) of the returned parameters.
    pub best_epoch: usize,
}

/// Noisy copies `(s̃, s̃', h)` in standardized units.
struct Perturbed {
    s: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    h: Vec<f64>,
}

fn perturb(
    s: &[Vec<f64>],
    next: &[Vec<f64>],
    rows: &[usize],
    noise: &NoiseConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Perturbed {
    let mut out = Perturbed {
        s: Vec::with_capacity(rows.len()),
        next: Vec::with_capacity(rows.len()),
        h: Vec::with_capacity(rows.len()),
    };
    for &i in rows {
        let h = noise.sample_level(rng);
        let a: Vec<f64> = s[i].iter().map(|v| v + h * noise.sample_unit(rng)).collect();
        let b: Vec<f64> = next[i].iter().map(|v| v + h * noise.sample_unit(rng)).collect();
        out.s.push(a);
        out.next.push(b);
        out.h.push(h);
    }
    out
}

/// Mean standardized NLL of a perturbed batch, recorded on `g`.
fn batch_nll(
    model: &ConditionalFlowModel,
    g: &mut Graph,
    batch: &Perturbed,
    access: Access,
) -> Result<crate::numcore::Var> {
    let ctx = g.constant(model.context_tensor(&batch.s, &batch.h));
    let x = g.constant(Tensor::from_rows(&batch.next)?);
    let lp = model.log_density_tape(g, x, ctx, access);
    let m = g.mean(lp);
    Ok(g.neg(m))
}

fn eval_nll(model: &ConditionalFlowModel, data: &Perturbed, chunk: usize) -> Result<f64> {
    let n = data.s.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = Perturbed {
            s: data.s[start..end].to_vec(),
            next: data.next[start..end].to_vec(),
            h: data.h[start..end].to_vec(),
        };
        let mut g = Graph::new();
        let loss = batch_nll(model, &mut g, &part, Access::Frozen)?;
        total += g.value(loss).item() * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Fits a flow on `dataset`.
///
/// States are standardized with statistics of the training pairs. Each
/// epoch redraws, per example, `h ~ U[h_min, h_max]` and independent
/// unit noise for `s` and `s'`. The validation split gets one fixed
/// perturbation; the parameters with the lowest validation NLL are
/// returned (training NLL when there is no validation split).
pub fn train_flow(
    dataset: &TransitionDataset,
    noise: &NoiseConfig,
    config: &FlowConfig,
    train: &FlowTrainConfig,
    seed: u64,
) -> Result<FlowTraining> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    noise.validate()?;
    train.validate()?;
    let (train_set, val_set) = if train.validation_fraction > 0.0 && dataset.len() >= 2 {
        dataset.split(train.validation_fraction, seed)
    } else {
        (dataset.clone(), dataset.select(&[]))
    };
    let standardizer = Standardizer::fit(
        train_set
            .states
            .iter()
            .chain(&train_set.next_states)
            .map(|r| r.as_slice()),
    )?;
    let std_rows = |rows: &[Vec<f64>]| rows.iter().map(|r| standardizer.apply(r)).collect::<Vec<_>>();
    let (tr_s, tr_n) = (std_rows(&train_set.states), std_rows(&train_set.next_states));
    let (va_s, va_n) = (std_rows(&val_set.states), std_rows(&val_set.next_states));

    let mut model = ConditionalFlowModel::new(dataset.dim(), config.clone(), *noise, standardizer, seed)?;
    let mut opt = OptimizerState::adamw(train.learning_rate, train.weight_decay);
    let mut batch_rng = seeding::rng(seed, streams::BATCH);
    let mut noise_rng = seeding::rng(seed, streams::NOISE);
    let val_rows: Vec<usize> = (0..va_s.len()).collect();
    let val_fixed = perturb(&va_s, &va_n, &val_rows, noise, &mut seeding::rng(seed, streams::EVAL));

    let mut order: Vec<usize> = (0..tr_s.len()).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    let mut best = (f64::INFINITY, 0usize, model.snapshot());
    for epoch in 1..=train.epochs {
        order.shuffle(&mut batch_rng);
        let mut sum = 0.0;
        for (b, rows) in order.chunks(train.batch_size).enumerate() {
            let batch = perturb(&tr_s, &tr_n, rows, noise, &mut noise_rng);
            model.refresh_spectral();
            let mut g = Graph::new();
            let loss = batch_nll(&model, &mut g, &batch, Access::Train)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("flow NLL is {value}"),
                });
            }
            let store = model.params_mut();
            store.zero_grad();
            g.backward_into(loss, store)?;
            opt.step(store).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                detail: e.to_string(),
            })?;
            sum += value * rows.len() as f64;
        }
        let train_nll = sum / tr_s.len() as f64;
        let val_nll = if val_fixed.s.is_empty() {
            f64::NAN
        } else {
            eval_nll(&model, &val_fixed, 4096)?
        };
        let score = if val_nll.is_nan() { train_nll } else { val_nll };
        if score < best.0 {
            best = (score, epoch, model.snapshot());
        }
        log::debug!("flow epoch {epoch}: train {train_nll:.4} val {val_nll:.4}");
        losses.push(EpochLoss {
            epoch,
            train_nll,
            val_nll,
        });
    }
    model.restore(&best.2)?;
    Ok(FlowTraining {
        model,
        losses,
        best_epoch: best.1,
    })
}

pub fn write_loss_log<W: Write>(out: W, losses: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in losses {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_log(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    write_loss_log(std::fs::File::create(path)?, losses)
}
