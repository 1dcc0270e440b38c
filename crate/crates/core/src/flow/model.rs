//! Noise-conditioned coupling flow `p(s' | s, h)`.
//!
//! The context `c = [s, h / h_max]` (standardized `s`) is embedded once as
//! `[c, sin(ω₀·net(c))]`. A conditional diagonal normal over the latent and
//! every coupling conditioner read that embedding. The density direction
//! runs data → latent through the coupling layers in order.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::noise::{NoiseConfig, NoiseFamily, Standardizer};
use super::spline::{raw_param_count, spline_forward_tape, Direction, SplineKnots};
use crate::counter::Counter;
use crate::error::{Error, Result};
use crate::numcore::checkpoint;
use crate::numcore::{Access, Activation, Graph, Linear, Mlp, MlpOptions, ParamStore, Tensor, Var};
use crate::seeding;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Soft bound on the base log-scale: `b·tanh(raw / b)`.
const LOG_SCALE_BOUND: f64 = 8.0;
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
    pub context_hidden: usize,
    pub omega0: f64,
    pub spectral_norm: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            bins: 8,
            tail_bound: 6.0,
            hidden: vec![8, 8],
            context_hidden: 8,
            omega0: 2.0 * PI,
            spectral_norm: true,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.layers == 0 {
            return bad("layers", "need at least one coupling layer");
        }
        if self.bins < 2 {
            return bad("bins", "need at least two bins");
        }
        if !(self.tail_bound > 0.0) {
            return bad("tail_bound", "must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.context_hidden == 0 {
            return bad("hidden", "hidden sizes must be positive");
        }
        if !(self.omega0 > 0.0) {
            return bad("omega0", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Coupling {
    /// Dimensions passed through unchanged and fed to the conditioner.
    identity: Vec<usize>,
    /// Dimensions transformed by splines.
    transform: Vec<usize>,
    net: Mlp,
}

#[derive(Clone, Debug)]
pub struct ConditionalFlowModel {
    pub config: FlowConfig,
    pub noise: NoiseConfig,
    pub standardizer: Standardizer,
    dim: usize,
    store: ParamStore,
    context_net: Mlp,
    base_net: Mlp,
    base_skip: Linear,
    couplings: Vec<Coupling>,
    h_clamps: Counter,
}

/// Alternating binary masks; in one dimension every layer transforms
/// dimension 0 from the context alone.
fn masks(dim: usize, layers: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..layers)
        .map(|l| {
            if dim == 1 {
                return (Vec::new(), vec![0]);
            }
            let (mut keep, mut change) = (Vec::new(), Vec::new());
            for j in 0..dim {
                if (j + l) % 2 == 0 {
                    keep.push(j);
                } else {
                    change.push(j);
                }
            }
            (keep, change)
        })
        .collect()
}

impl ConditionalFlowModel {
    /// A fresh model. Base and conditioner output layers start at zero, so
    /// the untrained flow is the identity with a standard-normal base.
    pub fn new(
        dim: usize,
        config: FlowConfig,
        noise: NoiseConfig,
        standardizer: Standardizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        noise.validate()?;
        if dim == 0 || standardizer.dim() != dim {
            return Err(Error::Shape(format!(
                "flow of dimension {dim} with a {}-dimensional standardizer",
                standardizer.dim()
            )));
        }
        let mut rng = seeding::rng(seed, seeding::streams::INIT);
        let mut store = ParamStore::new();
        let sine = Activation::Sine(config.omega0);
        let opts = MlpOptions {
            hidden: sine,
            spectral_hidden: config.spectral_norm,
            output_scale: 1.0,
        };
        let ctx_in = dim + 1;
        let ch = config.context_hidden;
        let context_net = Mlp::new(&mut store, "context", &[ctx_in, ch, ch], opts, &mut rng);
        let emb = ctx_in + ch;

        let mut sizes = vec![emb];
        sizes.extend(&config.hidden);
        sizes.push(2 * dim);
        let base_net = Mlp::new(&mut store, "base", &sizes, opts, &mut rng);
        base_net.zero_output(&mut store);
        let base_skip = Linear::new(&mut store, "base.skip", emb, 2 * dim, 0.0, false, &mut rng);

        let p = raw_param_count(config.bins);
        let couplings = masks(dim, config.layers)
            .into_iter()
            .enumerate()
            .map(|(l, (identity, transform))| {
                let mut sizes = vec![identity.len() + emb];
                sizes.extend(&config.hidden);
                sizes.push(transform.len() * p);
                let net = Mlp::new(&mut store, &format!("coupling{l}"), &sizes, opts, &mut rng);
                net.zero_output(&mut store);
                Coupling {
                    identity,
                    transform,
                    net,
                }
            })
            .collect();
        Ok(Self {
            config,
            noise,
            standardizer,
            dim,
            store,
            context_net,
            base_net,
            base_skip,
            couplings,
            h_clamps: Counter::default(),
        })
    }

    /// Identity transforms, standard-normal base, no standardization.
    pub fn identity(dim: usize, config: FlowConfig, noise: NoiseConfig) -> Result<Self> {
        Self::new(dim, config, noise, Standardizer::identity(dim), 0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// How many `h` values were clamped into `[h_min, h_max]`.
    pub fn h_clamp_count(&self) -> u64 {
        self.h_clamps.get()
    }

    fn check_h(&self, h: f64) -> Result<f64> {
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("noise level h = {h}")));
        }
        let c = h.clamp(self.noise.h_min, self.noise.h_max);
        if c != h {
            self.h_clamps.bump();
        }
        Ok(c)
    }

    fn check_state(&self, s: &[f64], what: &str) -> Result<()> {
        if s.len() != self.dim {
            return Err(Error::Shape(format!(
                "{what} has dimension {}, flow expects {}",
                s.len(),
                self.dim
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    fn h_scale(&self) -> f64 {
        if self.noise.h_max > 0.0 {
            self.noise.h_max
        } else {
            1.0
        }
    }

    /// Context rows `[s_std, h / h_max]` for already-standardized states.
    pub(crate) fn context_tensor(&self, s_std: &[Vec<f64>], h: &[f64]) -> Tensor {
        let d = self.dim;
        let scale = self.h_scale();
        let mut data = Vec::with_capacity(s_std.len() * (d + 1));
        for (s, &hv) in s_std.iter().zip(h) {
            data.extend_from_slice(s);
            data.push(hv / scale);
        }
        Tensor::matrix(s_std.len(), d + 1, data).expect("context shape")
    }

    fn embed(&self, g: &mut Graph, ctx: Var, access: Access) -> Var {
        let out = self.context_net.forward(g, &self.store, ctx, access);
        let feat = g.sin(out, self.config.omega0);
        g.concat(&[ctx, feat])
    }

    /// Base mean and log-scale, both `[n, d]`.
    fn base_params(&self, g: &mut Graph, emb: Var, access: Access) -> (Var, Var) {
        let a = self.base_net.forward(g, &self.store, emb, access);
        let b = self.base_skip.forward(g, &self.store, emb, access);
        let out = g.add(a, b);
        let mean = g.cols(out, 0, self.dim);
        let raw = g.cols(out, self.dim, self.dim);
        let r = g.scale(raw, 1.0 / LOG_SCALE_BOUND);
        let t = g.tanh(r);
        let log_scale = g.scale(t, LOG_SCALE_BOUND);
        (mean, log_scale)
    }

    fn conditioner_input(&self, g: &mut Graph, layer: &Coupling, x: Var, emb: Var) -> Var {
        let mut parts: Vec<Var> = layer.identity.iter().map(|&j| g.cols(x, j, 1)).collect();
        parts.push(emb);
        if parts.len() == 1 {
            emb
        } else {
            g.concat(&parts)
        }
    }

    /// Taped standardized log-density `[n, 1]` of rows `x` given the context.
    pub(crate) fn log_density_tape(&self, g: &mut Graph, x: Var, ctx: Var, access: Access) -> Var {
        let n = g.value(x).rows();
        let emb = self.embed(g, ctx, access);
        let p = raw_param_count(self.config.bins);
        let mut cur = x;
        let mut log_det: Option<Var> = None;
        for layer in &self.couplings {
            let inp = self.conditioner_input(g, layer, cur, emb);
            let raw = layer.net.forward(g, &self.store, inp, access);
            let mut columns: Vec<Var> = (0..self.dim).map(|j| g.cols(cur, j, 1)).collect();
            for (k, &j) in layer.transform.iter().enumerate() {
                let r = g.cols(raw, k * p, p);
                let (y, ld) = spline_forward_tape(g, columns[j], r, self.config.bins, self.config.tail_bound);
                columns[j] = y;
                log_det = Some(match log_det {
                    Some(acc) => g.add(acc, ld),
                    None => ld,
                });
            }
            cur = if self.dim == 1 { columns[0] } else { g.concat(&columns) };
        }
        let (mean, log_scale) = self.base_params(g, emb, access);
        let diff = g.sub(cur, mean);
        let neg_ls = g.neg(log_scale);
        let inv = g.exp(neg_ls);
        let zn = g.mul(diff, inv);
        let sq = g.square(zn);
        let half = g.scale(sq, -0.5);
        let per = g.sub(half, log_scale);
        let per = g.add_scalar(per, -0.5 * LN_2PI);
        let base = g.sum_cols(per);
        match log_det {
            Some(ld) => g.add(base, ld),
            None => {
                debug_assert_eq!(n, g.value(base).rows());
                base
            }
        }
    }

    /// Refreshes every spectral power-iteration vector by one step.
    pub(crate) fn refresh_spectral(&mut self) {
        let store = &self.store;
        self.context_net.refresh_spectral(store);
        self.base_net.refresh_spectral(store);
        for l in &mut self.couplings {
            l.net.refresh_spectral(store);
        }
    }

    fn spectral_vectors(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = self.context_net.spectral_vectors().into_iter().map(|p| &p.u).collect();
        v.extend(self.base_net.spectral_vectors().into_iter().map(|p| &p.u));
        for l in &self.couplings {
            v.extend(l.net.spectral_vectors().into_iter().map(|p| &p.u));
        }
        v
    }

    fn spectral_vectors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = self
            .context_net
            .spectral_vectors_mut()
            .into_iter()
            .map(|p| &mut p.u)
            .collect();
        v.extend(self.base_net.spectral_vectors_mut().into_iter().map(|p| &mut p.u));
        for l in &mut self.couplings {
            v.extend(l.net.spectral_vectors_mut().into_iter().map(|p| &mut p.u));
        }
        v
    }

    /// Parameters plus power-iteration state, enough to reproduce the model.
    pub(crate) fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut t = checkpoint::store_tensors(&self.store);
        for (i, u) in self.spectral_vectors().into_iter().enumerate() {
            t.push((format!("spectral.{i}"), Tensor::column(u)));
        }
        t
    }

    pub(crate) fn restore(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        checkpoint::restore_store(&mut self.store, tensors)?;
        for (i, u) in self.spectral_vectors_mut().into_iter().enumerate() {
            let name = format!("spectral.{i}");
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if t.len() != u.len() {
                return Err(Error::Shape(format!("`{name}` has the wrong length")));
            }
            u.copy_from_slice(t.data());
        }
        Ok(())
    }

    fn prepare(
        &self,
        s: &[Vec<f64>],
        s_next: Option<&[Vec<f64>]>,
        h: &[f64],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        if s.len() != h.len() || s_next.is_some_and(|n| n.len() != s.len()) {
            return Err(Error::Shape("batch lengths differ".into()));
        }
        let mut s_std = Vec::with_capacity(s.len());
        let mut n_std = Vec::new();
        for (i, row) in s.iter().enumerate() {
            self.check_state(row, "s")?;
            s_std.push(self.standardizer.apply(row));
            if let Some(next) = s_next {
                self.check_state(&next[i], "s_next")?;
                n_std.push(self.standardizer.apply(&next[i]));
            }
        }
        let h = h.iter().map(|&v| self.check_h(v)).collect::<Result<Vec<_>>>()?;
        Ok((s_std, n_std, h))
    }

    /// Standardized-space log-densities for a batch of raw-space pairs.
    pub fn log_prob_standardized_batch(&self, s: &[Vec<f64>], s_next: &[Vec<f64>], h: &[f64]) -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let (s_std, n_std, h) = self.prepare(s, Some(s_next), h)?;
        let mut g = Graph::new();
        let ctx = g.constant(self.context_tensor(&s_std, &h));
        let x = g.constant(Tensor::from_rows(&n_std)?);
        let lp = self.log_density_tape(&mut g, x, ctx, Access::Frozen);
        Ok(g.value(lp).data().to_vec())
    }

    /// Raw-space log-densities for a batch.
    pub fn log_prob_batch(&self, s: &[Vec<f64>], s_next: &[Vec<f64>], h: &[f64]) -> Result<Vec<f64>> {
        let off = self.standardizer.log_scale();
        Ok(self
            .log_prob_standardized_batch(s, s_next, h)?
            .into_iter()
            .map(|v| v - off)
            .collect())
    }

    /// `log p(s_next | s, h)` in nats, in raw state coordinates.
    pub fn log_prob(&self, s_next: &[f64], s: &[f64], h: f64) -> Result<f64> {
        Ok(self.log_prob_batch(&[s.to_vec()], &[s_next.to_vec()], &[h])?[0])
    }

    /// `log p(s_next | s, h)` of the standardized states.
    pub fn log_prob_standardized(&self, s_next: &[f64], s: &[f64], h: f64) -> Result<f64> {
        Ok(self.log_prob_standardized_batch(&[s.to_vec()], &[s_next.to_vec()], &[h])?[0])
    }

    /// `n` draws from `p(· | s, h)`, each paired with its log-density
    /// computed along the sampling (inverse) path: base log-prob of the
    /// latent minus the inverse log-determinants, in raw coordinates.
    pub fn sample_with_log_prob(&self, s: &[f64], h: f64, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let (s_std, _, hs) = self.prepare(&[s.to_vec()], None, &[h])?;
        let d = self.dim;
        let mut g = Graph::new();
        let ctx_rows = vec![s_std[0].clone(); n];
        let ctx = g.constant(self.context_tensor(&ctx_rows, &vec![hs[0]; n]));
        let emb = self.embed(&mut g, ctx, Access::Frozen);
        let (mean, log_scale) = self.base_params(&mut g, emb, Access::Frozen);
        let (mean, log_scale) = (g.value(mean).clone(), g.value(log_scale).clone());

        let mut rng = seeding::rng(seed, seeding::streams::NOISE);
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut log_p: Vec<f64> = Vec::with_capacity(n);
        for r in 0..n {
            let mut z = Vec::with_capacity(d);
            let mut lp = 0.0;
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let ls = log_scale.get(r, j);
                z.push(mean.get(r, j) + ls.exp() * e);
                lp += -0.5 * e * e - ls - 0.5 * LN_2PI;
            }
            cur.push(z);
            log_p.push(lp);
        }

        let (cur, log_dets) = self.couple(&mut g, emb, cur, Direction::Inverse)?;
        for (lp, ld) in log_p.iter_mut().zip(log_dets) {
            *lp -= ld;
        }
        let off = self.standardizer.log_scale();
        Ok(cur
            .into_iter()
            .zip(log_p)
            .map(|(x, lp)| (self.standardizer.invert(&x), lp - off))
            .collect())
    }

    /// Pushes standardized rows through every coupling layer in the given
    /// direction, returning the transformed rows and the log-determinant of
    /// that direction's Jacobian for each row.
    fn couple(
        &self,
        g: &mut Graph,
        emb: Var,
        mut cur: Vec<Vec<f64>>,
        direction: Direction,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let p = raw_param_count(self.config.bins);
        let mut log_det = vec![0.0; cur.len()];
        let order: Vec<&Coupling> = match direction {
            Direction::Forward => self.couplings.iter().collect(),
            Direction::Inverse => self.couplings.iter().rev().collect(),
        };
        for layer in order {
            let x = g.constant(Tensor::from_rows(&cur)?);
            let inp = self.conditioner_input(g, layer, x, emb);
            let raw = layer.net.forward(g, &self.store, inp, Access::Frozen);
            let raw = g.value(raw).clone();
            for (r, row_vals) in cur.iter_mut().enumerate() {
                let row = raw.row(r);
                for (k, &j) in layer.transform.iter().enumerate() {
                    let knots =
                        SplineKnots::from_raw(&row[k * p..(k + 1) * p], self.config.bins, self.config.tail_bound);
                    let (v, ld) = match direction {
                        Direction::Forward => knots.forward(row_vals[j])?,
                        Direction::Inverse => knots.inverse(row_vals[j])?,
                    };
                    row_vals[j] = v;
                    log_det[r] += ld;
                }
            }
        }
        Ok((cur, log_det))
    }

    fn latent_pass(&self, s: &[f64], h: f64, rows: &[Vec<f64>], direction: Direction) -> Result<Vec<(Vec<f64>, f64)>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        for row in rows {
            self.check_state(row, "row")?;
        }
        let (s_std, _, hs) = self.prepare(&[s.to_vec()], None, &[h])?;
        let n = rows.len();
        let mut g = Graph::new();
        let ctx = g.constant(self.context_tensor(&vec![s_std[0].clone(); n], &vec![hs[0]; n]));
        let emb = self.embed(&mut g, ctx, Access::Frozen);
        let (out, ld) = self.couple(&mut g, emb, rows.to_vec(), direction)?;
        Ok(out.into_iter().zip(ld).collect())
    }

    /// Coupling stack applied to standardized next states: each row maps to
    /// its pre-base value with the forward log-determinant.
    pub fn to_latent(&self, s: &[f64], h: f64, x_std: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        self.latent_pass(s, h, x_std, Direction::Forward)
    }

    /// Inverse of [`Self::to_latent`]; the log-determinant is that of the
    /// inverse map.
    pub fn from_latent(&self, s: &[f64], h: f64, z: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        self.latent_pass(s, h, z, Direction::Inverse)
    }

    pub fn sample(&self, s: &[f64], h: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .sample_with_log_prob(s, h, n, seed)?
            .into_iter()
            .map(|(x, _)| x)
            .collect())
    }

    pub fn sidecar(&self) -> FlowSidecar {
        FlowSidecar {
            format_version: SIDECAR_VERSION,
            state_dim: self.dim,
            layers: self.config.layers,
            bins: self.config.bins,
            tail_bound: self.config.tail_bound,
            hidden: self.config.hidden.clone(),
            context_hidden: self.config.context_hidden,
            omega0: self.config.omega0,
            spectral_norm: self.config.spectral_norm,
            h_min: self.noise.h_min,
            h_max: self.noise.h_max,
            noise_family: self.noise.noise_family,
            mean: self.standardizer.mean.clone(),
            std: self.standardizer.std.clone(),
        }
    }

    /// Writes the tensor checkpoint to `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.snapshot())?;
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        for p in [path, side_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    what: "flow checkpoint".into(),
                    path: p.to_path_buf(),
                });
            }
        }
        let side: FlowSidecar = serde_json::from_slice(&std::fs::read(&side_path)?)?;
        if side.format_version != SIDECAR_VERSION {
            return Err(Error::Format(format!("flow sidecar version {}", side.format_version)));
        }
        let config = FlowConfig {
            layers: side.layers,
            bins: side.bins,
            tail_bound: side.tail_bound,
            hidden: side.hidden,
            context_hidden: side.context_hidden,
            omega0: side.omega0,
            spectral_norm: side.spectral_norm,
        };
        let noise = NoiseConfig {
            h_min: side.h_min,
            h_max: side.h_max,
            noise_family: side.noise_family,
        };
        let st = Standardizer {
            mean: side.mean,
            std: side.std,
        };
        let mut model = Self::new(side.state_dim, config, noise, st, 0)?;
        model.restore(&checkpoint::load(path)?)?;
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub format_version: u32,
    pub state_dim: usize,
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
    pub context_hidden: usize,
    pub omega0: f64,
    pub spectral_norm: bool,
    pub h_min: f64,
    pub h_max: f64,
    pub noise_family: NoiseFamily,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(dim: usize, seed: u64) -> ConditionalFlowModel {
        let mut m = ConditionalFlowModel::new(
            dim,
            FlowConfig::default(),
            NoiseConfig::default(),
            Standardizer {
                mean: vec![0.3; dim],
                std: vec![1.7; dim],
            },
            seed,
        )
        .unwrap();
        // perturb everything so no layer is the identity
        let mut rng = seeding::rng(seed, 99);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            for v in m.store.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn identity_model_at_the_mode() {
        let m = ConditionalFlowModel::identity(1, FlowConfig::default(), NoiseConfig::default()).unwrap();
        let lp = m.log_prob(&[0.0], &[0.4], 1.0).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-12, "lp={lp}");
    }

    #[test]
    fn identity_model_samples_are_standard_normal() {
        let m = ConditionalFlowModel::identity(2, FlowConfig::default(), NoiseConfig::default()).unwrap();
        let n = 4000;
        let xs = m.sample(&[0.0, 0.0], 0.0, n, 3).unwrap();
        for j in 0..2 {
            let mean: f64 = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_path_log_prob_matches_density_path() {
        for dim in [1, 2, 3] {
            let m = random_model(dim, dim as u64);
            let s = vec![0.5; dim];
            for h in [0.0, 2.0, 4.5] {
                for (x, lp_inv) in m.sample_with_log_prob(&s, h, 50, 1).unwrap() {
                    let lp = m.log_prob(&x, &s, h).unwrap();
                    assert!(lp.is_finite());
                    assert!((lp - lp_inv).abs() < 1e-10, "dim {dim} h {h}: {lp} vs {lp_inv}");
                }
            }
        }
    }

    #[test]
    fn out_of_range_h_is_clamped_and_counted() {
        let m = random_model(2, 5);
        let a = m.log_prob(&[0.1, 0.2], &[0.0, 0.0], 9.0).unwrap();
        let b = m.log_prob(&[0.1, 0.2], &[0.0, 0.0], 4.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.h_clamp_count(), 1);
        assert!(m.log_prob(&[0.1, 0.2], &[0.0, 0.0], f64::NAN).is_err());
        assert!(m.log_prob(&[0.1], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = random_model(2, 8);
        m.refresh_spectral();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.ckpt");
        m.save(&p).unwrap();
        let back = ConditionalFlowModel::load(&p).unwrap();
        let (s, sn) = ([0.2, -0.1], [0.25, -0.05]);
        assert_eq!(m.log_prob(&sn, &s, 1.3).unwrap(), back.log_prob(&sn, &s, 1.3).unwrap());
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side["bins"], 8);
        assert_eq!(side["noise_family"], "Normal");
        assert!(matches!(
            ConditionalFlowModel::load(&dir.path().join("missing.ckpt")),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let m = random_model(1, 2);
        for (s, h) in [(0.0, 0.0), (1.0, 4.5), (-2.0, 1.0)] {
            let (lo, hi, n) = (-20.0, 20.0, 8000);
            let dx = (hi - lo) / n as f64;
            let xs: Vec<Vec<f64>> = (0..=n).map(|i| vec![lo + i as f64 * dx]).collect();
            let ss = vec![vec![s]; xs.len()];
            let lp = m.log_prob_batch(&ss, &xs, &vec![h; xs.len()]).unwrap();
            // composite Simpson
            let mut acc = 0.0;
            for (i, v) in lp.iter().enumerate() {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * v.exp();
            }
            let integral = acc * dx / 3.0;
            assert!((integral - 1.0).abs() < 1e-3, "s={s} h={h}: {integral}");
        }
    }
}
