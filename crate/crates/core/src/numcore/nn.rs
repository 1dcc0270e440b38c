//! Dense layers and multilayer perceptrons built on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::spectral::{PowerIteration, SIGMA_FLOOR};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    /// `sin(omega * x)`
    Sine(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sine(w) => g.sin(x, w),
        }
    }
}

/// How a forward pass reads parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    /// Leaves receive gradients.
    Train,
    /// Parameters enter the graph as constants.
    Frozen,
}

/// `y = x·W + b` with `W` stored as `[in, out]`, optionally divided by its
/// spectral-norm estimate.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub spectral: Option<PowerIteration>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bound: f64,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[inputs, outputs], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng));
        let spectral = spectral.then(|| PowerIteration::new(inputs, rng));
        Self {
            weight,
            bias,
            inputs,
            outputs,
            spectral,
        }
    }

    /// One power-iteration step on the current weight (training mode).
    pub fn refresh_spectral(&mut self, store: &ParamStore) {
        if let Some(pi) = &mut self.spectral {
            pi.run(store.value(self.weight), 1);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, access: Access) -> Var {
        let (w, b) = match access {
            Access::Train => (g.param(store, self.weight), g.param(store, self.bias)),
            Access::Frozen => (g.frozen(store, self.weight), g.frozen(store, self.bias)),
        };
        let w = match &self.spectral {
            Some(pi) => {
                // σ = uᵀ W v with u, v held constant
                let wt = store.value(self.weight);
                let (sigma, v) = pi.estimate(wt);
                if sigma > SIGMA_FLOOR {
                    let vc = g.constant(Tensor::column(&v));
                    let uc = g.constant(Tensor::column(&pi.u));
                    let wv = g.matmul(w, vc);
                    let uwv = g.mul(uc, wv);
                    let s = g.sum(uwv);
                    g.div_scalar(w, s)
                } else {
                    w
                }
            }
            None => w,
        };
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Feed-forward network with a shared hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
}

/// Initialization and normalization choices for an [`Mlp`].
#[derive(Clone, Copy, Debug)]
pub struct MlpOptions {
    pub hidden: Activation,
    /// Spectrally normalize the hidden (non-output) layers.
    pub spectral_hidden: bool,
    /// Multiplier on the output layer's initialization bound.
    pub output_scale: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        opts: MlpOptions,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let fan_in = sizes[i] as f64;
                let is_out = i + 1 == n;
                let bound = match opts.hidden {
                    Activation::Sine(w0) if !is_out => {
                        if i == 0 {
                            1.0 / fan_in
                        } else {
                            (6.0 / fan_in).sqrt() / w0
                        }
                    }
                    _ => 1.0 / fan_in.sqrt(),
                };
                let bound = if is_out { bound * opts.output_scale } else { bound };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    sizes[i],
                    sizes[i + 1],
                    bound,
                    opts.spectral_hidden && !is_out,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            hidden: opts.hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, access: Access) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, access);
            if i + 1 < n {
                h = self.hidden.apply(g, h);
            }
        }
        h
    }

    pub fn refresh_spectral(&mut self, store: &ParamStore) {
        for l in &mut self.layers {
            l.refresh_spectral(store);
        }
    }

    /// Zeroes the output layer so the network initially emits zeros.
    pub fn zero_output(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            store.value_mut(last.weight).data_mut().fill(0.0);
            store.value_mut(last.bias).data_mut().fill(0.0);
        }
    }

    /// Power-iteration vectors, in layer order (spectral layers only).
    pub fn spectral_vectors(&self) -> Vec<&PowerIteration> {
        self.layers.iter().filter_map(|l| l.spectral.as_ref()).collect()
    }

    pub fn spectral_vectors_mut(&mut self) -> Vec<&mut PowerIteration> {
        self.layers.iter_mut().filter_map(|l| l.spectral.as_mut()).collect()
    }
}
