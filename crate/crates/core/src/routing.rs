//! Text-adaptive routing: an MLP maps the "how" feature to per-layer block
//! logits and per-block normalization parameters; a Gumbel-softmax over the
//! logits mixes `m` convolution blocks in each of `l` layers.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, norm, Bound, ParamStore};
use crate::tensor::{concat, conv2d, Float, Var};

const GUMBEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub layers: usize,
    pub blocks: usize,
    /// Feature channels; one (β, γ) pair per channel per block.
    pub channels: usize,
    pub tau: f64,
    pub hard_eval: bool,
    /// When false, β and γ are free parameters shared by every instruction.
    pub text_adaptive: bool,
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.blocks == 0 || self.channels == 0 {
            return Err(Error::Config("routing needs at least one layer, block and channel".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    fn logit_count(&self) -> usize {
        self.layers * self.blocks
    }

    fn norm_count(&self) -> usize {
        self.layers * self.blocks * self.channels
    }

    /// Width of the generator MLP's output layer.
    pub fn mlp_outputs(&self) -> usize {
        if self.text_adaptive {
            self.logit_count() + 2 * self.norm_count()
        } else {
            self.logit_count()
        }
    }
}

/// Standard Gumbel noise, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.iter().map(|e| e / total).collect()
}

/// Block weights for one layer. With an rng, Gumbel noise is added before
/// the tempered softmax; without one the softmax is deterministic, or a
/// one-hot argmax when `hard` is set.
pub fn gumbel_sample(pi_logits: &[f64], tau: f64, rng: Option<&mut dyn RngCore>, hard: bool) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    match rng {
        Some(rng) => {
            let noisy: Vec<f64> = pi_logits.iter().map(|l| (l + gumbel_noise(rng)) / tau).collect();
            Ok(softmax(&noisy))
        }
        None if hard => {
            let mut one_hot = vec![0.0; pi_logits.len()];
            one_hot[argmax(pi_logits)] = 1.0;
            Ok(one_hot)
        }
        None => Ok(softmax(&pi_logits.iter().map(|l| l / tau).collect::<Vec<_>>())),
    }
}

/// Graph version of [`gumbel_sample`] over the last axis of `logits`.
pub fn route_weights<'t, T: Float>(
    logits: Var<'t, T>,
    tau: f64,
    rng: Option<&mut dyn RngCore>,
    hard: bool,
) -> Var<'t, T> {
    let tape = logits.tape();
    match rng {
        Some(rng) => {
            let noise = ArrayD::from_shape_simple_fn(IxDyn(&logits.shape()), || T::of(gumbel_noise(rng)));
            logits.add(tape.constant(noise)).scale(1.0 / tau).softmax()
        }
        None if hard => {
            let values = logits.value();
            let last = values.ndim() - 1;
            let mut one_hot = ArrayD::zeros(values.raw_dim());
            for (lane, mut out) in values.lanes(Axis(last)).into_iter().zip(one_hot.lanes_mut(Axis(last))) {
                let lane: Vec<f64> = lane.iter().map(|v| v.as_f64()).collect();
                out[argmax(&lane)] = T::one();
            }
            tape.constant(one_hot)
        }
        None => logits.scale(1.0 / tau).softmax(),
    }
}

/// `routing.mlp1 [d, 2d]`, `routing.mlp2 [2d, outputs]` (zero-initialized),
/// `routing.layer{i}.block{j}.{kernel,bias}`, and the latent
/// `routing.latent.{beta,gamma} [l, m, C]` when routing is not text-adaptive.
pub fn init_routing<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &RoutingConfig, text_width: usize) {
    init_linear(store, rng, "routing.mlp1", text_width, 2 * text_width, false);
    init_linear(store, rng, "routing.mlp2", 2 * text_width, cfg.mlp_outputs(), true);
    for i in 0..cfg.layers {
        for j in 0..cfg.blocks {
            init_conv(store, rng, &format!("routing.layer{i}.block{j}"), cfg.channels, cfg.channels, 3);
        }
    }
    if !cfg.text_adaptive {
        let shape = [cfg.layers, cfg.blocks, cfg.channels];
        store.insert("routing.latent.beta", ArrayD::zeros(IxDyn(&shape)));
        store.insert("routing.latent.gamma", ArrayD::ones(IxDyn(&shape)));
    }
}

/// Graph form of the generated operator for a batch.
pub struct RouteVars<'t, T: Float> {
    /// `[batch, l, m]`, pre-noise.
    pub logits: Var<'t, T>,
    /// `[batch, l, m]`, rows sum to one.
    pub alpha: Var<'t, T>,
    /// `[batch or 1, l, m, C]`.
    pub beta: Var<'t, T>,
    pub gamma: Var<'t, T>,
}

pub fn generate_route_params<'t, T: Float>(
    p: &Bound<'t, T>,
    phi_how: Var<'t, T>,
    cfg: &RoutingConfig,
    rng: Option<&mut dyn RngCore>,
) -> RouteVars<'t, T> {
    let batch = phi_how.shape()[0];
    let (l, m, c) = (cfg.layers, cfg.blocks, cfg.channels);
    let hidden = crate::nn::linear(p, "routing.mlp1", phi_how).relu();
    let out = crate::nn::linear(p, "routing.mlp2", hidden);
    let logits = out.slice_axis(1, 0..l * m).reshape(&[batch, l, m]);
    let (beta, gamma) = if cfg.text_adaptive {
        let n = cfg.norm_count();
        let beta = out.slice_axis(1, l * m..l * m + n).reshape(&[batch, l, m, c]);
        let gamma = out
            .slice_axis(1, l * m + n..l * m + 2 * n)
            .reshape(&[batch, l, m, c])
            .add_scalar(1.0);
        (beta, gamma)
    } else {
        (
            p.get("routing.latent.beta").reshape(&[1, l, m, c]),
            p.get("routing.latent.gamma").reshape(&[1, l, m, c]),
        )
    };
    let alpha = route_weights(logits, cfg.tau, rng, cfg.hard_eval);
    RouteVars {
        logits,
        alpha,
        beta,
        gamma,
    }
}

/// Runs the routed layers on `phi_x: [batch, C, H, W]`. Each layer computes
/// every block's convolution, instance-normalizes it, modulates it with that
/// block's (γ, β), and sums the blocks weighted by α. A ReLU separates layers.
pub fn apply_route<'t, T: Float>(
    p: &Bound<'t, T>,
    phi_x: Var<'t, T>,
    route: &RouteVars<'t, T>,
    cfg: &RoutingConfig,
) -> Result<Var<'t, T>> {
    let shape = phi_x.shape();
    let [batch, c, h, w] = shape[..] else {
        return Err(Error::Shape(format!("routed input must be [batch, C, H, W], got {shape:?}")));
    };
    let (l, m) = (cfg.layers, cfg.blocks);
    if c != cfg.channels {
        return Err(Error::Shape(format!("routing expects {} channels, got {c}", cfg.channels)));
    }
    if route.alpha.shape() != [batch, l, m] {
        return Err(Error::Shape(format!(
            "alpha has shape {:?}, expected {:?}",
            route.alpha.shape(),
            [batch, l, m]
        )));
    }
    let norm_batch = route.beta.shape()[0];
    if norm_batch != batch && norm_batch != 1 {
        return Err(Error::Shape(format!("normalization parameters for {norm_batch} samples, batch is {batch}")));
    }
    let mut a = phi_x;
    for i in 0..l {
        let kernels: Vec<_> = (0..m).map(|j| p.get(&format!("routing.layer{i}.block{j}.kernel"))).collect();
        let biases: Vec<_> = (0..m).map(|j| p.get(&format!("routing.layer{i}.block{j}.bias"))).collect();
        let blocks = norm(conv2d(a, concat(&kernels, 0), Some(concat(&biases, 0)), 1, 1));
        let layer_norm = |v: Var<'t, T>| v.slice_axis(1, i..i + 1).reshape(&[norm_batch, m * c, 1, 1]);
        let modulated = blocks
            .mul(layer_norm(route.gamma))
            .add(layer_norm(route.beta))
            .reshape(&[batch, m, c, h, w]);
        let weights = route.alpha.slice_axis(1, i..i + 1).reshape(&[batch, m, 1, 1, 1]);
        a = modulated.mul(weights).sum_axis(1);
        if i + 1 < l {
            a = a.relu();
        }
    }
    Ok(a)
}

/// Plain per-instruction operator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteParams {
    pub alpha: Array2<f32>,
    pub beta: Array3<f32>,
    pub gamma: Array3<f32>,
    pub pi_logits: Array2<f32>,
}

impl RouteParams {
    pub(crate) fn from_row<T: Float>(route: &RouteVars<'_, T>, row: usize) -> Self {
        fn take<T: Float>(v: &ArrayD<T>, row: usize) -> ArrayD<f32> {
            let row = if v.shape()[0] == 1 { 0 } else { row };
            v.index_axis(Axis(0), row).mapv(|x| x.as_f64() as f32)
        }
        let two = |v: Var<'_, T>| take(&v.value(), row).into_dimensionality::<Ix2>().expect("[l, m]");
        let three = |v: Var<'_, T>| take(&v.value(), row).into_dimensionality::<Ix3>().expect("[l, m, C]");
        RouteParams {
            alpha: two(route.alpha),
            beta: three(route.beta),
            gamma: three(route.gamma),
            pi_logits: two(route.logits),
        }
    }
}

/// One row of the routing export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub instruction_id: String,
    pub op: String,
    pub layer: usize,
    pub block: usize,
    pub alpha: f32,
    pub pi_logit: f32,
}

pub fn route_records(instruction_id: &str, op: &str, params: &RouteParams) -> Vec<RouteRecord> {
    params
        .alpha
        .indexed_iter()
        .map(|((layer, block), &alpha)| RouteRecord {
            instruction_id: instruction_id.to_string(),
            op: op.to_string(),
            layer,
            block,
            alpha,
            pi_logit: params.pi_logits[[layer, block]],
        })
        .collect()
}

pub fn write_routes_csv(path: &Path, records: &[RouteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
