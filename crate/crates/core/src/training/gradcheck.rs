//! Central finite differences against the tape's analytic gradients.
//!
//! Every check runs in `f64` on a seeded tiny instance. The scalar probed is
//! `sum(R ⊙ out)` for a fixed random `R`, so every output element contributes
//! with a distinct weight. Inputs that the component differentiates through
//! (features, masks, route parameters) are registered as extra `input.*`
//! parameters.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::editor::{
    decode, discriminate, fuse, generator_forward, init_params, is_discriminator_param, is_encoder_param, predict_mask,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, uniform, Bound, ParamStore};
use crate::routing::{apply_route, init_routing, route_weights, RouteVars, RoutingConfig};
use crate::tensor::{Tape, Var};
use crate::text::{encode_tokens, init_text, TextDims, Tokens};

/// Differentiable pieces that can be checked in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Linear,
    AttentionPool,
    ApplyRoute,
    PredictMask,
    FuseDecode,
    Discriminate,
    /// Text encoder, mask, routing, fusion and decoder together, no noise.
    Pipeline,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Linear,
        Component::AttentionPool,
        Component::ApplyRoute,
        Component::PredictMask,
        Component::FuseDecode,
        Component::Discriminate,
        Component::Pipeline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Linear => "linear",
            Component::AttentionPool => "attention_pool",
            Component::ApplyRoute => "apply_route",
            Component::PredictMask => "predict_mask",
            Component::FuseDecode => "fuse_decode",
            Component::Discriminate => "discriminate",
            Component::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient-check component {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub component: Component,
    pub tolerance: f64,
    pub step: f64,
    /// Entries probed per tensor; smaller tensors are probed exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Scales the analytic gradient of one tensor by `1 + factor` before
    /// comparing, to confirm the harness notices a wrong gradient.
    pub corrupt: Option<(String, f64)>,
}

impl GradCheckOptions {
    pub fn new(component: Component, tolerance: f64) -> Self {
        GradCheckOptions {
            component,
            tolerance,
            step: 1e-5,
            samples_per_tensor: 16,
            seed: 7,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub component: Component,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub entries_checked: usize,
    pub parameters: Vec<String>,
}

/// Gradients smaller than this fraction of the probed loss (at least 1) are
/// compared in absolute terms. Finite differences of a loss `L` carry
/// rounding noise near `ε·|L|/h`, which would otherwise dominate the ratio
/// for gradients that are zero analytically, such as biases ahead of an
/// instance norm.
const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gradient_check(component: Component, tolerance: f64) -> Result<f64> {
    gradient_check_with(&GradCheckOptions::new(component, tolerance)).map(|r| r.max_rel_error)
}

type ForwardFn = Box<dyn for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>>;

struct Problem {
    params: ParamStore<f64>,
    /// Parameters the check differentiates with respect to.
    checked: Vec<String>,
    forward: ForwardFn,
}

impl Problem {
    fn loss(&self, params: &ParamStore<f64>, weights: &ArrayD<f64>) -> Result<f64> {
        let tape = Tape::new();
        let p = params.frozen(&tape);
        let out = (self.forward)(&p)?;
        Ok(out.mul(tape.constant(weights.clone())).sum().item())
    }
}

pub fn gradient_check_with(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let problem = build(opts.component, &mut rng)?;

    let tape = Tape::new();
    let p = problem
        .params
        .bind(&tape, |n| problem.checked.iter().any(|c| c == n));
    let out = (problem.forward)(&p)?;
    let weights = uniform::<f64, _>(&out.shape(), 1.0, &mut rng);
    let loss = out.mul(tape.constant(weights.clone())).sum();
    let floor = MAGNITUDE_FLOOR * loss.item().abs().max(1.0);
    let mut grads = tape.backward(loss);
    let mut analytic = p.gradients(&mut grads);
    if let Some((name, factor)) = &opts.corrupt {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("cannot corrupt unknown parameter {name:?}")))?;
        g.mapv_inplace(|v| v * (1.0 + factor));
    }

    let mut work = problem.params.clone();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for name in &problem.checked {
        let len = problem.params.get(name).expect("checked names exist").len();
        let zeros = ArrayD::zeros(problem.params.get(name).unwrap().raw_dim());
        let grad = analytic.get(name).unwrap_or(&zeros);
        let indices: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for i in indices {
            let original = problem.params.get(name).unwrap().as_slice().expect("standard layout")[i];
            let mut probe = |v: f64| -> Result<f64> {
                work.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = v;
                problem.loss(&work, &weights)
            };
            let plus = probe(original + opts.step)?;
            let minus = probe(original - opts.step)?;
            probe(original)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_slice().expect("standard layout")[i];
            let err = relative_error(a, numeric, floor);
            count += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }
    log::debug!("gradient check {}: max relative error {:.3e} at {}", opts.component, worst.0, worst.1);
    if worst.0 > opts.tolerance {
        return Err(Error::ToleranceExceeded {
            parameter: worst.1,
            error: worst.0,
            tolerance: opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        component: opts.component,
        max_rel_error: worst.0,
        worst_parameter: worst.1,
        entries_checked: count,
        parameters: problem.checked,
    })
}

fn random(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, bound, rng)
}

/// Replaces zero-initialized tensors and nudges the rest so no gradient
/// vanishes because of the initialization.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, value) in store.iter_mut() {
        let noise = random(value.shape(), 0.3, rng);
        *value += &noise;
    }
}

fn names_with(store: &ParamStore<f64>, keep: impl Fn(&str) -> bool) -> Vec<String> {
    store.names().filter(|n| keep(n)).map(str::to_string).collect()
}

fn build(component: Component, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut params = ParamStore::new();
    let problem = match component {
        Component::Linear => {
            init_linear(&mut params, rng, "probe", 4, 3, false);
            params.insert("input.x", random(&[2, 4], 1.0, rng));
            Problem {
                checked: names_with(&params, |_| true),
                params,
                forward: Box::new(|p| Ok(linear(p, "probe", p.get("input.x")))),
            }
        }
        Component::AttentionPool => {
            let dims = TextDims {
                vocab: 6,
                max_len: 3,
                embed: 4,
                attend: 4,
            };
            init_text(&mut params, rng, dims);
            let batch = vec![
                Tokens { ids: vec![2, 5, 3], len: 3 },
                Tokens { ids: vec![4, 2, 0], len: 2 },
            ];
            Problem {
                checked: names_with(&params, |_| true),
                params,
                forward: Box::new(move |p| {
                    let t = encode_tokens(p, &batch, true)?;
                    Ok(crate::tensor::concat(&[t.phi_where, t.phi_how], 1))
                }),
            }
        }
        Component::ApplyRoute => {
            let cfg = RoutingConfig {
                layers: 2,
                blocks: 2,
                channels: 2,
                tau: 1.0,
                hard_eval: false,
                text_adaptive: true,
            };
            init_routing(&mut params, rng, &cfg, 4);
            params.insert("input.phi_x", random(&[2, 2, 3, 3], 1.0, rng));
            params.insert("input.pi_logits", random(&[2, 2, 2], 1.0, rng));
            params.insert("input.beta", random(&[2, 2, 2, 2], 0.5, rng));
            params.insert("input.gamma", random(&[2, 2, 2, 2], 0.5, rng).mapv(|v| v + 1.0));
            Problem {
                checked: names_with(&params, |n| n.starts_with("routing.layer") || n.starts_with("input.")),
                params,
                forward: Box::new(move |p| {
                    let logits = p.get("input.pi_logits");
                    let route = RouteVars {
                        logits,
                        alpha: route_weights(logits, cfg.tau, None, false),
                        beta: p.get("input.beta"),
                        gamma: p.get("input.gamma"),
                    };
                    apply_route(p, p.get("input.phi_x"), &route, &cfg)
                }),
            }
        }
        Component::PredictMask | Component::FuseDecode | Component::Discriminate | Component::Pipeline => {
            let cfg = ModelConfig::tiny();
            params = init_params(&cfg, 8, rng);
            jitter(&mut params, rng);
            let (c, s) = (cfg.channels, cfg.feature_size());
            let image = cfg.image_size;
            match component {
                Component::PredictMask => {
                    params.insert("input.phi_x", random(&[2, c, s, s], 1.0, rng));
                    params.insert("input.phi_where", random(&[2, cfg.attend_dim], 1.0, rng));
                    Problem {
                        checked: names_with(&params, |n| n.starts_with("mask.") || n.starts_with("input.")),
                        params,
                        forward: Box::new(|p| Ok(predict_mask(p, p.get("input.phi_x"), p.get("input.phi_where")))),
                    }
                }
                Component::FuseDecode => {
                    params.insert("input.phi_x", random(&[2, c, s, s], 1.0, rng));
                    params.insert("input.phi_edit", random(&[2, c, s, s], 1.0, rng));
                    params.insert("input.mask", random(&[2, 1, s, s], 0.5, rng).mapv(|v| v + 0.5));
                    Problem {
                        checked: names_with(&params, |n| n.starts_with("decoder.") || n.starts_with("input.")),
                        params,
                        forward: Box::new(|p| {
                            let fused = fuse(p.get("input.phi_x"), p.get("input.mask"), p.get("input.phi_edit"));
                            Ok(decode(p, fused))
                        }),
                    }
                }
                Component::Discriminate => {
                    params.insert("input.image", random(&[2, 3, image, image], 0.5, rng).mapv(|v| v + 0.5));
                    Problem {
                        checked: names_with(&params, |n| is_discriminator_param(n) || n.starts_with("input.")),
                        params,
                        forward: Box::new(|p| Ok(discriminate(p, p.get("input.image")))),
                    }
                }
                _ => {
                    let x = random(&[2, 3, image, image], 0.5, rng).mapv(|v| v + 0.5);
                    let batch = vec![
                        Tokens { ids: vec![2, 5, 3, 7, 0, 0, 0, 0, 0, 0, 0, 0], len: 4 },
                        Tokens { ids: vec![6, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], len: 2 },
                    ];
                    Problem {
                        checked: names_with(&params, |n| !is_encoder_param(n) && !is_discriminator_param(n)),
                        params,
                        forward: Box::new(move |p| {
                            let fwd = generator_forward(p, &cfg, p.tape().constant(x.clone()), &batch, None)?;
                            let mask = fwd.mask.reshape(&[2, s * s]);
                            let out = fwd.output.reshape(&[2, 3 * image * image]);
                            Ok(crate::tensor::concat(&[out, mask], 1))
                        }),
                    }
                }
            }
        }
    };
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_essentially_exact() {
        assert!(gradient_check(Component::Linear, 1e-8).unwrap() < 1e-8);
    }

    #[test]
    fn components_match_finite_differences() {
        for c in [
            Component::AttentionPool,
            Component::ApplyRoute,
            Component::PredictMask,
            Component::FuseDecode,
            Component::Discriminate,
            Component::Pipeline,
        ] {
            let report = gradient_check_with(&GradCheckOptions::new(c, 1e-4)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{c}: {report:?}");
            assert!(report.entries_checked > 20);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut opts = GradCheckOptions::new(Component::ApplyRoute, 1e-4);
        opts.corrupt = Some(("routing.layer0.block1.kernel".into(), 0.1));
        match gradient_check_with(&opts) {
            Err(Error::ToleranceExceeded { parameter, error, .. }) => {
                assert!(parameter.starts_with("routing.layer0.block1.kernel"));
                assert!(error > 0.05);
            }
            other => panic!("expected ToleranceExceeded, got {other:?}"),
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!(relative_error(1e-12, 2e-12, 1e-6) < 1e-5);
        assert!("fuse_decode".parse::<Component>().is_ok());
        assert!("nope".parse::<Component>().is_err());
    }
}
