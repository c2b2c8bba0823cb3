//! Autoencoder pretraining, mask supervision, the generator/discriminator
//! losses, and the alternating adversarial training loop.

mod gradcheck;

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradient_check, gradient_check_with, Component, GradCheckOptions, GradCheckReport};

use crate::checkpoint;
use crate::editor::{
    decode, discriminate, encode, generator_forward, is_autoencoder_param, is_discriminator_param, is_encoder_param,
    is_generator_param, stack_images, Forward, Model, ModelConfig,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scenegen::{EditSample, Image};
use crate::tensor::{Float, Tape, Var};
use crate::text::Tokens;

/// Rng stream ids; every source of randomness draws from its own stream of
/// the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_GUMBEL: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed used to initialize parameters for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    stream(seed, STREAM_INIT).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_img: f64,
    pub lambda_attn: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gan: 1.0,
            lambda_img: 10.0,
            lambda_attn: 10.0,
            lambda_feat: 10.0,
        }
    }
}

/// Training hyperparameters. Serialized as one flat JSON object that also
/// carries the model configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the text encoder (`text.*` parameters).
    pub text_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_max_steps: Option<u64>,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub use_feat_loss: bool,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: None,
            batch_size: 16,
            lr: 0.002,
            text_lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 20,
            max_steps: None,
            pretrain_batch_size: 8,
            pretrain_lr: 0.002,
            pretrain_epochs: 10,
            pretrain_max_steps: None,
            weights: LossWeights::default(),
            use_feat_loss: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a flat JSON object. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json("training config", e))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(map) = &value else {
            return Err(Error::Config("training config must be a JSON object".into()));
        };
        let known = serde_json::to_value(TrainConfig::default()).expect("config serializes");
        let known = known.as_object().expect("object");
        if let Some(key) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown training config key {key:?}")));
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::json("training config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pretrain_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        for (name, lr) in [("lr", self.lr), ("text_lr", self.text_lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        let w = &self.weights;
        if [w.lambda_gan, w.lambda_img, w.lambda_attn, w.lambda_feat]
            .iter()
            .any(|&l| !(l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.model.validate()
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required for reproducible runs".into()))
    }
}

/// Scalar losses of one step, or averages over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1_img: f64,
    pub l1_attn: f64,
    pub l1_feat: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.d_loss, self.g_adv, self.l1_img, self.l1_attn, self.l1_feat, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            d_loss: sum(|l| l.d_loss),
            g_adv: sum(|l| l.g_adv),
            l1_img: sum(|l| l.l1_img),
            l1_attn: sum(|l| l.l1_attn),
            l1_feat: sum(|l| l.l1_feat),
            total_g: sum(|l| l.total_g),
        }
    }
}

/// Mask target from one pair of feature maps `[C, H, W]`: the channel mean
/// of `|φ_y - φ_x|`, divided by its maximum, or all zeros when the maps agree.
pub fn derive_true_mask<T: Float>(phi_x: &Array3<T>, phi_y: &Array3<T>) -> Result<Array3<T>> {
    if phi_x.dim() != phi_y.dim() {
        return Err(Error::Shape(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            phi_x.shape(),
            phi_y.shape()
        )));
    }
    let diff = (phi_y - phi_x).mapv(|v| v.abs());
    let mean = diff.mean_axis(Axis(0)).expect("at least one channel");
    let max = mean.iter().fold(T::zero(), |m, &v| m.max(v));
    let mask = if max > T::zero() {
        mean.mapv(|v| v / max)
    } else {
        Array2::zeros(mean.raw_dim())
    };
    Ok(mask.insert_axis(Axis(0)))
}

/// Batched [`derive_true_mask`] over `[batch, C, H, W]`.
pub fn derive_true_masks<T: Float>(phi_x: &ArrayD<T>, phi_y: &ArrayD<T>) -> Result<ArrayD<T>> {
    if phi_x.ndim() != 4 || phi_x.shape() != phi_y.shape() {
        return Err(Error::Shape(format!(
            "expected two equal [batch, C, H, W] maps, got {:?} and {:?}",
            phi_x.shape(),
            phi_y.shape()
        )));
    }
    let masks: Vec<ArrayD<T>> = phi_x
        .outer_iter()
        .zip(phi_y.outer_iter())
        .map(|(a, b)| {
            let a = a.into_dimensionality::<Ix3>().expect("3-D").to_owned();
            let b = b.into_dimensionality::<Ix3>().expect("3-D").to_owned();
            derive_true_mask(&a, &b).map(|m| m.insert_axis(Axis(0)).into_dyn())
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal mask shapes"))
}

/// `½·mean((D(real) - 1)²) + ½·mean(D(fake)²)`.
pub fn discriminator_loss<'t, T: Float>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    real.add_scalar(-1.0).square().mean().scale(0.5).add(fake.square().mean().scale(0.5))
}

/// `½·mean((D(fake) - 1)²)`.
pub fn generator_adversarial_loss<'t, T: Float>(fake: Var<'t, T>) -> Var<'t, T> {
    fake.add_scalar(-1.0).square().mean().scale(0.5)
}

/// Least-squares GAN losses `(d_loss, g_adv)` from discriminator scores.
pub fn lsgan_losses(real: &ArrayD<f64>, fake: &ArrayD<f64>) -> Result<(f64, f64)> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "score maps differ in shape: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let tape = Tape::new();
    let (r, f) = (tape.constant(real.clone()), tape.constant(fake.clone()));
    Ok((discriminator_loss(r, f).item(), generator_adversarial_loss(f).item()))
}

/// Generator-side loss terms of one forward pass.
pub struct GeneratorLosses<'t, T: Float> {
    pub g_adv: Var<'t, T>,
    pub l1_img: Var<'t, T>,
    pub l1_attn: Var<'t, T>,
    pub l1_feat: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// Weighted generator objective. `phi_y` and `true_mask` are targets and
/// should carry no gradient.
pub fn generator_losses<'t, T: Float>(
    fwd: &Forward<'t, T>,
    y: Var<'t, T>,
    phi_y: Var<'t, T>,
    true_mask: Var<'t, T>,
    d_fake: Var<'t, T>,
    weights: &LossWeights,
    use_feat_loss: bool,
) -> GeneratorLosses<'t, T> {
    let g_adv = generator_adversarial_loss(d_fake);
    let l1_img = fwd.output.sub(y).abs().mean();
    let l1_attn = fwd.mask.sub(true_mask).abs().mean();
    let l1_feat = fwd.phi_fused.sub(phi_y).abs().mean();
    let mut total = g_adv
        .scale(weights.lambda_gan)
        .add(l1_img.scale(weights.lambda_img))
        .add(l1_attn.scale(weights.lambda_attn));
    if use_feat_loss {
        total = total.add(l1_feat.scale(weights.lambda_feat));
    }
    GeneratorLosses {
        g_adv,
        l1_img,
        l1_attn,
        l1_feat,
        total,
    }
}

fn tokens_for<T: Float>(model: &Model<T>, batch: &[&EditSample]) -> Vec<Tokens> {
    batch.iter().map(|s| model.tokenize(&s.instruction.text())).collect()
}

/// Evaluates every loss term on a batch without updating anything.
pub fn compute_losses<T: Float>(
    model: &Model<T>,
    batch: &[&EditSample],
    weights: &LossWeights,
    use_feat_loss: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let tape = Tape::new();
    let p = model.params.frozen(&tape);
    let xs: Vec<&Image> = batch.iter().map(|s| &s.x).collect();
    let ys: Vec<&Image> = batch.iter().map(|s| &s.y).collect();
    let y = tape.constant(stack_images(&ys));
    let fwd = generator_forward(&p, &model.config, tape.constant(stack_images(&xs)), &tokens_for(model, batch), rng)?;
    let phi_y = encode(&p, y);
    let true_mask = tape.constant(derive_true_masks(&fwd.phi_x.value(), &phi_y.value())?);
    let d_fake = discriminate(&p, fwd.output);
    let d_loss = discriminator_loss(discriminate(&p, y), d_fake);
    let g = generator_losses(&fwd, y, phi_y, true_mask, d_fake, weights, use_feat_loss);
    Ok(LossBreakdown {
        d_loss: d_loss.item().as_f64(),
        g_adv: g.g_adv.item().as_f64(),
        l1_img: g.l1_img.item().as_f64(),
        l1_attn: g.l1_attn.item().as_f64(),
        l1_feat: g.l1_feat.item().as_f64(),
        total_g: g.total.item().as_f64(),
    })
}

fn check_finite(step: u64, detail: impl FnOnce() -> String, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, detail: detail() })
    }
}

#[derive(Serialize)]
struct PretrainRow {
    step: u64,
    loss: f64,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    d_loss: f64,
    g_adv: f64,
    l1_img: f64,
    l1_attn: f64,
    l1_feat: f64,
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct PretrainOutcome {
    pub model: Model<f32>,
    /// Mean absolute reconstruction error at every step.
    pub losses: Vec<f64>,
}

/// Distinct images among the inputs and targets of `samples`.
pub fn unique_images(samples: &[EditSample]) -> Vec<&Image> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for img in samples.iter().flat_map(|s| [&s.x, &s.y]) {
        let key: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
        if seen.insert(key) {
            out.push(img);
        }
    }
    out
}

/// Trains encoder and decoder to reconstruct `images`. When `out` is given,
/// writes the checkpoint and `pretrain_loss.csv` there.
pub fn pretrain_autoencoder(images: &[&Image], cfg: &TrainConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("no images to pretrain on".into()));
    }
    let seed = cfg.seed()?;
    let mut model = Model::<f32>::new(cfg.model.clone(), init_seed(seed))?;
    let mut order_rng = stream(seed, STREAM_ORDER);
    let mut opt = Adam::new(cfg.pretrain_lr, cfg.beta1, cfg.beta2);
    let mut losses = Vec::new();
    let limit = cfg.pretrain_max_steps.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..images.len()).collect();
    'epochs: for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.pretrain_batch_size) {
            if opt.steps() >= limit {
                break 'epochs;
            }
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let tape = Tape::new();
            let p = model.params.bind_subset(&tape, is_autoencoder_param, is_autoencoder_param);
            let x = tape.constant(stack_images(&batch));
            let loss = decode(&p, encode(&p, x)).sub(x).abs().mean();
            let value = loss.item() as f64;
            check_finite(opt.steps(), || format!("reconstruction loss {value}"), value.is_finite())?;
            let mut grads = tape.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(&mut model.params, &grads);
            losses.push(value);
        }
        log::info!(
            "pretrain epoch {epoch}: loss {:.5}",
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "stage": "pretrain",
            "seed": seed,
            "steps": opt.steps(),
            "frozen": ["encoder"],
        });
        checkpoint::save(&model, dir, meta)?;
        let rows: Vec<PretrainRow> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| PretrainRow { step: i as u64 + 1, loss })
            .collect();
        write_csv(&dir.join("pretrain_loss.csv"), &rows)?;
    }
    Ok(PretrainOutcome { model, losses })
}

/// Copies encoder and decoder parameters from a pretrained model.
pub fn adopt_autoencoder(model: &mut Model<f32>, pretrained: &Model<f32>) -> Result<()> {
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| is_autoencoder_param(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let source = pretrained
            .params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained model lacks {name}")))?;
        let target = model.params.get_mut(&name).expect("listed above");
        if source.shape() != target.shape() {
            return Err(Error::Checkpoint(format!(
                "pretrained {name} has shape {:?}, expected {:?}",
                source.shape(),
                target.shape()
            )));
        }
        target.assign(source);
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Losses at every step.
    pub steps: Vec<LossBreakdown>,
    /// Per-epoch averages, as written to `metrics.csv`.
    pub epochs: Vec<LossBreakdown>,
}

/// End-to-end adversarial training on top of a pretrained autoencoder. The
/// encoder never changes. When `out` is given, the final checkpoint and
/// `metrics.csv` are written there.
pub fn train(samples: &[EditSample], cfg: &TrainConfig, pretrained: &Model<f32>, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let seed = cfg.seed()?;
    let mut model = Model::<f32>::new(cfg.model.clone(), init_seed(seed))?;
    adopt_autoencoder(&mut model, pretrained)?;
    let mut order_rng = stream(seed, STREAM_ORDER);
    let mut gumbel_rng = stream(seed, STREAM_GUMBEL);
    let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2).with_prefix_lr("text.", cfg.text_lr);
    let mut opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0u64;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            if step >= limit {
                break;
            }
            let batch: Vec<&EditSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let losses = train_step(&mut model, &batch, cfg, &mut opt_g, &mut opt_d, &mut gumbel_rng, step)?;
            steps.push(losses);
            step += 1;
        }
        if steps.len() > first {
            let mean = LossBreakdown::mean(&steps[first..]);
            log::info!(
                "epoch {epoch}: d {:.4} g_adv {:.4} img {:.4} attn {:.4} feat {:.4}",
                mean.d_loss,
                mean.g_adv,
                mean.l1_img,
                mean.l1_attn,
                mean.l1_feat
            );
            epochs.push(mean);
        }
        if step >= limit {
            break 'epochs;
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "stage": "train",
            "seed": seed,
            "steps": step,
            "variant": cfg.model.variant,
        });
        checkpoint::save(&model, dir, meta)?;
        let rows: Vec<EpochRow> = epochs
            .iter()
            .enumerate()
            .map(|(epoch, l)| EpochRow {
                epoch,
                d_loss: l.d_loss,
                g_adv: l.g_adv,
                l1_img: l.l1_img,
                l1_attn: l.l1_attn,
                l1_feat: l.l1_feat,
            })
            .collect();
        write_csv(&dir.join("metrics.csv"), &rows)?;
    }
    Ok(TrainOutcome { model, steps, epochs })
}

/// One discriminator update followed by one generator update.
fn train_step(
    model: &mut Model<f32>,
    batch: &[&EditSample],
    cfg: &TrainConfig,
    opt_g: &mut Adam<f32>,
    opt_d: &mut Adam<f32>,
    gumbel_rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<LossBreakdown> {
    let tokens = tokens_for(model, batch);
    let xs: Vec<&Image> = batch.iter().map(|s| &s.x).collect();
    let ys: Vec<&Image> = batch.iter().map(|s| &s.y).collect();
    let (x_data, y_data) = (stack_images::<f32>(&xs), stack_images::<f32>(&ys));

    let tape = Tape::new();
    let p = model
        .params
        .bind_subset(&tape, |n| !is_discriminator_param(n), |n| is_generator_param(n) && !is_encoder_param(n));
    let y = tape.constant(y_data.clone());
    let fwd = generator_forward(&p, &model.config, tape.constant(x_data), &tokens, Some(gumbel_rng as &mut dyn RngCore))?;
    let phi_y = encode(&p, y);
    let true_mask = tape.constant(derive_true_masks(&fwd.phi_x.value(), &phi_y.value())?);

    // Discriminator step on the detached generator output.
    let d_loss = {
        let d_tape = Tape::new();
        let pd = model
            .params
            .bind_subset(&d_tape, is_discriminator_param, is_discriminator_param);
        let real = discriminate(&pd, d_tape.constant(y_data));
        let fake = discriminate(&pd, d_tape.constant((*fwd.output.value()).clone()));
        let loss = discriminator_loss(real, fake);
        let value = loss.item() as f64;
        check_finite(step, || format!("discriminator loss {value}"), value.is_finite())?;
        let mut grads = d_tape.backward(loss);
        opt_d.step(&mut model.params, &pd.gradients(&mut grads));
        value
    };

    // Generator step against the updated discriminator, held fixed.
    let pd = model.params.bind_subset(&tape, is_discriminator_param, |_| false);
    let d_fake = discriminate(&pd, fwd.output);
    let g = generator_losses(&fwd, y, phi_y, true_mask, d_fake, &cfg.weights, cfg.use_feat_loss);
    let losses = LossBreakdown {
        d_loss,
        g_adv: g.g_adv.item() as f64,
        l1_img: g.l1_img.item() as f64,
        l1_attn: g.l1_attn.item() as f64,
        l1_feat: g.l1_feat.item() as f64,
        total_g: g.total.item() as f64,
    };
    check_finite(step, || format!("{losses:?}"), losses.is_finite())?;
    let mut grads = tape.backward(g.total);
    opt_g.step(&mut model.params, &p.gradients(&mut grads));
    Ok(losses)
}

/// Mean absolute reconstruction error of `decode(encode(x))` over `images`.
pub fn reconstruction_error(model: &Model<f32>, images: &[&Image]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(16) {
        let tape = Tape::new();
        let p = model.params.bind_subset(&tape, is_autoencoder_param, |_| false);
        let x = tape.constant(stack_images::<f32>(chunk));
        let err = decode(&p, encode(&p, x)).sub(x).abs().sum().item() as f64;
        total += err;
        count += chunk.len() * chunk[0].len();
    }
    Ok(total / count.max(1) as f64)
}

/// Mean absolute error between edited outputs and targets.
pub fn edit_error(model: &Model<f32>, samples: &[EditSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(16) {
        let xs: Vec<&Image> = chunk.iter().map(|s| &s.x).collect();
        let texts: Vec<String> = chunk.iter().map(|s| s.instruction.text()).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let outs = model.edit_batch(&xs, &refs, None)?;
        for (o, s) in outs.iter().zip(chunk) {
            total += (&o.image - &s.y).mapv(|v| v.abs() as f64).sum();
            count += s.y.len();
        }
    }
    Ok(total / count.max(1) as f64)
}
