//! Image pathway and the full edit pipeline: encoder, decoder, mask head,
//! gated fusion, the routed (or ablated) editing operator, and the patch
//! discriminator.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv, conv_transpose, init_conv, init_conv_transpose, init_linear, init_res_block, linear, norm, res_block, uniform, Bound,
    ParamStore,
};
use crate::routing::{apply_route, generate_route_params, init_routing, RouteParams, RouteVars, RoutingConfig};
use crate::scenegen::Image;
use crate::tensor::{concat, Float, Tape, Var};
use crate::text::{encode_tokens, init_text, tokenize, split_words, TextDims, TextFeatures, TextVars, Tokens, Vocabulary};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Mask fixed to all ones.
    NoWhere,
    /// Routed operator replaced by a fixed two-layer network on
    /// `[φ_x, broadcast φ_how]`.
    NoHow,
    /// β and γ are free parameters instead of text-generated ones.
    NoTextAdaptive,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoWhere, Variant::NoHow, Variant::NoTextAdaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWhere => "no_where",
            Variant::NoHow => "no_how",
            Variant::NoTextAdaptive => "no_text_adaptive",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Width of the first encoder layer; later layers use multiples of it.
    pub base_channels: usize,
    /// Feature-map channels C.
    pub channels: usize,
    pub embed_dim: usize,
    pub attend_dim: usize,
    pub max_len: usize,
    pub positional: bool,
    pub layers: usize,
    pub blocks: usize,
    pub tau: f64,
    pub hard_eval: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            base_channels: 16,
            channels: 32,
            embed_dim: 64,
            attend_dim: 64,
            max_len: 12,
            positional: true,
            layers: 2,
            blocks: 3,
            tau: 1.0,
            hard_eval: true,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            base_channels: 2,
            channels: 3,
            embed_dim: 4,
            attend_dim: 4,
            max_len: 12,
            positional: true,
            layers: 2,
            blocks: 2,
            tau: 1.0,
            hard_eval: false,
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 8", self.image_size)));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("attend_dim", self.attend_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.routing().validate()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn routing(&self) -> RoutingConfig {
        RoutingConfig {
            layers: self.layers,
            blocks: self.blocks,
            channels: self.channels,
            tau: self.tau,
            hard_eval: self.hard_eval,
            text_adaptive: self.variant != Variant::NoTextAdaptive,
        }
    }

    pub fn text_dims(&self, vocab: usize) -> TextDims {
        TextDims {
            vocab,
            max_len: self.max_len,
            embed: self.embed_dim,
            attend: self.attend_dim,
        }
    }

    fn routed_parameter_count(&self) -> usize {
        let (c, d) = (self.channels, self.attend_dim);
        let full = RoutingConfig {
            text_adaptive: true,
            ..self.routing()
        };
        let blocks = self.layers * self.blocks * (9 * c * c + c);
        let mlp = d * 2 * d + 2 * d + 2 * d * full.mlp_outputs() + full.mlp_outputs();
        blocks + mlp
    }

    /// Hidden width of the fixed operator used by `no_how`, chosen so its
    /// parameter count is as close as possible to the routed operator's.
    pub fn fixed_hidden_width(&self) -> usize {
        let (c, d) = (self.channels, self.attend_dim);
        let per_hidden = 9 * (c + d) + 1 + 9 * c;
        let target = self.routed_parameter_count().saturating_sub(c);
        ((target as f64 / per_hidden as f64).round() as usize).max(1)
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("disc.")
}

pub fn is_autoencoder_param(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("decoder.")
}

/// Everything the generator step optimizes: all but encoder and discriminator.
pub fn is_generator_param(name: &str) -> bool {
    !is_encoder_param(name) && !is_discriminator_param(name)
}

/// Initializes every parameter for `cfg`. Consumes the rng in a fixed order.
pub fn init_params<T: Float>(cfg: &ModelConfig, vocab_len: usize, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let (b, c, d) = (cfg.base_channels, cfg.channels, cfg.attend_dim);
    for (i, (ci, co)) in [(3, b), (b, 2 * b), (2 * b, c)].into_iter().enumerate() {
        init_conv(&mut s, rng, &format!("encoder.conv{}", i + 1), ci, co, 3);
    }
    init_res_block(&mut s, rng, "decoder.res1", c);
    init_res_block(&mut s, rng, "decoder.res2", c);
    for (i, (ci, co)) in [(c, 2 * b), (2 * b, b), (b, b)].into_iter().enumerate() {
        init_conv_transpose(&mut s, rng, &format!("decoder.up{}", i + 1), ci, co, 3);
    }
    init_conv(&mut s, rng, "decoder.out", b, 3, 1);
    init_text(&mut s, rng, cfg.text_dims(vocab_len));
    if cfg.variant != Variant::NoWhere {
        init_res_block(&mut s, rng, "mask.res", c);
        init_linear(&mut s, rng, "mask.mlp1", d, d, false);
        init_linear(&mut s, rng, "mask.mlp2", d, c, false);
        let f = cfg.feature_size();
        s.insert("mask.pos", uniform(&[1, c, f, f], 1.0, rng));
        s.insert("mask.proj.kernel", ArrayD::zeros(IxDyn(&[1, c, 1, 1])));
        s.insert("mask.proj.bias", ArrayD::zeros(IxDyn(&[1])));
    }
    if cfg.variant == Variant::NoHow {
        let hidden = cfg.fixed_hidden_width();
        init_conv(&mut s, rng, "fixed.conv1", c + d, hidden, 3);
        init_conv(&mut s, rng, "fixed.conv2", hidden, c, 3);
    } else {
        init_routing(&mut s, rng, &cfg.routing(), d);
    }
    for (i, (ci, co)) in [(3, b), (b, 2 * b), (2 * b, 2 * b)].into_iter().enumerate() {
        init_conv(&mut s, rng, &format!("disc.conv{}", i + 1), ci, co, 3);
    }
    init_conv(&mut s, rng, "disc.score", 2 * b, 1, 1);
    s
}

/// `[batch, 3, S, S]` to `[batch, C, S/8, S/8]`.
pub fn encode<'t, T: Float>(p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
    (1..=3).fold(x, |h, i| norm(conv(p, &format!("encoder.conv{i}"), h, 2, 1)).relu())
}

/// `[batch, C, h, w]` to `[batch, 3, 8h, 8w]` in `(0, 1)`.
pub fn decode<'t, T: Float>(p: &Bound<'t, T>, phi: Var<'t, T>) -> Var<'t, T> {
    let h = res_block(p, "decoder.res1", phi);
    let h = res_block(p, "decoder.res2", h);
    let h = (1..=3).fold(h, |h, i| norm(conv_transpose(p, &format!("decoder.up{i}"), h)).relu());
    conv(p, "decoder.out", h, 1, 0).sigmoid()
}

/// `[batch, 3, S, S]` to patch scores `[batch, 1, S/8, S/8]`.
pub fn discriminate<'t, T: Float>(p: &Bound<'t, T>, img: Var<'t, T>) -> Var<'t, T> {
    let h = (1..=3).fold(img, |h, i| conv(p, &format!("disc.conv{i}"), h, 2, 1).relu());
    conv(p, "disc.score", h, 1, 0)
}

/// `M = sigmoid(W_m * (MLP(φ_where) ⊙ (ResBlock(φ_x) + P)))`, shape `[batch, 1, h, w]`.
///
/// `P` is a learned per-position map. Convolutions alone cannot tell the
/// top left cell from the middle one, and instructions name cells by position.
pub fn predict_mask<'t, T: Float>(p: &Bound<'t, T>, phi_x: Var<'t, T>, phi_where: Var<'t, T>) -> Var<'t, T> {
    let batch = phi_x.shape()[0];
    let v = res_block(p, "mask.res", phi_x).add(p.get("mask.pos"));
    let e = linear(p, "mask.mlp2", linear(p, "mask.mlp1", phi_where).relu());
    let channels = e.shape()[1];
    conv(p, "mask.proj", v.mul(e.reshape(&[batch, channels, 1, 1])), 1, 0).sigmoid()
}

/// `(1 - M) ⊙ φ_x + M ⊙ φ_edit`, with the one-channel mask broadcast over channels.
pub fn fuse<'t, T: Float>(phi_x: Var<'t, T>, mask: Var<'t, T>, phi_edit: Var<'t, T>) -> Var<'t, T> {
    let keep = mask.scale(-1.0).add_scalar(1.0);
    keep.mul(phi_x).add(mask.mul(phi_edit))
}

/// The `no_how` operator: conv, instance norm, ReLU, conv over `φ_x`
/// concatenated with `φ_how` tiled across positions.
pub fn fixed_operator<'t, T: Float>(p: &Bound<'t, T>, phi_x: Var<'t, T>, phi_how: Var<'t, T>) -> Var<'t, T> {
    let shape = phi_x.shape();
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    let d = phi_how.shape()[1];
    let tiled = phi_how
        .reshape(&[batch, d, 1, 1])
        .mul(phi_x.tape().constant(ArrayD::ones(IxDyn(&[1, 1, h, w]))));
    let hidden = norm(conv(p, "fixed.conv1", concat(&[phi_x, tiled], 1), 1, 1)).relu();
    conv(p, "fixed.conv2", hidden, 1, 1)
}

/// All intermediate graph values of one generator pass.
pub struct Forward<'t, T: Float> {
    pub phi_x: Var<'t, T>,
    pub text: TextVars<'t, T>,
    pub mask: Var<'t, T>,
    pub route: Option<RouteVars<'t, T>>,
    pub phi_edit: Var<'t, T>,
    pub phi_fused: Var<'t, T>,
    pub output: Var<'t, T>,
}

pub fn generator_forward<'t, T: Float>(
    p: &Bound<'t, T>,
    cfg: &ModelConfig,
    x: Var<'t, T>,
    tokens: &[Tokens],
    rng: Option<&mut dyn RngCore>,
) -> Result<Forward<'t, T>> {
    let text = encode_tokens(p, tokens, cfg.positional)?;
    let phi_x = encode(p, x);
    let shape = phi_x.shape();
    let mask = match cfg.variant {
        Variant::NoWhere => p.tape().constant(ArrayD::ones(IxDyn(&[shape[0], 1, shape[2], shape[3]]))),
        _ => predict_mask(p, phi_x, text.phi_where),
    };
    let (route, phi_edit) = match cfg.variant {
        Variant::NoHow => (None, fixed_operator(p, phi_x, text.phi_how)),
        _ => {
            let routing = cfg.routing();
            let route = generate_route_params(p, text.phi_how, &routing, rng);
            let edited = apply_route(p, phi_x, &route, &routing)?;
            (Some(route), edited)
        }
    };
    let phi_fused = fuse(phi_x, mask, phi_edit);
    let output = decode(p, phi_fused);
    Ok(Forward {
        phi_x,
        text,
        mask,
        route,
        phi_edit,
        phi_fused,
        output,
    })
}

/// Stacks `[3, S, S]` images into a `[batch, 3, S, S]` array.
pub fn stack_images<T: Float>(images: &[&Image]) -> ArrayD<T> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("images share one shape")
        .mapv(|v| T::of(v as f64))
        .into_dyn()
}

fn to_f32<T: Float>(a: &ArrayD<T>) -> ArrayD<f32> {
    a.mapv(|v| v.as_f64() as f32)
}

/// Result of editing one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub image: Image,
    /// `[h, w]` at feature resolution.
    pub mask: Array2<f32>,
    pub text: TextFeatures,
    /// `None` for the `no_how` variant, which has no routing.
    pub route: Option<RouteParams>,
}

/// A complete model: configuration, vocabulary and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::from_grammar();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, vocab.len(), &mut rng);
        Ok(Model { config, vocab, params })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Tokens {
        tokenize(text, &self.vocab, self.config.max_len)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let s = self.config.image_size;
        if img.dim() != (3, s, s) {
            return Err(Error::Shape(format!("expected a 3x{s}x{s} image, got {:?}", img.shape())));
        }
        Ok(())
    }

    fn check_feature(&self, phi: &Array3<f32>) -> Result<()> {
        let (c, f) = (self.config.channels, self.config.feature_size());
        if phi.dim() != (c, f, f) {
            return Err(Error::Shape(format!("expected a {c}x{f}x{f} feature map, got {:?}", phi.shape())));
        }
        Ok(())
    }

    /// Encoder features `[batch, C, h, w]` for several images at once.
    pub fn encode_images(&self, images: &[&Image]) -> Result<ArrayD<f32>> {
        for img in images {
            self.check_image(img)?;
        }
        let tape = Tape::new();
        let p = self.params.frozen(&tape);
        let phi = encode(&p, tape.constant(stack_images(images)));
        Ok(to_f32(&phi.value()))
    }

    pub fn encode_image(&self, img: &Image) -> Result<Array3<f32>> {
        let batch = self.encode_images(&[img])?;
        Ok(batch.index_axis(Axis(0), 0).into_dimensionality::<Ix3>().expect("[C, h, w]").to_owned())
    }

    pub fn decode_feature(&self, phi: &Array3<f32>) -> Result<Image> {
        self.check_feature(phi)?;
        let tape = Tape::new();
        let p = self.params.frozen(&tape);
        let input = phi.view().insert_axis(Axis(0)).mapv(|v| T::of(v as f64)).into_dyn();
        let out = decode(&p, tape.constant(input));
        Ok(to_f32(&out.value())
            .index_axis(Axis(0), 0)
            .into_dimensionality::<Ix3>()
            .expect("[3, S, S]")
            .to_owned())
    }

    pub fn discriminate(&self, img: &Image) -> Result<Array3<f32>> {
        self.check_image(img)?;
        let tape = Tape::new();
        let p = self.params.frozen(&tape);
        let out = discriminate(&p, tape.constant(stack_images(&[img])));
        Ok(to_f32(&out.value())
            .index_axis(Axis(0), 0)
            .into_dimensionality::<Ix3>()
            .expect("[1, h, w]")
            .to_owned())
    }

    /// Mask `[h, w]` for a feature map and a "where" text feature.
    pub fn predict_mask(&self, phi_x: &Array3<f32>, phi_where: &[f32]) -> Result<Array2<f32>> {
        self.check_feature(phi_x)?;
        if phi_where.len() != self.config.attend_dim {
            return Err(Error::Shape(format!(
                "text feature has {} entries, expected {}",
                phi_where.len(),
                self.config.attend_dim
            )));
        }
        if self.config.variant == Variant::NoWhere {
            let f = self.config.feature_size();
            return Ok(Array2::ones((f, f)));
        }
        let tape = Tape::new();
        let p = self.params.frozen(&tape);
        let phi = tape.constant(phi_x.view().insert_axis(Axis(0)).mapv(|v| T::of(v as f64)).into_dyn());
        let text = ArrayD::from_shape_fn(IxDyn(&[1, phi_where.len()]), |i| T::of(phi_where[i[1]] as f64));
        let mask = predict_mask(&p, phi, tape.constant(text));
        Ok(to_f32(&mask.value()).into_shape_with_order(IxDyn(&[phi_x.shape()[1], phi_x.shape()[2]]))
            .expect("one mask")
            .into_dimensionality::<Ix2>()
            .expect("2-D"))
    }

    /// Edits several images in one batch. Without an rng, routing is
    /// deterministic and the result is bit-reproducible.
    pub fn edit_batch(&self, images: &[&Image], instructions: &[&str], rng: Option<&mut dyn RngCore>) -> Result<Vec<EditOutput>> {
        if images.len() != instructions.len() {
            return Err(Error::Shape(format!(
                "{} images but {} instructions",
                images.len(),
                instructions.len()
            )));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check_image(img)?;
        }
        let tokens: Vec<Tokens> = instructions.iter().map(|t| self.tokenize(t)).collect();
        let tape = Tape::new();
        let p = self.params.frozen(&tape);
        let fwd = generator_forward(&p, &self.config, tape.constant(stack_images(images)), &tokens, rng)?;
        let output = to_f32(&fwd.output.value());
        let mask = to_f32(&fwd.mask.value());
        Ok((0..images.len())
            .map(|b| {
                let words: Vec<String> = split_words(instructions[b]).into_iter().take(self.config.max_len).collect();
                EditOutput {
                    image: output.index_axis(Axis(0), b).into_dimensionality::<Ix3>().expect("[3, S, S]").to_owned(),
                    mask: mask
                        .index_axis(Axis(0), b)
                        .index_axis(Axis(0), 0)
                        .into_dimensionality::<Ix2>()
                        .expect("[h, w]")
                        .to_owned(),
                    text: TextFeatures::from_row(words, &fwd.text, b),
                    route: fwd.route.as_ref().map(|r| RouteParams::from_row(r, b)),
                }
            })
            .collect())
    }

    pub fn edit(&self, image: &Image, instruction: &str, rng: Option<&mut dyn RngCore>) -> Result<EditOutput> {
        Ok(self.edit_batch(&[image], &[instruction], rng)?.remove(0))
    }
}
