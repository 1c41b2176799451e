//! Encoder/decoder networks and the reparameterization trick.
//!
//! Networks consume and produce flattened samples `[batch, C·H·W]` in CHW
//! order. The residual variant follows the usual scale-block layout: an input
//! convolution, `N` scale blocks each followed by a stride-2 convolution that
//! doubles the channels, then a dense scale block feeding the two heads. The
//! decoder mirrors it with transposed convolutions that halve the channels.
//!
//! Residual blocks are pre-activation `x + conv3x3(relu(conv3x3(relu(x))))`
//! and preserve channels. No normalization layers are used.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::GaussianPosterior;
use crate::nn::{Activation, Cache, Conv2d, ConvTranspose2d, Dense, Init, Layer, Param, Residual, Sequential, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Convolutional scale blocks (images).
    ResNet,
    /// Two dense hidden layers (small images, fast tests).
    Mlp,
    /// Dense scale blocks on vectors with a linear output (second stage).
    Dense,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "resnet" | "conv" => Ok(Variant::ResNet),
            "mlp" => Ok(Variant::Mlp),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::invalid(format!("unknown model variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ResNet => "resnet",
            Variant::Mlp => "mlp",
            Variant::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(height, width, channels)`; vectors use `(1, 1, len)`.
    pub input_shape: (usize, usize, usize),
    pub latent_dim: usize,
    pub scale_blocks: usize,
    pub base_channels: usize,
    pub blocks_per_scale: usize,
    pub dense_width: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: (32, 32, 3),
            latent_dim: 64,
            scale_blocks: 3,
            base_channels: 32,
            blocks_per_scale: 1,
            dense_width: 512,
            variant: Variant::ResNet,
        }
    }
}

impl ModelConfig {
    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }

    /// Configuration of a dense VAE over `dim`-dimensional vectors.
    pub fn dense(dim: usize, latent_dim: usize, width: usize) -> Self {
        ModelConfig {
            input_shape: (1, 1, dim),
            latent_dim,
            scale_blocks: 1,
            base_channels: 1,
            blocks_per_scale: 1,
            dense_width: width,
            variant: Variant::Dense,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        let positive = [
            ("input height", h),
            ("input width", w),
            ("input channels", c),
            ("latent_dim", self.latent_dim),
            ("dense_width", self.dense_width),
            ("blocks_per_scale", self.blocks_per_scale),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.variant == Variant::ResNet {
            if self.scale_blocks == 0 || self.base_channels == 0 {
                return Err(Error::invalid("scale_blocks and base_channels must be positive"));
            }
            let f = 1usize
                .checked_shl(self.scale_blocks as u32)
                .ok_or_else(|| Error::invalid("scale_blocks too large"))?;
            if h % f != 0 || w % f != 0 {
                return Err(Error::invalid(format!(
                    "input {h}x{w} is not divisible by 2^{} required by {} scale blocks",
                    self.scale_blocks, self.scale_blocks
                )));
            }
        }
        Ok(())
    }

    fn top_channels(&self) -> usize {
        self.base_channels << self.scale_blocks
    }

    fn bottleneck(&self) -> (usize, usize) {
        let (h, w, _) = self.input_shape;
        (h >> self.scale_blocks, w >> self.scale_blocks)
    }
}

/// A batch of latent codes, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f64>,
}

impl LatentBatch {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.iter().all(|v| v.is_finite()) {
            Ok(LatentBatch { z })
        } else {
            Err(Error::invalid("latent batch contains non-finite entries"))
        }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// `z = mu + exp(log_var / 2) ⊙ noise`
pub fn reparameterize(posterior: &GaussianPosterior, noise: ArrayView2<f64>) -> Result<LatentBatch> {
    if noise.dim() != posterior.mu.dim() {
        return Err(Error::shape(posterior.mu.dim(), noise.dim()));
    }
    let z = Zip::from(&posterior.mu)
        .and(&posterior.log_var)
        .and(&noise)
        .map_collect(|&m, &lv, &e| m + (0.5 * lv).exp() * e);
    Ok(LatentBatch { z })
}

/// Pulls a gradient on `z` back to `(d_mu, d_log_var)`.
pub fn reparameterize_backward(
    posterior: &GaussianPosterior,
    noise: ArrayView2<f64>,
    d_z: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d_mu = d_z.to_owned();
    let d_log_var = Zip::from(&d_z)
        .and(&posterior.log_var)
        .and(&noise)
        .map_collect(|&g, &lv, &e| g * 0.5 * (0.5 * lv).exp() * e);
    (d_mu, d_log_var)
}

fn relu() -> Layer {
    Layer::Act(Activation::Relu)
}

fn conv_block(channels: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Residual(Residual {
        body: Sequential::new(vec![
            relu(),
            Layer::Conv(Conv2d::new(channels, channels, 3, 1, 1, Init::He, rng)),
            relu(),
            Layer::Conv(Conv2d::new(channels, channels, 3, 1, 1, Init::Scaled(0.5), rng)),
        ]),
    })
}

fn dense_block(width: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Residual(Residual {
        body: Sequential::new(vec![
            relu(),
            Layer::Dense(Dense::new(width, width, Init::He, rng)),
            relu(),
            Layer::Dense(Dense::new(width, width, Init::Scaled(0.5), rng)),
        ]),
    })
}

fn decayed(mut layer: Layer) -> Layer {
    match &mut layer {
        Layer::Conv(c) => c.weight.decay = true,
        Layer::ConvTranspose(c) => c.weight.decay = true,
        _ => {}
    }
    layer
}

/// Maps samples to a diagonal Gaussian posterior.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub trunk: Sequential,
    pub mu_head: Dense,
    pub log_var_head: Dense,
    input_len: usize,
    latent_dim: usize,
}

pub struct EncoderCache {
    trunk: Cache,
    features: Tensor,
}

/// Builds the encoder for `config` with weights drawn from `rng`.
pub fn build_encoder(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Encoder> {
    config.validate()?;
    let (h, w, c) = config.input_shape;
    let width = config.dense_width;
    let mut trunk = Sequential::default();
    match config.variant {
        Variant::ResNet => {
            trunk.push(Layer::Reshape(vec![c, h, w]));
            trunk.push(Layer::Conv(Conv2d::new(c, config.base_channels, 3, 1, 1, Init::He, rng)));
            let mut ch = config.base_channels;
            for _ in 0..config.scale_blocks {
                for _ in 0..config.blocks_per_scale {
                    trunk.push(conv_block(ch, rng));
                }
                trunk.push(relu());
                trunk.push(decayed(Layer::Conv(Conv2d::new(ch, 2 * ch, 3, 2, 1, Init::He, rng))));
                ch *= 2;
            }
            let (bh, bw) = config.bottleneck();
            trunk.push(relu());
            trunk.push(Layer::Reshape(vec![ch * bh * bw]));
            trunk.push(Layer::Dense(Dense::new(ch * bh * bw, width, Init::He, rng)));
            for _ in 0..config.blocks_per_scale {
                trunk.push(dense_block(width, rng));
            }
            trunk.push(relu());
        }
        Variant::Mlp => {
            trunk.push(Layer::Dense(Dense::new(config.input_len(), width, Init::He, rng)));
            trunk.push(relu());
            trunk.push(Layer::Dense(Dense::new(width, width, Init::He, rng)));
            trunk.push(relu());
        }
        Variant::Dense => {
            trunk.push(Layer::Dense(Dense::new(config.input_len(), width, Init::He, rng)));
            for _ in 0..config.blocks_per_scale {
                trunk.push(dense_block(width, rng));
            }
            trunk.push(relu());
        }
    }
    Ok(Encoder {
        trunk,
        mu_head: Dense::new(width, config.latent_dim, Init::Lecun, rng),
        log_var_head: Dense::new(width, config.latent_dim, Init::Scaled(0.01), rng),
        input_len: config.input_len(),
        latent_dim: config.latent_dim,
    })
}

fn to_f64(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d head output")
        .mapv(f64::from)
}

pub(crate) fn to_f32(a: ArrayView2<f64>) -> Tensor {
    a.mapv(|v| v as f32).into_dyn()
}

impl Encoder {
    fn check(&self, x: &ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.input_len {
            return Err(Error::shape(format!("[batch, {}]", self.input_len), x.dim()));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Inference-only forward pass.
    pub fn encode(&self, x: ArrayView2<f32>, exec: Exec) -> Result<GaussianPosterior> {
        Ok(self.forward(x, exec)?.0)
    }

    pub fn forward(&self, x: ArrayView2<f32>, exec: Exec) -> Result<(GaussianPosterior, EncoderCache)> {
        self.check(&x)?;
        let (features, trunk) = self.trunk.forward(x.to_owned().into_dyn(), exec);
        let mu = to_f64(&self.mu_head.forward(&features));
        let log_var = to_f64(&self.log_var_head.forward(&features));
        let posterior = GaussianPosterior { mu, log_var };
        Ok((posterior, EncoderCache { trunk, features }))
    }

    pub fn backward(&mut self, cache: EncoderCache, d_mu: ArrayView2<f64>, d_log_var: ArrayView2<f64>, exec: Exec) {
        let g_mu = self.mu_head.backward(&cache.features, &to_f32(d_mu));
        let g_lv = self.log_var_head.backward(&cache.features, &to_f32(d_log_var));
        self.trunk.backward(cache.trunk, g_mu + g_lv, exec);
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.trunk.visit_params(&format!("{prefix}.trunk"), f);
        f(&format!("{prefix}.mu.weight"), &self.mu_head.weight);
        f(&format!("{prefix}.mu.bias"), &self.mu_head.bias);
        f(&format!("{prefix}.log_var.weight"), &self.log_var_head.weight);
        f(&format!("{prefix}.log_var.bias"), &self.log_var_head.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.trunk.visit_params_mut(&format!("{prefix}.trunk"), f);
        f(&format!("{prefix}.mu.weight"), &mut self.mu_head.weight);
        f(&format!("{prefix}.mu.bias"), &mut self.mu_head.bias);
        f(&format!("{prefix}.log_var.weight"), &mut self.log_var_head.weight);
        f(&format!("{prefix}.log_var.bias"), &mut self.log_var_head.bias);
    }
}

/// Maps latent codes back to samples.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub net: Sequential,
    latent_dim: usize,
}

/// Builds the decoder for `config` with weights drawn from `rng`.
pub fn build_decoder(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Decoder> {
    config.validate()?;
    let (h, w, c) = config.input_shape;
    let width = config.dense_width;
    let k = config.latent_dim;
    let mut net = Sequential::default();
    match config.variant {
        Variant::ResNet => {
            let top = config.top_channels();
            let (bh, bw) = config.bottleneck();
            net.push(Layer::Dense(Dense::new(k, width, Init::He, rng)));
            for _ in 0..config.blocks_per_scale {
                net.push(dense_block(width, rng));
            }
            net.push(relu());
            net.push(Layer::Dense(Dense::new(width, top * bh * bw, Init::He, rng)));
            net.push(Layer::Reshape(vec![top, bh, bw]));
            let mut ch = top;
            for _ in 0..config.scale_blocks {
                net.push(relu());
                net.push(decayed(Layer::ConvTranspose(ConvTranspose2d::new(ch, ch / 2, 4, 2, 1, Init::He, rng))));
                ch /= 2;
                for _ in 0..config.blocks_per_scale {
                    net.push(conv_block(ch, rng));
                }
            }
            net.push(relu());
            net.push(Layer::Conv(Conv2d::new(ch, c, 3, 1, 1, Init::Lecun, rng)));
            net.push(Layer::Act(Activation::Sigmoid));
            net.push(Layer::Reshape(vec![c * h * w]));
        }
        Variant::Mlp => {
            net.push(Layer::Dense(Dense::new(k, width, Init::He, rng)));
            net.push(relu());
            net.push(Layer::Dense(Dense::new(width, width, Init::He, rng)));
            net.push(relu());
            net.push(Layer::Dense(Dense::new(width, config.input_len(), Init::Lecun, rng)));
            net.push(Layer::Act(Activation::Sigmoid));
        }
        Variant::Dense => {
            net.push(Layer::Dense(Dense::new(k, width, Init::He, rng)));
            for _ in 0..config.blocks_per_scale {
                net.push(dense_block(width, rng));
            }
            net.push(relu());
            net.push(Layer::Dense(Dense::new(width, config.input_len(), Init::Lecun, rng)));
        }
    }
    Ok(Decoder { net, latent_dim: k })
}

impl Decoder {
    fn check(&self, z: &ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.latent_dim {
            return Err(Error::shape(format!("[batch, {}]", self.latent_dim), z.dim()));
        }
        Ok(())
    }

    /// Inference-only forward pass; returns `[batch, C·H·W]`.
    pub fn decode(&self, z: &LatentBatch, exec: Exec) -> Result<Array2<f32>> {
        self.check(&z.z.view())?;
        let y = self.net.apply(to_f32(z.z.view()), exec);
        Ok(y.into_dimensionality().expect("2-d decoder output"))
    }

    pub fn forward(&self, z: ArrayView2<f64>, exec: Exec) -> Result<(Array2<f32>, Cache)> {
        self.check(&z)?;
        let (y, cache) = self.net.forward(to_f32(z), exec);
        Ok((y.into_dimensionality().expect("2-d decoder output"), cache))
    }

    /// Returns the gradient with respect to the latent input.
    pub fn backward(&mut self, cache: Cache, grad: ArrayView2<f64>, exec: Exec) -> Array2<f64> {
        let g = self.net.backward(cache, to_f32(grad), exec);
        to_f64(&g)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f);
    }
}

/// Encoder and decoder sharing one configuration.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = build_encoder(&config, &mut rng)?;
        let decoder = build_decoder(&config, &mut rng)?;
        Ok(Vae {
            config,
            encoder,
            decoder,
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit_params("encoder", f);
        self.decoder.visit_params("decoder", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params_mut("encoder", f);
        self.decoder.visit_params_mut("decoder", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Named copies of every parameter tensor, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    /// Overwrites parameters from named tensors; every parameter must be present.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        self.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match map.get(name) {
                Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} does not match model {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Posterior means decoded back to sample space (deterministic reconstruction).
    pub fn reconstruct(&self, x: ArrayView2<f32>, exec: Exec) -> Result<Array2<f32>> {
        let posterior = self.encoder.encode(x, exec)?;
        self.decoder.decode(&LatentBatch { z: posterior.mu }, exec)
    }
}

/// Runs `f` over `x` in row blocks of `batch` and stacks the results.
pub(crate) fn map_batches<T, F>(x: ArrayView2<f32>, batch: usize, mut f: F) -> Result<Array2<T>>
where
    T: Clone,
    F: FnMut(ArrayView2<f32>) -> Result<Array2<T>>,
{
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + batch.max(1)).min(x.nrows());
        parts.push(f(x.slice(s![start..end, ..]))?);
        start = end;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
}
