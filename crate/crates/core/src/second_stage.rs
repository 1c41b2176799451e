//! Two-stage generation: a dense VAE fitted to the latent codes of a trained
//! first-stage model, and samplers chaining the two decoders.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{BalancingState, GaussianPosterior};
use crate::models::{map_batches, reparameterize, LatentBatch, ModelConfig, Vae, Variant};
use crate::train::{RunOptions, TrainOutcome, TrainSchedule, Trainer};

/// Dimensions whose variance falls below this cannot be normalized.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const EXTRACT_TAG: u64 = 0x4558_5452_4143_5421;
const PRIOR_TAG: u64 = 0x5052_494f_5221_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondStageConfig {
    pub inner_width: usize,
    /// Latent dimension of the second VAE; `None` inherits the first stage's `k`.
    pub second_latent_dim: Option<usize>,
    /// Dense residual blocks in each of the encoder and decoder.
    pub blocks: usize,
    pub schedule: TrainSchedule,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        SecondStageConfig {
            inner_width: 4096,
            second_latent_dim: None,
            blocks: 1,
            schedule: TrainSchedule {
                lr_halve_every: 100,
                diagnostics_every: 0,
                ..TrainSchedule::default()
            },
        }
    }
}

impl SecondStageConfig {
    /// Defaults derived from a first-stage schedule: twice the epochs, same
    /// learning rate, halving every 100 epochs.
    pub fn following(first: &TrainSchedule) -> Self {
        let base = Self::default();
        SecondStageConfig {
            schedule: TrainSchedule {
                epochs: 2 * first.epochs,
                lr_initial: first.lr_initial,
                seed: first.seed,
                batch_size: first.batch_size,
                checkpoint_every: first.checkpoint_every,
                ..base.schedule
            },
            ..base
        }
    }

    pub fn model_config(&self, k: usize) -> Result<ModelConfig> {
        let second_k = self.second_latent_dim.unwrap_or(k);
        if self.inner_width < second_k {
            return Err(Error::config(
                "second.inner_width",
                format!("inner width {} is smaller than the latent dimension {second_k}", self.inner_width),
            ));
        }
        Ok(ModelConfig {
            blocks_per_scale: self.blocks,
            ..ModelConfig::dense(k, second_k, self.inner_width)
        })
    }
}

/// How latent codes are read from the first-stage encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    /// `z ~ Q(z|X)`: samples of the aggregate posterior.
    #[default]
    Sampled,
    /// `z = μ(X)`
    Mean,
}

impl FromStr for ExtractMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sampled" | "sample" => Ok(ExtractMode::Sampled),
            "mean" => Ok(ExtractMode::Mean),
            other => Err(Error::invalid(format!("unknown extraction mode `{other}`"))),
        }
    }
}

impl fmt::Display for ExtractMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractMode::Sampled => "sampled",
            ExtractMode::Mean => "mean",
        })
    }
}

/// One latent vector per row of `x`.
pub fn extract_latents(first: &Vae, x: ArrayView2<f32>, mode: ExtractMode, seed: u64, exec: Exec) -> Result<Array2<f64>> {
    if x.ncols() != first.config.input_len() {
        return Err(Error::shape(format!("[n, {}]", first.config.input_len()), x.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EXTRACT_TAG);
    map_batches(x, 500, |b| {
        let p = first.encoder.encode(b, exec)?;
        match mode {
            ExtractMode::Mean => Ok(p.mu),
            ExtractMode::Sampled => {
                let noise = Array2::from_shape_simple_fn(p.mu.dim(), || StandardNormal.sample(&mut rng));
                Ok(reparameterize(&p, noise.view())?.z)
            }
        }
    })
}

/// Trains the second VAE on latent codes `[n, k]` with computed-γ balancing.
pub fn train_second_stage(latents: ArrayView2<f64>, config: &SecondStageConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if latents.nrows() == 0 {
        return Err(Error::invalid("no latent codes to train on"));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("latent codes contain non-finite values"));
    }
    let model = config.model_config(latents.ncols())?;
    let mut trainer = Trainer::new(model, config.schedule.clone(), BalancingState::computed())?;
    trainer.stage = Stage::Second;
    trainer.fit(latents.mapv(|v| v as f32).view(), opts)
}

/// Per-dimension empirical moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments {
    pub mean: Array1<f64>,
    /// Unbiased variance.
    pub variance: Array1<f64>,
}

pub fn latent_moments(z: ArrayView2<f64>) -> Result<LatentMoments> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("latent moments need at least 2 samples, got {n}")));
    }
    let mean = z.mean_axis(Axis(0)).expect("n >= 2");
    let variance = z.var_axis(Axis(0), 1.0);
    Ok(LatentMoments { mean, variance })
}

/// `(z − mean) / √variance` per dimension.
pub fn normalize_latents(z: ArrayView2<f64>, moments: &LatentMoments) -> Result<Array2<f64>> {
    if z.ncols() != moments.mean.len() || moments.variance.len() != moments.mean.len() {
        return Err(Error::shape(moments.mean.len(), z.ncols()));
    }
    let collapsed: Vec<usize> = moments
        .variance
        .iter()
        .enumerate()
        .filter(|(_, &v)| !(v > VARIANCE_FLOOR))
        .map(|(i, _)| i)
        .collect();
    if !collapsed.is_empty() {
        return Err(Error::CollapsedDimensions {
            dims: collapsed,
            floor: VARIANCE_FLOOR,
        });
    }
    let scale = moments.variance.mapv(|v| 1.0 / v.sqrt());
    Ok((&z - &moments.mean) * &scale)
}

/// Generated samples with the latent codes fed to the first decoder.
#[derive(Debug, Clone)]
pub struct Generated {
    pub images: Array2<f32>,
    pub latents: Array2<f64>,
}

/// Draws `n` samples.
///
/// Without a second model, `z ~ N(0, I)` is decoded directly. With one,
/// `u ~ N(0, I)` is decoded by the second VAE into `z`, optionally
/// normalized per dimension with the moments of the generated batch itself,
/// and then decoded by the first model. The result depends only on the
/// models, `n`, `normalize` and `seed`.
pub fn generate(first: &Vae, second: Option<&Vae>, n: usize, normalize: bool, seed: u64, exec: Exec) -> Result<Generated> {
    if n == 0 {
        return Err(Error::invalid("cannot generate 0 samples"));
    }
    let k = first.config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PRIOR_TAG);
    let z = match second {
        None => Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(&mut rng)),
        Some(s) => {
            if s.config.input_len() != k {
                return Err(Error::Checkpoint(format!(
                    "second-stage model maps to {} dimensions, first stage has k = {k}",
                    s.config.input_len()
                )));
            }
            let u = Array2::from_shape_simple_fn((n, s.config.latent_dim), || StandardNormal.sample(&mut rng));
            let z = s.decoder.decode(&LatentBatch::new(u)?, exec)?.mapv(f64::from);
            if normalize {
                normalize_latents(z.view(), &latent_moments(z.view())?)?
            } else {
                z
            }
        }
    };
    let images = first.decoder.decode(&LatentBatch::new(z.clone())?, exec)?;
    Ok(Generated { images, latents: z })
}

/// Rebuilds a model from a checkpoint of the given stage.
pub fn model_from_checkpoint(ckpt: &Checkpoint, stage: Stage) -> Result<Vae> {
    if ckpt.stage != stage {
        return Err(Error::Checkpoint(format!(
            "expected a {stage:?} stage checkpoint, found {:?}",
            ckpt.stage
        )));
    }
    let mut vae = Vae::new(ckpt.model.clone(), ckpt.schedule.seed)?;
    vae.load_tensors(&ckpt.tensors)?;
    Ok(vae)
}

/// Posterior of the second model over latent codes; used by diagnostics.
pub fn second_posterior(second: &Vae, z: ArrayView2<f64>, exec: Exec) -> Result<GaussianPosterior> {
    if second.config.variant != Variant::Dense {
        return Err(Error::invalid("second-stage model must use the dense variant"));
    }
    crate::diagnostics::encode_all(&second.encoder, z.mapv(|v| v as f32).view(), 500, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn moments_hand_case() {
        let m = latent_moments(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(m.mean[0], 1.0);
        assert_eq!(m.variance[0], 2.0);
        assert!(latent_moments(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn constant_set_is_flagged_as_collapsed() {
        let z = Array2::from_elem((10, 3), 0.5);
        let m = latent_moments(z.view()).unwrap();
        match normalize_latents(z.view(), &m).unwrap_err() {
            Error::CollapsedDimensions { dims, .. } => assert_eq!(dims, vec![0, 1, 2]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn outlier_dimension_is_halved() {
        let m = LatentMoments {
            mean: array![0.0, 0.0],
            variance: array![1.0, 4.0],
        };
        let out = normalize_latents(array![[1.0, 2.0], [-3.0, 4.0]].view(), &m).unwrap();
        assert_eq!(out, array![[1.0, 1.0], [-3.0, 2.0]]);
    }

    #[test]
    fn normalization_yields_unit_variance_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array2::from_shape_simple_fn((1000, 4), || {
            let e: f64 = StandardNormal.sample(&mut rng);
            0.85f64.sqrt() * e + 0.3
        });
        let once = normalize_latents(z.view(), &latent_moments(z.view()).unwrap()).unwrap();
        let m = latent_moments(once.view()).unwrap();
        assert!(m.variance.iter().all(|v| (v - 1.0).abs() < 1e-6));
        let twice = normalize_latents(once.view(), &m).unwrap();
        assert!((&twice - &once).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn config_rejects_narrow_inner_width() {
        let c = SecondStageConfig {
            inner_width: 8,
            ..Default::default()
        };
        assert!(c.model_config(16).is_err());
        assert_eq!(c.model_config(4).unwrap().latent_dim, 4);
        let f = SecondStageConfig::following(&TrainSchedule {
            epochs: 7,
            ..Default::default()
        });
        assert_eq!((f.schedule.epochs, f.schedule.lr_halve_every, f.inner_width), (14, 100, 4096));
    }

    fn tiny_first() -> Vae {
        Vae::new(
            ModelConfig {
                input_shape: (4, 4, 1),
                latent_dim: 3,
                variant: Variant::Mlp,
                dense_width: 16,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn extraction_modes() {
        let mut vae = tiny_first();
        let x = Array2::from_shape_fn((100, 16), |(i, j)| ((i + j) % 7) as f32 / 7.0);
        let mean = extract_latents(&vae, x.view(), ExtractMode::Mean, 0, Exec::Sequential).unwrap();
        assert_eq!(mean.dim(), (100, 3));
        assert_eq!(mean, vae.encoder.encode(x.view(), Exec::Sequential).unwrap().mu);
        // Collapse every posterior variance: sampling must then equal the mean.
        vae.encoder.log_var_head.weight.value.fill(0.0);
        vae.encoder.log_var_head.bias.value.fill(-80.0);
        let mean = extract_latents(&vae, x.view(), ExtractMode::Mean, 0, Exec::Sequential).unwrap();
        let sampled = extract_latents(&vae, x.view(), ExtractMode::Sampled, 0, Exec::Sequential).unwrap();
        assert!((&sampled - &mean).iter().all(|v| v.abs() < 1e-12));
        assert!(extract_latents(&vae, Array2::zeros((2, 5)).view(), ExtractMode::Mean, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let first = tiny_first();
        let second = Vae::new(ModelConfig::dense(3, 3, 16), 1).unwrap();
        let a = generate(&first, None, 16, false, 5, Exec::Sequential).unwrap();
        assert_eq!(a.images.dim(), (16, 16));
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.images, generate(&first, None, 16, false, 5, Exec::Sequential).unwrap().images);
        let b = generate(&first, Some(&second), 1000, true, 5, Exec::Sequential).unwrap();
        let m = latent_moments(b.latents.view()).unwrap();
        assert!(m.variance.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(generate(&first, None, 0, false, 5, Exec::Sequential).is_err());
        let wrong = Vae::new(ModelConfig::dense(5, 3, 16), 1).unwrap();
        assert!(generate(&first, Some(&wrong), 4, false, 0, Exec::Sequential).is_err());
    }
}
