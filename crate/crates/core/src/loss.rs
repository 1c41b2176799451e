//! Scalar loss mathematics and the decoder-variance balancing policies.
//!
//! The reconstruction term of the VAE objective is `mse / (2 γ²)` where γ² is
//! the variance of the Gaussian decoder. Under [`BalancingPolicy::ComputedGamma`]
//! γ² is not learned: after every minibatch it is set to the running minimum of
//! the observed reconstruction error, which keeps the ratio between the
//! reconstruction term and the KL term constant over the whole run.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to γ² when a batch reports a non-positive error.
pub const GAMMA_SQ_FLOOR: f64 = 1e-8;

/// Diagonal Gaussian posterior `Q(z|X) = N(mu, exp(log_var))`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Array2<f64>, log_var: Array2<f64>) -> Result<Self> {
        if mu.dim() != log_var.dim() {
            return Err(Error::shape(mu.dim(), log_var.dim()));
        }
        let p = GaussianPosterior { mu, log_var };
        p.check_finite()?;
        Ok(p)
    }

    pub fn batch(&self) -> usize {
        self.mu.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn variance(&self) -> Array2<f64> {
        self.log_var.mapv(f64::exp)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.mu.dim() != self.log_var.dim() {
            return Err(Error::shape(self.mu.dim(), self.log_var.dim()));
        }
        if self.mu.iter().chain(self.log_var.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("posterior contains non-finite entries"))
        }
    }
}

/// How the reconstruction term is weighted against the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancingPolicy {
    /// γ² = running minimum of the minibatch reconstruction error.
    ComputedGamma,
    /// γ is a trainable scalar (parameterized as log γ).
    LearnedGamma,
    /// Plain `rec + beta * KL`, no decoder variance.
    FixedBeta,
}

impl FromStr for BalancingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "computed" | "computed-gamma" | "computed_gamma" => Ok(Self::ComputedGamma),
            "learned" | "learned-gamma" | "learned_gamma" => Ok(Self::LearnedGamma),
            "fixed" | "fixed-beta" | "fixed_beta" | "beta" => Ok(Self::FixedBeta),
            other => Err(Error::invalid(format!("unknown balancing policy `{other}`"))),
        }
    }
}

impl fmt::Display for BalancingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ComputedGamma => "computed",
            Self::LearnedGamma => "learned",
            Self::FixedBeta => "fixed",
        })
    }
}

/// Which reconstruction statistic γ² tracks.
///
/// The loss numerator is always the per-sample summed squared error. With
/// `PerSample`, γ² tracks that same sum and the reconstruction term settles at
/// 0.5. With `PerPixel`, γ² tracks the per-element mean, so the reconstruction
/// term settles at `D / 2` for `D` elements per sample and the learned-γ
/// objective carries `D · log γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaTarget {
    #[default]
    PerPixel,
    PerSample,
}

impl FromStr for GammaTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "per-pixel" | "pixel" | "mean" => Ok(Self::PerPixel),
            "per-sample" | "per-image" | "sample" | "sum" => Ok(Self::PerSample),
            other => Err(Error::invalid(format!("unknown gamma target `{other}`"))),
        }
    }
}

impl fmt::Display for GammaTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerPixel => "per-pixel",
            Self::PerSample => "per-sample",
        })
    }
}

/// The balancing policy together with its mutable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingState {
    pub policy: BalancingPolicy,
    /// Decoder variance γ²; for `ComputedGamma` the running error estimate.
    pub gamma_sq: f64,
    /// KL weight used by `FixedBeta`.
    pub beta: f64,
    /// Multiplier on the KL term (resolution compensation).
    pub kl_scale: f64,
    /// Number of minibatches seen.
    pub step: u64,
    #[serde(default)]
    pub gamma_target: GammaTarget,
    /// Number of times a non-positive batch error was clamped to [`GAMMA_SQ_FLOOR`].
    #[serde(default)]
    pub floor_hits: u64,
}

impl BalancingState {
    pub fn new(policy: BalancingPolicy) -> Self {
        BalancingState {
            policy,
            gamma_sq: 1.0,
            beta: 1.0,
            kl_scale: 1.0,
            step: 0,
            gamma_target: GammaTarget::default(),
            floor_hits: 0,
        }
    }

    pub fn computed() -> Self {
        Self::new(BalancingPolicy::ComputedGamma)
    }

    pub fn learned() -> Self {
        Self::new(BalancingPolicy::LearnedGamma)
    }

    pub fn fixed_beta(beta: f64) -> Self {
        BalancingState {
            beta,
            ..Self::new(BalancingPolicy::FixedBeta)
        }
    }

    pub fn with_kl_scale(mut self, kl_scale: f64) -> Self {
        self.kl_scale = kl_scale;
        self
    }

    pub fn with_gamma_target(mut self, target: GammaTarget) -> Self {
        self.gamma_target = target;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.gamma_sq) {
            return Err(Error::invalid(format!("gamma_sq must be > 0, got {}", self.gamma_sq)));
        }
        if !positive(self.beta) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !positive(self.kl_scale) {
            return Err(Error::invalid(format!("kl_scale must be > 0, got {}", self.kl_scale)));
        }
        Ok(())
    }

    /// The statistic γ² should track for a batch with the given reconstruction error.
    pub fn gamma_statistic(&self, rec: &Reconstruction) -> f64 {
        match self.gamma_target {
            GammaTarget::PerPixel => rec.raw_mse,
            GammaTarget::PerSample => rec.raw_mse_sum,
        }
    }

    /// Number of elements sharing one γ in the learned-γ objective.
    pub fn gamma_dims(&self, rec: &Reconstruction) -> f64 {
        match self.gamma_target {
            GammaTarget::PerPixel => rec.elements_per_sample as f64,
            GammaTarget::PerSample => 1.0,
        }
    }

    pub fn log_gamma(&self) -> f64 {
        0.5 * self.gamma_sq.ln()
    }

    /// Sets γ from a trained `log γ` (learned-γ policy) and advances the step.
    pub fn set_learned_log_gamma(&mut self, log_gamma: f64) {
        self.gamma_sq = (2.0 * log_gamma).exp().max(GAMMA_SQ_FLOOR);
        self.step += 1;
    }

    /// Advances the step counter without touching γ (fixed-β policy).
    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Reconstruction error of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Mean over every element of every sample.
    pub raw_mse: f64,
    /// Per-sample sum of squared errors, averaged over the batch.
    pub raw_mse_sum: f64,
    pub elements_per_sample: usize,
}

/// Individual loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub raw_mse: f64,
    pub raw_mse_sum: f64,
}

/// Closed-form `KL(N(mu, σ²) || N(0, I))`, summed over latent dimensions, per sample.
pub fn kl_diag_gaussian(posterior: &GaussianPosterior) -> Result<Array1<f64>> {
    posterior.check_finite()?;
    let mut out = Array1::zeros(posterior.batch());
    Zip::from(&mut out)
        .and(posterior.mu.rows())
        .and(posterior.log_var.rows())
        .for_each(|o, mu, lv| {
            *o = 0.5
                * mu.iter()
                    .zip(lv.iter())
                    .map(|(&m, &l)| m * m + l.exp() - l - 1.0)
                    .sum::<f64>();
        });
    Ok(out)
}

/// Squared reconstruction error between two batches whose first axis is the batch.
pub fn reconstruction_error(x: ArrayViewD<f64>, x_hat: ArrayViewD<f64>) -> Result<Reconstruction> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(x.shape(), x_hat.shape()));
    }
    if x.ndim() == 0 || x.shape()[0] == 0 || x.len() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let batch = x.shape()[0];
    let elements = x.len() / batch;
    let sse: f64 = Zip::from(&x).and(&x_hat).fold(0.0, |acc, &a, &b| {
        let d = a - b;
        acc + d * d
    });
    Ok(Reconstruction {
        raw_mse: sse / x.len() as f64,
        raw_mse_sum: sse / batch as f64,
        elements_per_sample: elements,
    })
}

/// Generative loss `mse / (2γ²) + log γ + log(2π) / 2`.
pub fn generative_loss(mse: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(mse / (2.0 * gamma * gamma) + gamma.ln() + (2.0 * PI).ln() / 2.0)
}

/// Derivative of [`generative_loss`] with respect to γ: `-mse/γ³ + 1/γ`.
pub fn generative_loss_derivative(mse: f64, gamma: f64) -> f64 {
    -mse / gamma.powi(3) + 1.0 / gamma
}

/// Combines reconstruction error and per-sample KL into the total loss.
pub fn total_loss(rec: &Reconstruction, kl: &[f64], state: &BalancingState) -> Result<LossBreakdown> {
    state.validate()?;
    if kl.is_empty() {
        return Err(Error::invalid("empty KL vector"));
    }
    let mean_kl = kl.iter().sum::<f64>() / kl.len() as f64;
    let (rec_term, kl_term) = match state.policy {
        BalancingPolicy::ComputedGamma | BalancingPolicy::LearnedGamma => {
            (rec.raw_mse_sum / (2.0 * state.gamma_sq), state.kl_scale * mean_kl)
        }
        BalancingPolicy::FixedBeta => (rec.raw_mse_sum, state.beta * state.kl_scale * mean_kl),
    };
    Ok(LossBreakdown {
        rec_term,
        kl_term,
        total: rec_term + kl_term,
        raw_mse: rec.raw_mse,
        raw_mse_sum: rec.raw_mse_sum,
    })
}

/// Moves γ² to `min(γ², batch_mse)`; the first batch initializes it.
///
/// Non-positive or non-finite errors are clamped to [`GAMMA_SQ_FLOOR`] and
/// counted in `floor_hits`.
pub fn update_gamma(state: &BalancingState, batch_mse: f64) -> Result<BalancingState> {
    if state.policy != BalancingPolicy::ComputedGamma {
        return Err(Error::invalid(format!(
            "update_gamma requires the computed-gamma policy, state is `{}`",
            state.policy
        )));
    }
    let mut next = state.clone();
    let observed = if batch_mse.is_finite() && batch_mse > GAMMA_SQ_FLOOR {
        batch_mse
    } else {
        log::warn!(
            "batch error {batch_mse} at step {} clamped to gamma floor {GAMMA_SQ_FLOOR}",
            state.step
        );
        next.floor_hits += 1;
        GAMMA_SQ_FLOOR
    };
    next.gamma_sq = if state.step == 0 {
        observed
    } else {
        state.gamma_sq.min(observed)
    };
    next.step += 1;
    Ok(next)
}

/// Gradients of [`LossBreakdown::total`] with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub d_mu: Array2<f64>,
    pub d_log_var: Array2<f64>,
    pub d_x_hat: Array2<f64>,
    /// Gradient of the learned-γ objective with respect to `log γ`.
    pub d_log_gamma: Option<f64>,
}

/// Backward pass of the total loss.
///
/// `x` and `x_hat` are flattened to `[batch, elements]`. γ² is a constant
/// here; only the learned-γ policy reports a gradient for it, taken from the
/// generative loss summed over the elements that share γ.
pub fn total_loss_gradients(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    posterior: &GaussianPosterior,
    state: &BalancingState,
) -> Result<LossGradients> {
    state.validate()?;
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(x.dim(), x_hat.dim()));
    }
    if x.nrows() != posterior.batch() {
        return Err(Error::shape(x.nrows(), posterior.batch()));
    }
    let batch = x.nrows() as f64;
    let (rec_weight, kl_weight) = match state.policy {
        BalancingPolicy::ComputedGamma | BalancingPolicy::LearnedGamma => {
            (1.0 / (2.0 * state.gamma_sq), state.kl_scale)
        }
        BalancingPolicy::FixedBeta => (1.0, state.beta * state.kl_scale),
    };
    let d_x_hat = Zip::from(&x_hat)
        .and(&x)
        .map_collect(|&xh, &xv| 2.0 * rec_weight * (xh - xv) / batch);
    let d_mu = posterior.mu.mapv(|m| kl_weight * m / batch);
    let d_log_var = posterior.log_var.mapv(|l| kl_weight * 0.5 * (l.exp() - 1.0) / batch);
    let d_log_gamma = (state.policy == BalancingPolicy::LearnedGamma).then(|| {
        let sse = Zip::from(&x).and(&x_hat).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        let rec = Reconstruction {
            raw_mse: sse / x.len() as f64,
            raw_mse_sum: sse / batch,
            elements_per_sample: x.ncols(),
        };
        -rec.raw_mse_sum / state.gamma_sq + state.gamma_dims(&rec)
    });
    Ok(LossGradients {
        d_mu,
        d_log_var,
        d_x_hat,
        d_log_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn post(mu: Array2<f64>, lv: Array2<f64>) -> GaussianPosterior {
        GaussianPosterior::new(mu, lv).unwrap()
    }

    #[test]
    fn kl_hand_cases() {
        let kl = kl_diag_gaussian(&post(array![[0.0, 0.0]], array![[0.0, 0.0]])).unwrap();
        assert_eq!(kl[0], 0.0);
        let kl = kl_diag_gaussian(&post(array![[1.0]], array![[0.0]])).unwrap();
        assert_relative_eq!(kl[0], 0.5, epsilon = 1e-12);
        let kl = kl_diag_gaussian(&post(array![[0.0]], array![[1.0]])).unwrap();
        assert_relative_eq!(kl[0], (std::f64::consts::E - 2.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let p = GaussianPosterior {
            mu: array![[f64::NAN]],
            log_var: array![[0.0]],
        };
        assert!(matches!(kl_diag_gaussian(&p), Err(Error::InvalidInput(_))));
        assert!(GaussianPosterior::new(array![[0.0, 1.0]], array![[0.0]]).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let x = Array::from_elem((1, 2, 2, 1), 1.0).into_dyn();
        let zero = Array::zeros((1, 2, 2, 1)).into_dyn();
        let r = reconstruction_error(x.view(), zero.view()).unwrap();
        assert_eq!((r.raw_mse, r.raw_mse_sum), (1.0, 4.0));
        let r = reconstruction_error(x.view(), x.view()).unwrap();
        assert_eq!((r.raw_mse, r.raw_mse_sum), (0.0, 0.0));
        let other = Array::zeros((1, 4)).into_dyn();
        assert!(reconstruction_error(x.view(), other.view()).is_err());
    }

    #[test]
    fn generative_loss_values() {
        let half_log_2pi = (2.0 * PI).ln() / 2.0;
        assert_relative_eq!(generative_loss(1.0, 1.0).unwrap(), 0.5 + half_log_2pi, epsilon = 1e-14);
        assert_relative_eq!(generative_loss(0.0, 1.0).unwrap(), 0.918_938_533_204_672_7, epsilon = 1e-14);
        assert_relative_eq!(generative_loss(1.0, 1.0).unwrap(), 1.418_938_533_204_672_7, epsilon = 1e-14);
        assert!(generative_loss(1.0, 0.0).is_err());
        assert!(generative_loss(1.0, -2.0).is_err());
        assert!(generative_loss_derivative(0.04, 0.2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let rec = Reconstruction { raw_mse: 0.01, raw_mse_sum: 0.01, elements_per_sample: 1 };
        let state = BalancingState { gamma_sq: 0.01, step: 1, ..BalancingState::computed() };
        let b = total_loss(&rec, &[3.0, 3.0], &state).unwrap();
        assert_relative_eq!(b.rec_term, 0.5);
        assert_relative_eq!(b.total, 3.5);

        let b = total_loss(&rec, &[0.0], &state).unwrap();
        assert_relative_eq!(b.total, 0.5);

        let fixed = BalancingState::fixed_beta(1.0);
        let b = total_loss(&rec, &[1.0, 2.0], &fixed).unwrap();
        assert_relative_eq!(b.total, 0.01 + 1.5);

        let scaled = BalancingState { gamma_sq: 0.01, ..BalancingState::computed() }.with_kl_scale(4.0);
        let b = total_loss(&rec, &[1.0], &scaled).unwrap();
        assert_relative_eq!(b.kl_term, 4.0);
    }

    #[test]
    fn update_gamma_cases() {
        let s = update_gamma(&BalancingState::computed(), 0.09).unwrap();
        assert_eq!(s.gamma_sq, 0.09);
        assert_eq!(s.step, 1);
        let s = BalancingState { gamma_sq: 0.01, step: 5, ..BalancingState::computed() };
        let s = update_gamma(&s, 0.008).unwrap();
        assert_eq!(s.gamma_sq, 0.008);
        let s = update_gamma(&s, 0.012).unwrap();
        assert_eq!(s.gamma_sq, 0.008);
        assert_eq!(s.step, 7);
    }

    #[test]
    fn update_gamma_clamps_and_rejects_other_policies() {
        let s = update_gamma(&BalancingState::computed(), 0.0).unwrap();
        assert_eq!(s.gamma_sq, GAMMA_SQ_FLOOR);
        assert_eq!(s.floor_hits, 1);
        let s = update_gamma(&s, -3.0).unwrap();
        assert_eq!(s.gamma_sq, GAMMA_SQ_FLOOR);
        assert_eq!(s.floor_hits, 2);
        assert!(update_gamma(&BalancingState::learned(), 0.1).is_err());
    }

    #[test]
    fn policy_names_parse() {
        for p in [BalancingPolicy::ComputedGamma, BalancingPolicy::LearnedGamma, BalancingPolicy::FixedBeta] {
            assert_eq!(p.to_string().parse::<BalancingPolicy>().unwrap(), p);
        }
        assert_eq!("fixed-beta".parse::<BalancingPolicy>().unwrap(), BalancingPolicy::FixedBeta);
        assert!("adaptive".parse::<BalancingPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn gamma_never_increases(seq in prop::collection::vec(-1.0f64..10.0, 1..200)) {
            let mut s = BalancingState::computed();
            let mut prev = f64::INFINITY;
            for v in seq {
                s = update_gamma(&s, v).unwrap();
                prop_assert!(s.gamma_sq <= prev);
                prop_assert!(s.gamma_sq > 0.0);
                prev = s.gamma_sq;
            }
        }

        #[test]
        fn kl_is_nonnegative(mu in -5.0f64..5.0, lv in -8.0f64..4.0) {
            let kl = kl_diag_gaussian(&post(array![[mu]], array![[lv]])).unwrap();
            prop_assert!(kl[0] >= 0.0);
        }
    }
}
