//! Latent-space diagnostics and Fréchet-distance scoring.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::GaussianPosterior;
use crate::models::{map_batches, Encoder};
use crate::nn::{Activation, Dense, Param, Tensor};
use crate::npy;

/// A latent variable is inactive when its mean posterior variance is at least this.
pub const INACTIVE_THRESHOLD: f64 = 0.8;

/// Ridge added to covariances estimated from fewer than `d + 1` samples.
pub const COV_RIDGE: f64 = 1e-6;

/// Latent activity summary at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub epoch: usize,
    /// `E_X σ²_z(X)` per latent variable.
    pub per_var_mean_sigma2: Vec<f64>,
    /// `Var_X μ_z(X)` per latent variable (unbiased).
    pub per_var_mu_variance: Vec<f64>,
    /// `E_X μ_z(X)²` per latent variable.
    pub per_var_mu_sq: Vec<f64>,
    /// `E_X μ² + E_X σ²`, averaged over latent variables.
    pub variance_law: f64,
    pub inactive_count: usize,
    pub active_count: usize,
    pub threshold: f64,
}

impl DiagnosticsRecord {
    pub fn latent_dim(&self) -> usize {
        self.per_var_mean_sigma2.len()
    }

    /// Indices of the inactive variables.
    pub fn inactive(&self) -> Vec<usize> {
        (0..self.latent_dim())
            .filter(|&i| self.per_var_mean_sigma2[i] >= self.threshold)
            .collect()
    }
}

/// Variance-law statistics of posteriors collected over a dataset.
pub fn variance_law_report(posterior: &GaussianPosterior, threshold: f64) -> Result<DiagnosticsRecord> {
    let n = posterior.batch();
    if n < 2 {
        return Err(Error::invalid(format!("variance law needs at least 2 samples, got {n}")));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    posterior.check_finite()?;
    let nf = n as f64;
    let mean_sigma2 = posterior.variance().mean_axis(Axis(0)).expect("non-empty");
    let mu_sq = posterior.mu.mapv(|m| m * m).mean_axis(Axis(0)).expect("non-empty");
    let mu_mean = posterior.mu.mean_axis(Axis(0)).expect("non-empty");
    let mu_var = (&mu_sq - &mu_mean.mapv(|m| m * m)) * (nf / (nf - 1.0));
    let law = (&mu_sq + &mean_sigma2).mean().expect("k >= 1");
    let inactive = mean_sigma2.iter().filter(|&&s| s >= threshold).count();
    Ok(DiagnosticsRecord {
        step: 0,
        epoch: 0,
        per_var_mean_sigma2: mean_sigma2.to_vec(),
        per_var_mu_variance: mu_var.mapv(|v| v.max(0.0)).to_vec(),
        per_var_mu_sq: mu_sq.to_vec(),
        variance_law: law,
        inactive_count: inactive,
        active_count: posterior.latent_dim() - inactive,
        threshold,
    })
}

/// Runs the encoder over every row of `x` in blocks of `batch`.
pub fn encode_all(encoder: &Encoder, x: ArrayView2<f32>, batch: usize, exec: Exec) -> Result<GaussianPosterior> {
    let k = encoder.latent_dim();
    let both = map_batches(x, batch, |b| {
        let p = encoder.encode(b, exec)?;
        Ok(ndarray::concatenate(Axis(1), &[p.mu.view(), p.log_var.view()]).expect("same rows"))
    })?;
    GaussianPosterior::new(
        both.slice(ndarray::s![.., ..k]).to_owned(),
        both.slice(ndarray::s![.., k..]).to_owned(),
    )
}

/// Per-variable series of `E_X σ²_z` across diagnostics records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityTimeline {
    pub steps: Vec<u64>,
    pub epochs: Vec<usize>,
    /// `series[z][t]`
    pub series: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl ActivityTimeline {
    /// Variables whose series starts at or above the threshold and later drops below it.
    pub fn activated(&self) -> Vec<usize> {
        let t = self.threshold;
        self.series
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.iter()
                    .position(|&v| v >= t)
                    .is_some_and(|first| s[first..].iter().any(|&v| v < t))
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Orders records by step and transposes them into per-variable series.
pub fn activity_timeline(records: &[DiagnosticsRecord]) -> ActivityTimeline {
    let mut sorted: Vec<&DiagnosticsRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.step);
    let k = sorted.first().map_or(0, |r| r.latent_dim());
    ActivityTimeline {
        steps: sorted.iter().map(|r| r.step).collect(),
        epochs: sorted.iter().map(|r| r.epoch).collect(),
        series: (0..k)
            .map(|z| sorted.iter().map(|r| r.per_var_mean_sigma2.get(z).copied().unwrap_or(f64::NAN)).collect())
            .collect(),
        threshold: sorted.first().map_or(INACTIVE_THRESHOLD, |r| r.threshold),
    }
}

pub fn write_records(path: &Path, records: &[DiagnosticsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn append_record(path: &Path, record: &DiagnosticsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_records(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Maps flattened samples `[n, D]` to features `[n, d]`.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn extract(&self, x: ArrayView2<f32>) -> Result<Array2<f64>>;
}

/// Raw pixels as features.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl FeatureExtractor for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn extract(&self, x: ArrayView2<f32>) -> Result<Array2<f64>> {
        Ok(x.mapv(f64::from))
    }
}

/// Projection onto the leading principal components of a reference set.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `[d, D]`, rows orthonormal.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fits `d` components. Uses the `n × n` Gram matrix when `n < D`.
    pub fn fit(reference: ArrayView2<f32>, d: usize) -> Result<Pca> {
        let (n, dim) = reference.dim();
        if n < 2 {
            return Err(Error::invalid("PCA needs at least 2 samples"));
        }
        if d == 0 || d > dim.min(n - 1) {
            return Err(Error::invalid(format!(
                "PCA dimension {d} must be in 1..={}",
                dim.min(n - 1)
            )));
        }
        let x = reference.mapv(f64::from);
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean;
        let c = DMatrix::from_row_iterator(n, dim, centered.iter().copied());
        let scale = 1.0 / (n as f64 - 1.0);
        let (values, vectors) = if dim <= n {
            let eig = SymmetricEigen::new(c.transpose() * &c * scale);
            (eig.eigenvalues, eig.eigenvectors)
        } else {
            // Eigenvectors of XᵀX are Xᵀu / ‖Xᵀu‖ for eigenvectors u of XXᵀ.
            let eig = SymmetricEigen::new(&c * c.transpose() * scale);
            let mut v = c.transpose() * eig.eigenvectors;
            for mut col in v.column_iter_mut() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                }
            }
            (eig.eigenvalues, v)
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let mut components = Array2::zeros((d, dim));
        for (row, &j) in order.iter().take(d).enumerate() {
            // Fix the sign so the largest-magnitude entry is positive.
            let col = vectors.column(j);
            let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (i, v) in col.iter().enumerate() {
                components[[row, i]] = sign * v;
            }
        }
        Ok(Pca {
            mean,
            components,
            explained_variance: order.iter().take(d).map(|&j| values[j].max(0.0)).collect(),
        })
    }
}

impl FeatureExtractor for Pca {
    fn name(&self) -> String {
        format!("pca-{}", self.components.nrows())
    }

    fn extract(&self, x: ArrayView2<f32>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::shape(self.mean.len(), x.ncols()));
        }
        Ok((&x.mapv(f64::from) - &self.mean).dot(&self.components.t()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerSpec {
    weight: PathBuf,
    bias: PathBuf,
    #[serde(default)]
    activation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

/// A user-supplied pretrained dense network, typically a classifier
/// truncated at its penultimate layer.
///
/// The description file is JSON: `{"layers": [{"weight": "w0.npy",
/// "bias": "b0.npy", "activation": "relu"}, ...]}` with weights shaped
/// `[out, in]` and paths relative to the description file. Activations are
/// `relu`, `sigmoid`, `leaky-relu` or absent (linear).
#[derive(Debug, Clone)]
pub struct NetworkExtractor {
    layers: Vec<(Dense, Option<Activation>)>,
    source: PathBuf,
}

impl NetworkExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
        if spec.layers.is_empty() {
            return Err(Error::data(path, "network has no layers"));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut layers = Vec::new();
        let mut prev: Option<usize> = None;
        for (i, l) in spec.layers.iter().enumerate() {
            let w = npy::read_f32(&base.join(&l.weight))?;
            let b = npy::read_f32(&base.join(&l.bias))?;
            if w.ndim() != 2 || b.ndim() != 1 || b.len() != w.shape()[0] {
                return Err(Error::data(path, format!("layer {i}: weight {:?} / bias {:?} mismatch", w.shape(), b.shape())));
            }
            let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
            if prev.is_some_and(|p| p != inputs) {
                return Err(Error::data(path, format!("layer {i} expects {inputs} inputs, previous layer gives {}", prev.unwrap())));
            }
            prev = Some(outputs);
            let act = match l.activation.as_deref() {
                None | Some("linear") | Some("none") => None,
                Some("relu") => Some(Activation::Relu),
                Some("sigmoid") => Some(Activation::Sigmoid),
                Some("leaky-relu") => Some(Activation::LeakyRelu(0.2)),
                Some(other) => return Err(Error::data(path, format!("layer {i}: unknown activation `{other}`"))),
            };
            let dense = Dense {
                inputs,
                outputs,
                weight: Param::new(w),
                bias: Param::new(b),
            };
            layers.push((dense, act));
        }
        Ok(NetworkExtractor {
            layers,
            source: path.to_path_buf(),
        })
    }
}

impl FeatureExtractor for NetworkExtractor {
    fn name(&self) -> String {
        format!("network:{}", self.source.display())
    }

    fn extract(&self, x: ArrayView2<f32>) -> Result<Array2<f64>> {
        if x.ncols() != self.layers[0].0.inputs {
            return Err(Error::shape(self.layers[0].0.inputs, x.ncols()));
        }
        let mut h: Tensor = x.to_owned().into_dyn();
        for (dense, act) in &self.layers {
            h = dense.forward(&h);
            if let Some(a) = act {
                h = a.apply_tensor(&h);
            }
        }
        Ok(h.mapv(f64::from).into_dimensionality().expect("2-d features"))
    }
}

/// Unbiased mean and covariance of features. A ridge of [`COV_RIDGE`] is
/// added (with a warning) when there are fewer than `d + 1` samples.
pub fn stats_from_features(features: ArrayView2<f64>) -> Result<FrechetStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::invalid(format!("feature statistics need at least 2 samples, got {n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite features"));
    }
    let f = DMatrix::from_row_iterator(n, d, features.iter().copied());
    let mean = f.row_mean().transpose();
    let mut centered = f;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    if n < d + 1 {
        log::warn!("{n} samples for {d}-dimensional features: covariance is rank deficient, adding ridge {COV_RIDGE}");
        for i in 0..d {
            cov[(i, i)] += COV_RIDGE;
        }
    }
    Ok(FrechetStats { mean, cov, n })
}

pub fn feature_stats(images: ArrayView2<f32>, extractor: &dyn FeatureExtractor) -> Result<FrechetStats> {
    stats_from_features(extractor.extract(images)?.view())
}

/// Square root of a symmetric positive-semidefinite matrix by
/// eigendecomposition, clamping eigenvalues at zero.
///
/// Fails if an eigenvalue is more negative than `1e-8` relative to the largest.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::shape((m.nrows(), m.nrows()), m.shape()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::invalid(format!("matrix is not positive semidefinite (eigenvalue {v:e})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The cross term is evaluated as `Tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}`, which is
/// symmetric PSD. Small negative totals are clamped to zero with a warning.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let root_a = sqrtm_psd(&a.cov)?;
    // Validates b as well.
    sqrtm_psd(&b.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let cross = sqrtm_psd(&inner)?.trace();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if d < 0.0 {
        log::warn!("Fréchet distance {d:e} is negative from round-off; reporting 0");
        return Ok(0.0);
    }
    Ok(d)
}
