//! Reconstruction and generation scores in a feature space.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{self, feature_stats, frechet_distance, FeatureExtractor, Identity, NetworkExtractor, Pca};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{map_batches, Vae};
use crate::second_stage::generate;

/// Feature extractor selection: `identity`, `pca:<d>` or `network:<path>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExtractorSpec {
    Identity,
    Pca(usize),
    Network(PathBuf),
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Pca(32)
    }
}

impl FromStr for ExtractorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("identity") || s.eq_ignore_ascii_case("pixels") {
            return Ok(ExtractorSpec::Identity);
        }
        if let Some(d) = s.strip_prefix("pca:") {
            let d: usize = d
                .parse()
                .map_err(|_| Error::invalid(format!("bad PCA dimension in `{s}`")))?;
            if d == 0 {
                return Err(Error::invalid("PCA dimension must be positive"));
            }
            return Ok(ExtractorSpec::Pca(d));
        }
        if let Some(p) = s.strip_prefix("network:") {
            return Ok(ExtractorSpec::Network(PathBuf::from(p)));
        }
        Err(Error::invalid(format!(
            "unknown extractor `{s}` (expected identity, pca:<d> or network:<path>)"
        )))
    }
}

impl fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorSpec::Identity => f.write_str("identity"),
            ExtractorSpec::Pca(d) => write!(f, "pca:{d}"),
            ExtractorSpec::Network(p) => write!(f, "network:{}", p.display()),
        }
    }
}

impl ExtractorSpec {
    /// Builds the extractor; PCA is fit on `reference`.
    pub fn build(&self, reference: &Dataset) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorSpec::Identity => Box::new(Identity),
            ExtractorSpec::Pca(d) => {
                let x = reference.to_matrix();
                let d = (*d).min(x.ncols()).min(x.nrows().saturating_sub(1)).max(1);
                Box::new(Pca::fit(x.view(), d)?)
            }
            ExtractorSpec::Network(p) => Box::new(NetworkExtractor::load(p)?),
        })
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    /// Fréchet distance of reconstructions to the reference set.
    pub rec: f64,
    /// Fréchet distance of prior samples decoded by the first stage.
    pub gen1: f64,
    /// Fréchet distance of two-stage samples; absent without a second model.
    pub gen2: Option<f64>,
    /// Per-pixel reconstruction error on the reference set.
    pub mse: f64,
    pub variance_law: f64,
    pub inactive_count: usize,
    pub active_count: usize,
    pub extractor: String,
}

impl EvalScores {
    pub const COLUMNS: [&'static str; 5] = ["REC", "GEN-1", "GEN-2", "mse", "variance law"];

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let gen2 = self.gen2.map_or(String::new(), |v| format!("{v:.6}"));
        format!("{:.6},{:.6},{gen2},{:.6},{:.6}", self.rec, self.gen1, self.mse, self.variance_law)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_gen: usize,
    pub normalize: bool,
    pub seed: u64,
    pub threshold: f64,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_gen: 1000,
            normalize: true,
            seed: 0,
            threshold: diagnostics::INACTIVE_THRESHOLD,
            exec: Exec::default(),
        }
    }
}

/// Scores a trained model (and optional second stage) against `reference`.
pub fn evaluate(
    first: &Vae,
    second: Option<&Vae>,
    reference: &Dataset,
    extractor: &dyn FeatureExtractor,
    opts: &EvalOptions,
) -> Result<EvalScores> {
    if reference.image_shape() != first.config.input_shape {
        return Err(Error::invalid(format!(
            "reference images are {:?}, model expects {:?}",
            reference.image_shape(),
            first.config.input_shape
        )));
    }
    let x = reference.to_matrix();
    let exec = opts.exec;
    let reference_stats = feature_stats(x.view(), extractor)?;
    let recon = map_batches(x.view(), 500, |b| first.reconstruct(b, exec))?;
    let mse = x
        .iter()
        .zip(recon.iter())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    let rec = frechet_distance(&feature_stats(recon.view(), extractor)?, &reference_stats)?;
    let gen1_images = generate(first, None, opts.n_gen, false, opts.seed, exec)?.images;
    let gen1 = frechet_distance(&feature_stats(gen1_images.view(), extractor)?, &reference_stats)?;
    let gen2 = match second {
        Some(s) => {
            let images = generate(first, Some(s), opts.n_gen, opts.normalize, opts.seed, exec)?.images;
            Some(frechet_distance(&feature_stats(images.view(), extractor)?, &reference_stats)?)
        }
        None => None,
    };
    let posterior = diagnostics::encode_all(&first.encoder, x.view(), 500, exec)?;
    let law = diagnostics::variance_law_report(&posterior, opts.threshold)?;
    Ok(EvalScores {
        rec,
        gen1,
        gen2,
        mse,
        variance_law: law.variance_law,
        inactive_count: law.inactive_count,
        active_count: law.active_count,
        extractor: extractor.name(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_specs_parse() {
        assert_eq!("identity".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Identity);
        assert_eq!("pca:16".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Pca(16));
        assert_eq!(
            "network:/tmp/f.json".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::Network("/tmp/f.json".into())
        );
        assert!("pca:x".parse::<ExtractorSpec>().is_err());
        assert!("inception".parse::<ExtractorSpec>().is_err());
        for s in ["identity", "pca:7"] {
            assert_eq!(s.parse::<ExtractorSpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn column_set() {
        assert_eq!(EvalScores::csv_header(), "REC,GEN-1,GEN-2,mse,variance law");
    }
}
