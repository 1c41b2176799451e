//! Dataset ingestion, resizing and synthetic image manifolds.
//!
//! Images are held as `[n, H, W, C]` arrays of `f32` in `[0, 1]`. Models see
//! them flattened per sample in CHW order (see [`Dataset::to_matrix`]).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::npy;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "BALVAE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "t10k" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, H, W, C]`, values in `[0, 1]`.
    pub images: Array4<f32>,
    pub split: Split,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Array4<f32>, split: Split, name: impl Into<String>) -> Result<Self> {
        if images.shape()[0] == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            split,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Samples flattened to `[n, C·H·W]` in CHW order.
    pub fn to_matrix(&self) -> Array2<f32> {
        let (h, w, c) = self.image_shape();
        let chw = self.images.view().permuted_axes([0, 3, 1, 2]);
        chw.as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.len(), c * h * w))
            .expect("contiguous reshape")
    }

    /// Inverse of [`Dataset::to_matrix`].
    pub fn from_matrix(
        m: ArrayView2<f32>,
        shape: (usize, usize, usize),
        split: Split,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (h, w, c) = shape;
        if m.ncols() != h * w * c {
            return Err(Error::shape(h * w * c, m.ncols()));
        }
        let images = m
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((m.nrows(), c, h, w))
            .expect("contiguous reshape")
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .mapv(|v| v.clamp(0.0, 1.0));
        Dataset::new(images, split, name)
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice(s![..n, .., .., ..]).to_owned(),
            split: self.split,
            name: self.name.clone(),
        }
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    /// Resizes every image.
    pub fn resized(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Dataset> {
        let (_, _, c) = self.image_shape();
        let mut out = Array4::zeros((self.len(), out_h, out_w, c));
        for (i, mut dst) in out.outer_iter_mut().enumerate() {
            dst.assign(&resize(self.image(i), out_h, out_w, mode)?);
        }
        Dataset::new(out, self.split, self.name.clone())
    }

    /// SHA-256 over the little-endian pixel bytes and shape.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Interpolation kernels for [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    #[default]
    Bilinear,
    Bicubic,
}

impl FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(ResizeMode::Nearest),
            "bilinear" => Ok(ResizeMode::Bilinear),
            "bicubic" => Ok(ResizeMode::Bicubic),
            other => Err(Error::invalid(format!("unknown resize mode `{other}`"))),
        }
    }
}

/// Source coordinate of output pixel `i` under half-pixel-center alignment.
fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-axis taps `(index, weight)` for one output coordinate. Indices may fall
/// outside `0..len`; [`sample_axis`] resolves them.
fn taps(i: usize, len: usize, scale: f64, mode: ResizeMode) -> Vec<(isize, f64)> {
    let x = source_coord(i, scale);
    match mode {
        ResizeMode::Nearest => {
            let j = (((i as f64 + 0.5) * scale).floor() as isize).clamp(0, len as isize - 1);
            vec![(j, 1.0)]
        }
        ResizeMode::Bilinear => {
            let x = x.clamp(0.0, (len - 1) as f64);
            let j = x.floor() as isize;
            let t = x - j as f64;
            if t == 0.0 {
                vec![(j, 1.0)]
            } else {
                vec![(j, 1.0 - t), (j + 1, t)]
            }
        }
        ResizeMode::Bicubic => {
            let j = x.floor() as isize;
            let t = x - j as f64;
            (-1..=2).map(|o| (j + o, cubic(t - o as f64))).collect()
        }
    }
}

/// Value of a line at integer index `j`; outside the image the signal is
/// extended linearly from the two nearest samples.
fn sample_axis(line: impl Fn(usize) -> f64, len: usize, j: isize) -> f64 {
    if (0..len as isize).contains(&j) {
        return line(j as usize);
    }
    if len == 1 {
        return line(0);
    }
    let (edge, inner, dist) = if j < 0 {
        (0, 1, (-j) as f64)
    } else {
        (len - 1, len - 2, (j - len as isize + 1) as f64)
    };
    let e = line(edge);
    e + dist * (e - line(inner))
}

/// Resizes a `[H, W, C]` image with half-pixel-center alignment.
///
/// Bilinear clamps source coordinates to the image; bicubic uses the Keys
/// kernel (a = -0.5) with linear extension past the border, so it is exact on
/// linear ramps everywhere. Results are clamped to `[0, 1]`.
pub fn resize(image: ArrayView3<f32>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Array3<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.to_owned());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    // Separable: rows first, then columns.
    let mut tmp = Array3::<f64>::zeros((h, out_w, c));
    for x in 0..out_w {
        let tx = taps(x, w, sx, mode);
        for y in 0..h {
            for ch in 0..c {
                tmp[[y, x, ch]] = tx
                    .iter()
                    .map(|&(j, wt)| wt * sample_axis(|k| image[[y, k, ch]] as f64, w, j))
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let ty = taps(y, h, sy, mode);
        for x in 0..out_w {
            for ch in 0..c {
                let v: f64 = ty
                    .iter()
                    .map(|&(j, wt)| wt * sample_axis(|k| tmp[[k, x, ch]], h, j))
                    .sum();
                out[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Root holding `mnist/` and `cifar-10-batches-bin/`; defaults to `$BALVAE_DATA_DIR`.
    pub root: Option<PathBuf>,
    /// Resize every image to `(height, width)`.
    pub resize: Option<(usize, usize)>,
    pub mode: ResizeMode,
    /// Keep only the first `limit` images.
    pub limit: Option<usize>,
}

impl LoadOptions {
    fn root(&self) -> Option<PathBuf> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

/// Loads a dataset by name (`mnist`, `cifar10`) or from a directory.
///
/// A directory may hold MNIST IDX files (optionally gzipped), CIFAR-10 binary
/// batches, or plain images (PNG/JPEG, optionally under `train/` and `test/`).
pub fn load_dataset(source: &str, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let dir = match source.to_ascii_lowercase().as_str() {
        "mnist" | "cifar10" | "cifar-10" => {
            let root = opts.root().ok_or_else(|| {
                Error::data(source, format!("no dataset root: set {DATA_DIR_ENV} or give a directory"))
            })?;
            let sub = if source.eq_ignore_ascii_case("mnist") {
                "mnist"
            } else {
                "cifar-10-batches-bin"
            };
            root.join(sub)
        }
        _ => PathBuf::from(source),
    };
    if !dir.is_dir() {
        return Err(Error::data(&dir, "dataset directory does not exist"));
    }
    let mut ds = if find_idx(&dir, split, "images-idx3-ubyte").is_some() {
        load_mnist(&dir, split)?
    } else if dir.join("data_batch_1.bin").exists() || dir.join("test_batch.bin").exists() {
        load_cifar10(&dir, split)?
    } else {
        load_image_dir(&dir, split, opts)?
    };
    if let Some(limit) = opts.limit {
        ds = ds.take(limit);
    }
    if let Some((h, w)) = opts.resize {
        if ds.image_shape().0 != h || ds.image_shape().1 != w {
            ds = ds.resized(h, w, opts.mode)?;
        }
    }
    Ok(ds)
}

fn find_idx(dir: &Path, split: Split, kind: &str) -> Option<PathBuf> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    [format!("{prefix}-{kind}"), format!("{prefix}-{kind}.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(path, format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX3 image file header and returns `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::data(path, "truncated IDX header"))
    };
    if word(0)? != 0x0803 {
        return Err(Error::data(path, format!("bad IDX3 magic {:#x}", word(0)?)));
    }
    let (n, rows, cols) = (word(1)?, word(2)?, word(3)?);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::data(
            path,
            format!("IDX header declares {n}x{rows}x{cols} pixels but file holds {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let path = find_idx(dir, split, "images-idx3-ubyte")
        .ok_or_else(|| Error::data(dir, format!("no MNIST {split} images")))?;
    let bytes = read_maybe_gz(&path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&bytes, &path)?;
    if n == 0 {
        return Err(Error::data(&path, "no images"));
    }
    let images = Array4::from_shape_vec((n, rows, cols, 1), pixels.iter().map(|&p| p as f32 / 255.0).collect())
        .map_err(|e| Error::data(&path, e.to_string()))?;
    Dataset::new(images, split, "mnist")
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(format!("read {}", f.display()), e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::data(
                f,
                format!("size {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            // Records are label + CHW planes; convert to HWC.
            let img = &rec[1..];
            for p in 0..1024 {
                for c in 0..3 {
                    pixels.push(img[c * 1024 + p] as f32 / 255.0);
                }
            }
        }
    }
    let n = pixels.len() / (32 * 32 * 3);
    let images = Array4::from_shape_vec((n, 32, 32, 3), pixels).map_err(|e| Error::data(dir, e.to_string()))?;
    Dataset::new(images, split, "cifar10")
}

fn load_image_dir(dir: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let split_dir = dir.join(split.to_string());
    let dir = if split_dir.is_dir() { split_dir } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("list {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if let Some(limit) = opts.limit {
        files.truncate(limit);
    }
    if files.is_empty() {
        return Err(Error::data(&dir, "no images found"));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut target: Option<(usize, usize, usize)> = opts.resize.map(|(h, w)| (h, w, 0));
    for f in &files {
        let img = image::open(f).map_err(|e| Error::data(f, format!("cannot decode image: {e}")))?;
        let channels = if img.color().has_color() { 3 } else { 1 };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<f32> = if channels == 3 {
            img.to_rgb8().into_raw().iter().map(|&b| b as f32 / 255.0).collect()
        } else {
            img.to_luma8().into_raw().iter().map(|&b| b as f32 / 255.0).collect()
        };
        let arr = Array3::from_shape_vec((h, w, channels), raw).map_err(|e| Error::data(f, e.to_string()))?;
        let (th, tw, tc) = *target.get_or_insert((h, w, channels));
        let tc = if tc == 0 { channels } else { tc };
        target = Some((th, tw, tc));
        let arr = if channels != tc {
            return Err(Error::data(f, format!("has {channels} channels, expected {tc}")));
        } else if (h, w) != (th, tw) {
            if opts.resize.is_none() {
                return Err(Error::data(f, format!("size {h}x{w} differs from {th}x{tw}; set a resize target")));
            }
            resize(arr.view(), th, tw, opts.mode)?
        } else {
            arr
        };
        images.push(arr);
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::data(&dir, e.to_string()))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    Dataset::new(stacked, split, name)
}

/// Synthetic image families with known intrinsic dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// `centers` prototype images plus small noise; centers have distinct mean intensity.
    Blobs,
    /// A Gaussian bump at a uniformly random angle on a circle (intrinsic dimension 1).
    Ring,
    /// `0.5 + Σ aᵢ Bᵢ` over `rank` fixed smooth basis images (intrinsic dimension `rank`).
    LowRankImages,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blobs" => Ok(SyntheticKind::Blobs),
            "ring" => Ok(SyntheticKind::Ring),
            "low-rank-images" | "low-rank" | "lowrank" => Ok(SyntheticKind::LowRankImages),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Ring => "ring",
            SyntheticKind::LowRankImages => "low-rank-images",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub size: usize,
    pub centers: usize,
    pub rank: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            size: 16,
            centers: 4,
            rank: 4,
        }
    }
}

impl SyntheticKind {
    pub fn intrinsic_dim(self, opts: &SyntheticOptions) -> usize {
        match self {
            SyntheticKind::Blobs => 0,
            SyntheticKind::Ring => 1,
            SyntheticKind::LowRankImages => opts.rank,
        }
    }
}

pub fn make_synthetic(kind: &str, n: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(kind.parse()?, n, seed, &SyntheticOptions::default())
}

/// Deterministic synthetic dataset of `n` single-channel square images.
pub fn make_synthetic_with(kind: SyntheticKind, n: usize, seed: u64, opts: &SyntheticOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs n >= 1"));
    }
    let size = opts.size;
    if size < 4 {
        return Err(Error::invalid("synthetic images need size >= 4"));
    }
    // The structure (centers, bases) depends only on the options, not on the sample seed.
    let mut structure_rng = ChaCha8Rng::seed_from_u64(0x5eed_ba1a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut images = Array4::<f32>::zeros((n, size, size, 1));
    match kind {
        SyntheticKind::Blobs => {
            let k = opts.centers.max(1);
            let centers: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    let level = 0.1 + 0.8 * (c as f64 + 0.5) / k as f64;
                    (0..plane)
                        .map(|_| level + structure_rng.random_range(-0.05..0.05))
                        .collect()
                })
                .collect();
            for mut img in images.outer_iter_mut() {
                let c = rng.random_range(0..k);
                for (v, &m) in img.iter_mut().zip(&centers[c]) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = (m + 0.02 * e).clamp(0.0, 1.0) as f32;
                }
            }
        }
        SyntheticKind::Ring => {
            let mid = size as f64 / 2.0 - 0.5;
            let radius = 0.3 * size as f64;
            let width = size as f64 / 10.0;
            for mut img in images.outer_iter_mut() {
                let theta = rng.random_range(0.0..2.0 * PI);
                let (cy, cx) = (mid + radius * theta.sin(), mid + radius * theta.cos());
                for ((y, x, _), v) in img.indexed_iter_mut() {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    *v = (-d2 / (2.0 * width * width)).exp() as f32;
                }
            }
        }
        SyntheticKind::LowRankImages => {
            let rank = opts.rank.max(1);
            let bases: Vec<Vec<f64>> = (0..rank)
                .map(|_| smooth_field(size, &mut structure_rng))
                .collect();
            for mut img in images.outer_iter_mut() {
                let coeffs: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect();
                for (p, v) in img.iter_mut().enumerate() {
                    let s: f64 = coeffs.iter().zip(&bases).map(|(a, b)| a * b[p]).sum();
                    *v = (0.5 + 0.12 * s).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Dataset::new(images, Split::Train, format!("synthetic-{kind}"))
}

/// Sum of a few random low-frequency plane waves, scaled to unit RMS.
fn smooth_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0) * PI / size as f64,
                rng.random_range(-2.0..2.0) * PI / size as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let field: Vec<f64> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64, (p % size) as f64);
            waves.iter().map(|(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum()
        })
        .collect();
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    field.iter().map(|v| v / rms.max(1e-9)).collect()
}

/// Manifest written next to cached arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub shape: (usize, usize, usize),
    pub splits: BTreeMap<Split, usize>,
    pub checksums: BTreeMap<Split, String>,
}

fn cache_file(dir: &Path, name: &str, split: Split) -> PathBuf {
    dir.join(format!("{name}-{split}.npy"))
}

/// Writes the dataset as `.npy` and records it in `manifest.json`.
pub fn write_cache(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    npy::write_f32(&cache_file(dir, &ds.name, ds.split), &ds.images.clone().into_dyn())?;
    let manifest_path = dir.join("manifest.json");
    let mut manifest: Manifest = match fs::read_to_string(&manifest_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Manifest::default(),
    };
    if manifest.name != ds.name || manifest.shape != ds.image_shape() {
        manifest = Manifest {
            name: ds.name.clone(),
            shape: ds.image_shape(),
            ..Manifest::default()
        };
    }
    manifest.splits.insert(ds.split, ds.len());
    manifest.checksums.insert(ds.split, ds.checksum());
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("write {}", manifest_path.display()), e))?;
    Ok(manifest)
}

/// Reads a cached split, verifying its checksum against the manifest.
pub fn read_cache(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("read {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let path = cache_file(dir, &manifest.name, split);
    let arr = npy::read_f32(&path)?
        .into_dimensionality()
        .map_err(|e| Error::data(&path, e.to_string()))?;
    let ds = Dataset::new(arr, split, manifest.name.clone())?;
    match manifest.checksums.get(&split) {
        Some(sum) if *sum == ds.checksum() => Ok(ds),
        _ => Err(Error::data(&path, "checksum does not match manifest")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn bilinear_two_by_two_average() {
        let img = array![[[0.0f32], [1.0]], [[1.0], [0.0]]];
        let out = resize(img.view(), 1, 1, ResizeMode::Bilinear).unwrap();
        assert!((out[[0, 0, 0]] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn nearest_integer_upscale_replicates() {
        let img = array![[[0.1f32], [0.2]], [[0.3], [0.4]]];
        let out = resize(img.view(), 4, 4, ResizeMode::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out[[y, x, 0]], img[[y / 2, x / 2, 0]]);
            }
        }
    }

    #[test]
    fn bicubic_reproduces_ramps() {
        // f(y, x) = a + b·y + c·x sampled at integer pixels; any resize with
        // half-pixel alignment must return f at the mapped source coordinate.
        let (a, b, c) = (0.3, 0.011, 0.007);
        let (h, w) = (12, 17);
        let img = Array3::from_shape_fn((h, w, 1), |(y, x, _)| (a + b * y as f64 + c * x as f64) as f32);
        for (oh, ow) in [(5, 9), (24, 30), (12, 8)] {
            let out = resize(img.view(), oh, ow, ResizeMode::Bicubic).unwrap();
            for y in 0..oh {
                for x in 0..ow {
                    let sy = source_coord(y, h as f64 / oh as f64);
                    let sx = source_coord(x, w as f64 / ow as f64);
                    let expect = a + b * sy + c * sx;
                    assert!((out[[y, x, 0]] as f64 - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for t in [0.0, 0.1, 0.5, 0.77] {
            let s: f64 = (-1..=2).map(|o| cubic(t - o as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        for kind in ["blobs", "ring", "low-rank-images"] {
            let a = make_synthetic(kind, 50, 9).unwrap();
            let b = make_synthetic(kind, 50, 9).unwrap();
            assert_eq!(a.checksum(), b.checksum());
            assert_ne!(a.checksum(), make_synthetic(kind, 50, 10).unwrap().checksum());
        }
        assert!(make_synthetic("spiral", 10, 0).is_err());
        assert!(make_synthetic("ring", 0, 0).is_err());
    }

    #[test]
    fn ring_images_lie_on_a_circle() {
        // The intensity centroid of every image sits at the ring radius.
        let ds = make_synthetic("ring", 200, 1).unwrap();
        let size = 16.0;
        let mid = size / 2.0 - 0.5;
        for img in ds.images.outer_iter() {
            let (mut sy, mut sx, mut m) = (0.0, 0.0, 0.0);
            for ((y, x, _), &v) in img.indexed_iter() {
                sy += y as f64 * v as f64;
                sx += x as f64 * v as f64;
                m += v as f64;
            }
            let r = ((sy / m - mid).powi(2) + (sx / m - mid).powi(2)).sqrt();
            assert!((r - 0.3 * size).abs() < 0.6, "centroid radius {r}");
        }
    }

    #[test]
    fn blobs_pixel_means_are_k_modal() {
        let opts = SyntheticOptions { centers: 4, ..Default::default() };
        let ds = make_synthetic_with(SyntheticKind::Blobs, 400, 3, &opts).unwrap();
        let mut hist = [0usize; 20];
        for img in ds.images.outer_iter() {
            let mean = img.mean().unwrap() as f64;
            hist[((mean * 20.0) as usize).min(19)] += 1;
        }
        // Count maximal runs of non-empty bins.
        let modes = hist
            .iter()
            .zip(std::iter::once(&0).chain(hist.iter()))
            .filter(|(cur, prev)| **cur > 0 && **prev == 0)
            .count();
        assert_eq!(modes, 4, "{hist:?}");
    }

    #[test]
    fn matrix_round_trip_uses_chw() {
        let images = Array4::from_shape_fn((2, 3, 4, 2), |(n, y, x, c)| ((n * 24 + c * 12 + y * 4 + x) as f32) / 48.0);
        let ds = Dataset::new(images, Split::Train, "t").unwrap();
        let m = ds.to_matrix();
        assert_eq!(m.dim(), (2, 24));
        assert_eq!(m[[1, 13]], ds.images[[1, 0, 1, 1]]);
        let back = Dataset::from_matrix(m.view(), (3, 4, 2), Split::Train, "t").unwrap();
        assert_eq!(back.images, ds.images);
    }

    fn write_idx(dir: &Path, name: &str, n: usize, rows: usize, cols: usize, gz: bool) {
        let mut bytes = Vec::new();
        for w in [0x803u32, n as u32, rows as u32, cols as u32] {
            bytes.extend_from_slice(&w.to_be_bytes());
        }
        bytes.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        if gz {
            use std::io::Write;
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
            enc.write_all(&bytes).unwrap();
            fs::write(dir.join(format!("{name}.gz")), enc.finish().unwrap()).unwrap();
        } else {
            fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn mnist_header_oracle() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path(), "train-images-idx3-ubyte", 7, 28, 28, true);
        write_idx(dir.path(), "t10k-images-idx3-ubyte", 3, 28, 28, false);
        let opts = LoadOptions::default();
        let src = dir.path().to_str().unwrap();
        let train = load_dataset(src, Split::Train, &opts).unwrap();
        assert_eq!((train.len(), train.image_shape()), (7, (28, 28, 1)));
        assert_eq!(train.images[[0, 0, 1, 0]], 1.0 / 255.0);
        let test = load_dataset(src, Split::Test, &opts).unwrap();
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn mnist_truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for w in [0x803u32, 10, 28, 28] {
            bytes.extend_from_slice(&w.to_be_bytes());
        }
        bytes.extend([0u8; 100]);
        fs::write(dir.path().join("train-images-idx3-ubyte"), bytes).unwrap();
        let err = load_dataset(dir.path().to_str().unwrap(), Split::Train, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("train-images-idx3-ubyte"), "{err}");
    }

    #[test]
    fn cifar_header_oracle() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            let mut rec = vec![0u8; 4 * CIFAR_RECORD];
            rec[1] = 255; // red channel of pixel 0 in record 0
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), rec).unwrap();
        }
        let ds = load_dataset(dir.path().to_str().unwrap(), Split::Train, &LoadOptions::default()).unwrap();
        assert_eq!((ds.len(), ds.image_shape()), (20, (32, 32, 3)));
        assert_eq!(ds.images[[0, 0, 0, 0]], 1.0);
        assert_eq!(ds.images[[0, 0, 0, 1]], 0.0);
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path().to_str().unwrap(), Split::Train, &LoadOptions::default()).is_err());
        assert!(load_dataset("/definitely/not/here", Split::Train, &LoadOptions::default()).is_err());
    }

    #[test]
    fn image_directory_with_resize() {
        let dir = tempfile::tempdir().unwrap();
        for (i, size) in [(0u8, 8u32), (1, 6)] {
            let img = image::RgbImage::from_fn(size, size, |x, _| image::Rgb([x as u8 * 30, i * 100, 0]));
            img.save(dir.path().join(format!("{i}.png"))).unwrap();
        }
        let opts = LoadOptions {
            resize: Some((4, 4)),
            ..Default::default()
        };
        let ds = load_dataset(dir.path().to_str().unwrap(), Split::Train, &opts).unwrap();
        assert_eq!((ds.len(), ds.image_shape()), (2, (4, 4, 3)));
        assert!(load_dataset(dir.path().to_str().unwrap(), Split::Train, &LoadOptions::default()).is_err());
    }

    #[test]
    fn cache_round_trip_with_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic("ring", 20, 2).unwrap();
        let m = write_cache(&ds, dir.path()).unwrap();
        assert_eq!(m.splits[&Split::Train], 20);
        assert_eq!(read_cache(dir.path(), Split::Train).unwrap(), ds);
        assert!(read_cache(dir.path(), Split::Test).is_err());
    }

    proptest! {
        #[test]
        fn resize_identity_when_dims_match(h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array3::from_shape_fn((h, w, 2), |_| rng.random::<f32>());
            for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
                prop_assert_eq!(&resize(img.view(), h, w, mode).unwrap(), &img);
            }
        }

        #[test]
        fn resize_stays_in_unit_range(h in 2usize..7, w in 2usize..7, oh in 1usize..12, ow in 1usize..12, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array3::from_shape_fn((h, w, 1), |_| rng.random::<f32>());
            for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic] {
                let out = resize(img.view(), oh, ow, mode).unwrap();
                prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn idx_loader_scales_bytes_into_unit_range(n in 1usize..4, bytes in prop::collection::vec(any::<u8>(), 16)) {
            let dir = tempfile::tempdir().unwrap();
            let mut file = Vec::new();
            for w in [0x803u32, n as u32, 4, 4] {
                file.extend_from_slice(&w.to_be_bytes());
            }
            for _ in 0..n {
                file.extend_from_slice(&bytes);
            }
            fs::write(dir.path().join("train-images-idx3-ubyte"), file).unwrap();
            let ds = load_dataset(dir.path().to_str().unwrap(), Split::Train, &LoadOptions::default()).unwrap();
            prop_assert!(ds.images.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(ds.len(), n);
        }
    }
}
