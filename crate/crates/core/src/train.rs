//! First-stage training loop.
//!
//! Each minibatch runs forward, measures the reconstruction error, updates γ²
//! (computed policy only), backpropagates the total loss with γ² held
//! constant, and takes one Adam step. All randomness is derived from the run
//! seed: the shuffle of epoch `e` uses stream `e`, the reparameterization
//! noise of step `t` uses stream `t`. A resumed run therefore replays exactly
//! the batches and noise an uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ScalarMoments, Stage};
use crate::data::Dataset;
use crate::diagnostics::{self, DiagnosticsRecord, INACTIVE_THRESHOLD};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{self, BalancingPolicy, BalancingState, LossBreakdown};
use crate::models::{reparameterize, reparameterize_backward, ModelConfig, Vae};
use crate::nn::Adam;

const SHUFFLE_TAG: u64 = 0x5348_5546_464c_4521;
const NOISE_TAG: u64 = 0x4e4f_4953_4521_0001;

/// Optimization schedule. The optimizer is always Adam with TensorFlow defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Total number of epochs (a resumed run stops at this epoch too).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_halve_every: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables; the final one is always written).
    pub checkpoint_every: usize,
    /// L2 penalty on the down/upsampling convolution weights.
    pub weight_decay: f64,
    /// Record diagnostics every this many epochs (0 disables).
    pub diagnostics_every: usize,
    /// Number of training samples used for diagnostics.
    pub diagnostics_samples: usize,
    pub inactive_threshold: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 20,
            batch_size: 100,
            lr_initial: 1e-4,
            lr_halve_every: 200,
            seed: 0,
            checkpoint_every: 10,
            weight_decay: 0.0,
            diagnostics_every: 1,
            diagnostics_samples: 2000,
            inactive_threshold: INACTIVE_THRESHOLD,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.epochs == 0 {
            return fail("train.epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size", "must be >= 1");
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return fail("train.lr", "must be a positive number");
        }
        if self.lr_halve_every == 0 {
            return fail("train.lr_halve_every", "must be >= 1");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("train.weight_decay", "must be >= 0");
        }
        if !(self.inactive_threshold.is_finite() && self.inactive_threshold > 0.0) {
            return fail("diagnostics.threshold", "must be positive");
        }
        Ok(())
    }
}

/// `lr_initial · 2^(−⌊epoch / lr_halve_every⌋)`
pub fn lr_at(schedule: &TrainSchedule, epoch: usize) -> f64 {
    let halvings = epoch / schedule.lr_halve_every.max(1);
    schedule.lr_initial * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// One line of the metrics stream, written once per minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsEvent {
    pub step: u64,
    pub epoch: usize,
    pub raw_mse: f64,
    pub gamma_sq: f64,
    pub kl_term: f64,
    pub rec_term: f64,
    pub total: f64,
    pub lr: f64,
    /// Seconds since this training session started.
    pub wall_time: f64,
}

impl MetricsEvent {
    /// The event without its wall-clock field, for reproducibility checks.
    pub fn without_time(mut self) -> Self {
        self.wall_time = 0.0;
        self
    }
}

/// Collects events in memory and optionally appends them to a JSON-lines file.
#[derive(Debug, Default)]
pub struct MetricsSink {
    pub events: Vec<MetricsEvent>,
    writer: Option<BufWriter<fs::File>>,
    path: Option<PathBuf>,
}

impl MetricsSink {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        Ok(MetricsSink {
            events: Vec::new(),
            writer: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn push(&mut self, event: MetricsEvent) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&event)?;
            writeln!(w, "{line}").map_err(|e| self.io_error(e))?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("flush metrics", e))?;
        }
        Ok(())
    }

    fn io_error(&self, e: std::io::Error) -> Error {
        let p = self.path.as_deref().map_or("metrics".into(), |p| p.display().to_string());
        Error::io(format!("write {p}"), e)
    }
}

/// Reads a JSON-lines metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Where a training session writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `metrics.jsonl`, `diagnostics.jsonl` and checkpoints. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// File name prefix for artifacts (`""` for the first stage, `"second-"` for the second).
    pub prefix: String,
    pub exec: Exec,
}

impl RunOptions {
    pub fn in_memory(exec: Exec) -> Self {
        RunOptions {
            exec,
            ..Default::default()
        }
    }

    pub fn in_dir(dir: impl Into<PathBuf>, exec: Exec) -> Self {
        RunOptions {
            out_dir: Some(dir.into()),
            exec,
            prefix: String::new(),
        }
    }

    fn file(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(format!("{}{name}", self.prefix)))
    }

    pub fn final_checkpoint(&self) -> Option<PathBuf> {
        self.file("final.ckpt")
    }
}

/// Result of a training session.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsEvent>,
    pub diagnostics: Vec<DiagnosticsRecord>,
}

/// Owns the model, optimizer and balancing state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub vae: Vae,
    pub state: BalancingState,
    pub schedule: TrainSchedule,
    pub adam: Adam,
    pub learned_log_gamma: ScalarMoments,
    /// Completed epochs.
    pub epoch: usize,
    pub stage: Stage,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Trainer {
    pub fn new(config: ModelConfig, schedule: TrainSchedule, state: BalancingState) -> Result<Self> {
        schedule.validate()?;
        state.validate()?;
        let vae = Vae::new(config, schedule.seed)?;
        Ok(Trainer {
            vae,
            learned_log_gamma: ScalarMoments {
                value: state.log_gamma(),
                ..Default::default()
            },
            state,
            schedule,
            adam: Adam::default(),
            epoch: 0,
            stage: Stage::First,
            metadata: BTreeMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut vae = Vae::new(ckpt.model.clone(), ckpt.schedule.seed)?;
        vae.load_tensors(&ckpt.tensors)?;
        Ok(Trainer {
            vae,
            state: ckpt.balancing.clone(),
            schedule: ckpt.schedule.clone(),
            adam: ckpt.adam.clone(),
            learned_log_gamma: ckpt.learned_log_gamma,
            epoch: ckpt.epoch,
            stage: ckpt.stage,
            metadata: ckpt.metadata.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            model: self.vae.config.clone(),
            balancing: self.state.clone(),
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            adam: self.adam.clone(),
            learned_log_gamma: self.learned_log_gamma,
            tensors: self.vae.named_tensors(),
            metadata: self.metadata.clone(),
        }
    }

    /// Global optimizer step count.
    pub fn step(&self) -> u64 {
        self.adam.t
    }

    /// One optimization step on a minibatch `[batch, C·H·W]`.
    ///
    /// Returns the loss terms and the γ² they were computed with.
    pub fn train_step(&mut self, x: ArrayView2<f32>, lr: f64, exec: Exec) -> Result<(LossBreakdown, f64)> {
        let step = self.adam.t + 1;
        let (posterior, enc_cache) = self.vae.encoder.forward(x, exec)?;
        posterior.check_finite().map_err(|_| Error::NonFinite {
            step,
            detail: "encoder produced non-finite posterior parameters".into(),
        })?;
        let noise = step_noise(self.schedule.seed, step, posterior.mu.dim());
        let z = reparameterize(&posterior, noise.view())?;
        let (x_hat, dec_cache) = self.vae.decoder.forward(z.z.view(), exec)?;
        let xd = x.mapv(f64::from);
        let xh = x_hat.mapv(f64::from);
        let rec = loss::reconstruction_error(xd.view().into_dyn(), xh.view().into_dyn())?;

        if self.state.policy == BalancingPolicy::ComputedGamma {
            self.state = loss::update_gamma(&self.state, self.state.gamma_statistic(&rec))?;
        }
        let kl = loss::kl_diag_gaussian(&posterior)?;
        let breakdown = loss::total_loss(&rec, kl.as_slice().expect("contiguous"), &self.state)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("total loss is {} (rec {}, kl {})", breakdown.total, breakdown.rec_term, breakdown.kl_term),
            });
        }

        let gamma_sq = self.state.gamma_sq;
        let grads = loss::total_loss_gradients(xd.view(), xh.view(), &posterior, &self.state)?;
        let d_z = self.vae.decoder.backward(dec_cache, grads.d_x_hat.view(), exec);
        let (dz_mu, dz_lv) = reparameterize_backward(&posterior, noise.view(), d_z.view());
        let d_mu = grads.d_mu + dz_mu;
        let d_lv = grads.d_log_var + dz_lv;
        self.vae.encoder.backward(enc_cache, d_mu.view(), d_lv.view(), exec);

        let wd = self.schedule.weight_decay as f32;
        let vae = &mut self.vae;
        if wd > 0.0 {
            vae.visit_params_mut(&mut |_, p| {
                if p.decay {
                    p.grad.zip_mut_with(&p.value, |g, &w| *g += wd * w);
                }
            });
        }
        self.adam.step_visit(lr, |f| vae.visit_params_mut(&mut |_, p| f(p)));

        match self.state.policy {
            BalancingPolicy::ComputedGamma => {}
            BalancingPolicy::LearnedGamma => {
                let g = grads.d_log_gamma.expect("learned policy reports a gamma gradient");
                let s = &mut self.learned_log_gamma;
                self.adam.scalar_update(lr, &mut s.value, &mut s.m, &mut s.v, g);
                self.state.set_learned_log_gamma(s.value);
            }
            BalancingPolicy::FixedBeta => self.state.advance(),
        }
        Ok((breakdown, gamma_sq))
    }

    /// Diagnostics on the first `diagnostics_samples` rows of `x`.
    pub fn diagnose(&self, x: ArrayView2<f32>, exec: Exec) -> Result<DiagnosticsRecord> {
        let n = self.schedule.diagnostics_samples.clamp(2, x.nrows().max(2)).min(x.nrows());
        let posterior = diagnostics::encode_all(&self.vae.encoder, x.slice(ndarray::s![..n, ..]), 500, exec)?;
        let mut rec = diagnostics::variance_law_report(&posterior, self.schedule.inactive_threshold)?;
        rec.step = self.step();
        rec.epoch = self.epoch;
        Ok(rec)
    }

    /// Trains until `schedule.epochs` epochs are complete.
    pub fn fit(&mut self, x: ArrayView2<f32>, opts: &RunOptions) -> Result<TrainOutcome> {
        let input_len = self.vae.config.input_len();
        if x.ncols() != input_len {
            return Err(Error::shape(format!("[n, {input_len}]"), x.dim()));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("training data is empty"));
        }
        if self.epoch > self.schedule.epochs {
            return Err(Error::invalid(format!(
                "checkpoint is at epoch {} beyond the requested total of {}",
                self.epoch, self.schedule.epochs
            )));
        }
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        let mut sink = match opts.file("metrics.jsonl") {
            Some(p) => MetricsSink::to_file(&p)?,
            None => MetricsSink::in_memory(),
        };
        let diag_path = opts.file("diagnostics.jsonl");
        let mut records = Vec::new();
        let record = |rec: DiagnosticsRecord, records: &mut Vec<DiagnosticsRecord>| -> Result<()> {
            if let Some(p) = &diag_path {
                diagnostics::append_record(p, &rec)?;
            }
            records.push(rec);
            Ok(())
        };
        let diag_every = self.schedule.diagnostics_every;
        if diag_every > 0 && self.step() == 0 && x.nrows() >= 2 {
            record(self.diagnose(x, opts.exec)?, &mut records)?;
        }

        let started = Instant::now();
        while self.epoch < self.schedule.epochs {
            let epoch = self.epoch;
            let lr = lr_at(&self.schedule, epoch);
            for batch in epoch_batches(x.nrows(), self.schedule.batch_size, self.schedule.seed, epoch) {
                let xb = x.select(Axis(0), &batch);
                let out = self.train_step(xb.view(), lr, opts.exec);
                let (b, gamma_sq) = match out {
                    Ok(b) => b,
                    Err(e @ Error::NonFinite { .. }) => {
                        sink.flush()?;
                        return Err(self.nan_dump(e, sink.events.last(), opts));
                    }
                    Err(e) => return Err(e),
                };
                sink.push(MetricsEvent {
                    step: self.step(),
                    epoch,
                    raw_mse: b.raw_mse,
                    gamma_sq,
                    kl_term: b.kl_term,
                    rec_term: b.rec_term,
                    total: b.total,
                    lr,
                    wall_time: started.elapsed().as_secs_f64(),
                })?;
            }
            self.epoch += 1;
            sink.flush()?;
            if diag_every > 0 && (self.epoch % diag_every == 0 || self.epoch == self.schedule.epochs) && x.nrows() >= 2 {
                record(self.diagnose(x, opts.exec)?, &mut records)?;
            }
            let every = self.schedule.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.schedule.epochs {
                if let Some(p) = opts.file(&format!("checkpoint-epoch{:04}.ckpt", self.epoch)) {
                    self.checkpoint().save(&p)?;
                }
            }
            if let Some(last) = sink.events.last() {
                log::info!(
                    "epoch {} step {} raw_mse {:.5} gamma_sq {:.3e} kl {:.3}",
                    self.epoch,
                    last.step,
                    last.raw_mse,
                    last.gamma_sq,
                    last.kl_term
                );
            }
        }
        let checkpoint = self.checkpoint();
        if let Some(p) = opts.final_checkpoint() {
            checkpoint.save(&p)?;
        }
        Ok(TrainOutcome {
            checkpoint,
            metrics: sink.events,
            diagnostics: records,
        })
    }

    fn nan_dump(&self, err: Error, last: Option<&MetricsEvent>, opts: &RunOptions) -> Error {
        let last_json = last
            .and_then(|e| serde_json::to_string(e).ok())
            .unwrap_or_else(|| "none".into());
        log::error!("aborting on non-finite loss; last metrics event: {last_json}");
        if let Some(p) = opts.file("nan_dump.json") {
            let _ = fs::write(&p, &last_json);
        }
        match err {
            Error::NonFinite { step, detail } => Error::NonFinite {
                step,
                detail: format!("{detail}; last metrics event: {last_json}"),
            },
            other => other,
        }
    }
}

/// Indices of each minibatch of an epoch, shuffled with the run seed.
///
/// A trailing partial batch is dropped when at least one full batch exists,
/// so every γ² update sees `batch_size` samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_TAG);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    if n < batch_size {
        return vec![idx];
    }
    idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Standard-normal reparameterization noise for global step `step`.
pub fn step_noise(seed: u64, step: u64, dim: (usize, usize)) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_TAG);
    rng.set_stream(step);
    Array2::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

/// Trains a fresh first-stage model on `dataset`.
pub fn train_first_stage(
    config: ModelConfig,
    schedule: TrainSchedule,
    state: BalancingState,
    dataset: &Dataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if dataset.image_shape() != config.input_shape {
        return Err(Error::invalid(format!(
            "dataset images are {:?} but the model expects {:?}",
            dataset.image_shape(),
            config.input_shape
        )));
    }
    let mut trainer = Trainer::new(config, schedule, state)?;
    trainer.metadata.insert("dataset".into(), dataset.name.clone().into());
    trainer.fit(dataset.to_matrix().view(), opts)
}

/// Continues training from `checkpoint` until `schedule.epochs` total epochs.
///
/// The schedule's seed and batch size must match the checkpoint's; other
/// fields (epochs, learning rate, cadences) may change.
pub fn resume(checkpoint: &Checkpoint, schedule: TrainSchedule, dataset: &Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    if dataset.image_shape() != checkpoint.model.input_shape {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            checkpoint.model.input_shape,
            dataset.image_shape()
        )));
    }
    schedule.validate()?;
    if schedule.seed != checkpoint.schedule.seed || schedule.batch_size != checkpoint.schedule.batch_size {
        return Err(Error::Checkpoint(format!(
            "resume must keep seed {} and batch size {} of the checkpoint",
            checkpoint.schedule.seed, checkpoint.schedule.batch_size
        )));
    }
    let mut trainer = Trainer::from_checkpoint(checkpoint)?;
    trainer.schedule = schedule;
    trainer.fit(dataset.to_matrix().view(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::models::Variant;

    fn mlp(shape: (usize, usize, usize), k: usize) -> ModelConfig {
        ModelConfig {
            input_shape: shape,
            latent_dim: k,
            variant: Variant::Mlp,
            dense_width: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lr_schedule_boundaries() {
        let s = TrainSchedule {
            lr_initial: 1e-4,
            lr_halve_every: 200,
            ..Default::default()
        };
        assert_eq!(lr_at(&s, 0), 1e-4);
        assert_eq!(lr_at(&s, 199), 1e-4);
        assert_eq!(lr_at(&s, 200), 5e-5);
        assert_eq!(lr_at(&s, 400), 2.5e-5);
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let b = epoch_batches(1003, 100, 7, 3);
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000);
        assert_ne!(epoch_batches(1003, 100, 7, 4), b);
        assert_eq!(epoch_batches(1003, 100, 7, 3), b);
        assert_eq!(epoch_batches(5, 100, 0, 0)[0].len(), 5);
    }

    #[test]
    fn one_epoch_emits_one_event_per_batch() {
        let ds = make_synthetic("ring", 1000, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            lr_initial: 1e-3,
            ..Default::default()
        };
        let out = train_first_stage(mlp((16, 16, 1), 4), schedule, BalancingState::computed(), &ds, &RunOptions::default())
            .unwrap();
        assert_eq!(out.metrics.len(), 10);
        assert!(out.metrics.windows(2).all(|w| w[1].gamma_sq <= w[0].gamma_sq));
        assert!(out.metrics.windows(2).all(|w| w[1].step == w[0].step + 1));
        for e in &out.metrics {
            // The recorded γ² is the per-pixel error at a new minimum, else below it.
            assert!(e.rec_term <= 0.5 * 256.0 * (1.0 + 1e-12));
        }
        assert_eq!(out.diagnostics.len(), 2);
    }

    #[test]
    fn fixed_beta_keeps_gamma_constant() {
        let ds = make_synthetic("ring", 300, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            ..Default::default()
        };
        let out = train_first_stage(mlp((16, 16, 1), 4), schedule, BalancingState::fixed_beta(1.0), &ds, &RunOptions::default())
            .unwrap();
        assert!(out.metrics.iter().all(|e| e.gamma_sq == 1.0));
        assert_eq!(out.checkpoint.balancing.step, 3);
    }

    #[test]
    fn mismatched_dataset_shape_errors() {
        let ds = make_synthetic("ring", 10, 1).unwrap();
        let err = train_first_stage(
            mlp((28, 28, 1), 4),
            TrainSchedule::default(),
            BalancingState::computed(),
            &ds,
            &RunOptions::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn nan_aborts_with_last_event() {
        let ds = make_synthetic("ring", 200, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 3,
            lr_initial: 1e-3,
            ..Default::default()
        };
        let mut t = Trainer::new(mlp((16, 16, 1), 4), schedule, BalancingState::computed()).unwrap();
        t.fit(ds.to_matrix().view(), &RunOptions::default()).unwrap();
        t.schedule.epochs = 4;
        t.vae.encoder.mu_head.bias.value.fill(f32::NAN);
        let err = t.fit(ds.to_matrix().view(), &RunOptions::default()).unwrap_err();
        match err {
            Error::NonFinite { detail, .. } => assert!(detail.contains("last metrics event")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn learned_gamma_moves_gamma() {
        let ds = make_synthetic("ring", 400, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 2,
            lr_initial: 1e-2,
            ..Default::default()
        };
        let out = train_first_stage(mlp((16, 16, 1), 4), schedule, BalancingState::learned(), &ds, &RunOptions::default())
            .unwrap();
        assert_eq!(out.metrics[0].gamma_sq, 1.0);
        assert!(out.metrics.last().unwrap().gamma_sq < 1.0);
        // The event records the γ² used in that step's loss.
        for w in out.metrics.windows(2) {
            assert!(w[1].gamma_sq <= w[0].gamma_sq * 1.5);
        }
    }
}
