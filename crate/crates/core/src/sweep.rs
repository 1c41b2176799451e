//! Grids of training runs (policies, learning rates) over several seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions, EvalScores};
use crate::exec::Exec;
use crate::loss::BalancingPolicy;
use crate::second_stage::model_from_checkpoint;
use crate::checkpoint::Stage;
use crate::train::{train_first_stage, RunOptions};

/// One finished run of a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub label: String,
    pub seed: u64,
    pub scores: EvalScores,
    pub final_gamma_sq: f64,
    pub run_dir: Option<PathBuf>,
}

/// Aggregate over the seeds of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub rec: (f64, f64),
    pub mse: (f64, f64),
    pub variance_law: (f64, f64),
    pub inactive: (f64, f64),
    pub inactive_median: f64,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Groups runs by label, preserving first-appearance order.
pub fn summarize(runs: &[SweepRun]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.label == label).collect();
            let col = |f: &dyn Fn(&SweepRun) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let inactive = col(&|r| r.scores.inactive_count as f64);
            SummaryRow {
                label: label.to_string(),
                runs: group.len(),
                rec: mean_std(&col(&|r| r.scores.rec)),
                mse: mean_std(&col(&|r| r.scores.mse)),
                variance_law: mean_std(&col(&|r| r.scores.variance_law)),
                inactive: mean_std(&inactive),
                inactive_median: median(&inactive),
            }
        })
        .collect()
}

/// Console table in `mean ± std` style.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>4} {:>22} {:>22} {:>18} {:>14} {:>8}",
        "run", "n", "REC", "mse", "variance law", "inactive", "median"
    );
    for r in rows {
        let pm = |(m, s): (f64, f64), p: usize| format!("{m:.p$} ± {s:.p$}");
        let _ = writeln!(
            out,
            "{:<16} {:>4} {:>22} {:>22} {:>18} {:>14} {:>8.1}",
            r.label,
            r.runs,
            pm(r.rec, 4),
            pm(r.mse, 6),
            pm(r.variance_law, 3),
            pm(r.inactive, 1),
            r.inactive_median
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "run,n,rec_mean,rec_std,mse_mean,mse_std,variance_law_mean,variance_law_std,inactive_mean,inactive_std,inactive_median\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label, r.runs, r.rec.0, r.rec.1, r.mse.0, r.mse.1, r.variance_law.0, r.variance_law.1, r.inactive.0, r.inactive.1, r.inactive_median
        );
    }
    out
}

/// Options shared by every run of a grid.
#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Each run gets `<out_root>/<label>-seed<seed>`; `None` keeps runs in memory.
    pub out_root: Option<PathBuf>,
    /// Run grid cells on the worker pool (each run then computes sequentially).
    pub parallel_runs: bool,
}

fn run_one(label: &str, config: &RunConfig, seed: u64, out_root: Option<&Path>, exec: Exec) -> Result<SweepRun> {
    let mut cfg = config.clone();
    cfg.train.seed = seed;
    cfg.exec = exec;
    let train = cfg.load_data(Split::Train)?;
    let test = cfg.load_data(Split::Test)?;
    let run_dir = out_root.map(|r| r.join(format!("{label}-seed{seed}")));
    if let Some(d) = &run_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("create {}", d.display()), e))?;
        std::fs::write(d.join("config.txt"), cfg.echo()).map_err(|e| Error::io(format!("write {}", d.display()), e))?;
    }
    let opts = RunOptions {
        out_dir: run_dir.clone(),
        prefix: String::new(),
        exec,
    };
    let outcome = train_first_stage(cfg.model.clone(), cfg.train.clone(), cfg.initial_state(), &train, &opts)?;
    let vae = model_from_checkpoint(&outcome.checkpoint, Stage::First)?;
    let extractor = cfg.extractor.build(&test)?;
    let eval = EvalOptions {
        n_gen: cfg.n_gen,
        normalize: cfg.normalize,
        seed,
        threshold: cfg.train.inactive_threshold,
        exec,
    };
    let scores = evaluate(&vae, None, &test, extractor.as_ref(), &eval)?;
    Ok(SweepRun {
        label: label.to_string(),
        seed,
        scores,
        final_gamma_sq: outcome.checkpoint.balancing.gamma_sq,
        run_dir,
    })
}

/// Trains and evaluates every `(label, config)` for every seed.
pub fn run_grid(cells: &[(String, RunConfig)], seeds: &[u64], opts: &GridOptions) -> Result<Vec<SweepRun>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one configuration and one seed"));
    }
    let jobs: Vec<(&str, &RunConfig, u64)> = cells
        .iter()
        .flat_map(|(l, c)| seeds.iter().map(move |&s| (l.as_str(), c, s)))
        .collect();
    let root = opts.out_root.as_deref();
    if opts.parallel_runs {
        Exec::Parallel
            .map(jobs.len(), |i| {
                let (l, c, s) = jobs[i];
                run_one(l, c, s, root, Exec::Sequential)
            })
            .into_iter()
            .collect()
    } else {
        jobs.iter()
            .map(|&(l, c, s)| run_one(l, c, s, root, c.exec))
            .collect()
    }
}

/// One grid cell per balancing policy.
pub fn compare_policies(base: &RunConfig, policies: &[BalancingPolicy], seeds: &[u64], opts: &GridOptions) -> Result<Vec<SweepRun>> {
    let cells: Vec<(String, RunConfig)> = policies
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            c.policy = p;
            (p.to_string(), c)
        })
        .collect();
    run_grid(&cells, seeds, opts)
}

/// One grid cell per initial learning rate.
pub fn lr_sweep(base: &RunConfig, lrs: &[f64], seeds: &[u64], opts: &GridOptions) -> Result<Vec<SweepRun>> {
    let cells: Vec<(String, RunConfig)> = lrs
        .iter()
        .map(|&lr| {
            let mut c = base.clone();
            c.train.lr_initial = lr;
            (format!("lr={lr:e}"), c)
        })
        .collect();
    run_grid(&cells, seeds, opts)
}
