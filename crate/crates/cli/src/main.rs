//! `balvae` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand};

use balvae::checkpoint::{Checkpoint, Stage};
use balvae::config::RunConfig;
use balvae::data::{Dataset, Split};
use balvae::diagnostics::{activity_timeline, read_records, ActivityTimeline, DiagnosticsRecord};
use balvae::evaluate::{evaluate, EvalOptions, EvalScores};
use balvae::loss::BalancingPolicy;
use balvae::models::Vae;
use balvae::plot::{save_png, Chart, Series};
use balvae::second_stage::{extract_latents, generate, model_from_checkpoint, train_second_stage};
use balvae::sweep::{format_summary, run_grid, summarize, summary_csv, GridOptions};
use balvae::train::{train_first_stage, RunOptions};

const CONFIG_ECHO: &str = "config.txt";
const SECOND_PREFIX: &str = "second-";

#[derive(Parser)]
#[command(name = "balvae", version, about = "Balanced VAE training, two-stage generation and latent diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Any configuration key can also be given as `--<key> <value>` (for example
/// `--train.lr 1e-3` or the shorthand `--lr 1e-3`); `--set key=value` is the
/// explicit form.
#[derive(Subcommand)]
enum Command {
    /// Train a first-stage model into a new run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use this directory instead of `<output.dir>/<timestamp>-<hash>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train the second-stage model on latent codes of a finished run.
    TrainSecond {
        #[arg(long)]
        run: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write generated images.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Rescale second-stage latents to unit variance (defaults to `eval.normalize`).
        #[arg(long)]
        normalize: Option<bool>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Png)]
        format: Format,
        /// Output directory (default: inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score reconstructions and samples against the test split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Plot the latent activity timeline recorded during training.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Train and evaluate a grid of balancing policies and learning rates over several seeds.
    ComparePolicies {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "computed,learned")]
        policies: Vec<BalancingPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Initial learning rates; each becomes its own grid column.
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        /// Run grid cells concurrently on the worker pool.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Png,
    Npy,
}

/// A failure and the exit code it maps to.
enum Failure {
    /// Bad arguments, configuration or missing inputs (exit 2).
    Usage(anyhow::Error),
    /// Anything that goes wrong once work has started (exit 1).
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = rewrite_overrides(std::env::args_os().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Turns `--<key> <value>` pairs that are not flags of the chosen subcommand
/// into `--set <key>=<value>`.
fn rewrite_overrides(args: Vec<OsString>) -> Vec<OsString> {
    let command = Cli::command();
    let Some(sub) = args
        .get(1)
        .and_then(|a| a.to_str())
        .and_then(|name| command.find_subcommand(name))
    else {
        return args;
    };
    if !sub.get_arguments().any(|a| a.get_id() == "set") {
        return args;
    }
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut out: Vec<OsString> = args[..2].to_vec();
    let mut rest = args[2..].iter();
    while let Some(arg) = rest.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            out.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if name.is_empty() || known.iter().any(|k| k == name) {
            out.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match rest.next() {
                Some(v) => v.to_string_lossy().into_owned(),
                // leave it for clap to reject
                None => {
                    out.push(arg.clone());
                    continue;
                }
            },
        };
        out.push("--set".into());
        out.push(format!("{name}={value}").into());
    }
    out
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, run_dir, set } => cmd_train(config.as_deref(), run_dir, &set),
        Command::TrainSecond { run, set } => cmd_train_second(&run, &set),
        Command::Generate {
            run,
            n,
            stage,
            normalize,
            seed,
            format,
            out,
        } => cmd_generate(&run, n, stage, normalize, seed, format, out),
        Command::Evaluate { run, set } => cmd_evaluate(&run, &set),
        Command::Diagnose { run, stage } => cmd_diagnose(&run, stage),
        Command::ComparePolicies {
            config,
            policies,
            seeds,
            lrs,
            parallel,
            run_dir,
            set,
        } => cmd_compare(config.as_deref(), &policies, &seeds, &lrs, parallel, run_dir, &set),
    }
}

fn apply_overrides(cfg: &mut RunConfig, set: &[String]) -> anyhow::Result<()> {
    for item in set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
        cfg.set(k, v)?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>, set: &[String]) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_config(run: &Path, set: &[String]) -> anyhow::Result<RunConfig> {
    let path = run.join(CONFIG_ECHO);
    if !path.is_file() {
        return Err(anyhow!("{} is not a run directory (no {CONFIG_ECHO})", run.display()));
    }
    load_config(Some(&path), set)
}

fn load_checkpoint(run: &Path, prefix: &str) -> anyhow::Result<Checkpoint> {
    let path = run.join(format!("{prefix}final.ckpt"));
    if !path.is_file() {
        return Err(anyhow!("missing checkpoint {}", path.display()));
    }
    Ok(Checkpoint::load(&path)?)
}

fn load_models(run: &Path, second: bool) -> anyhow::Result<(Vae, Option<Vae>)> {
    let first = model_from_checkpoint(&load_checkpoint(run, "")?, Stage::First)?;
    let second = if second {
        Some(model_from_checkpoint(&load_checkpoint(run, SECOND_PREFIX)?, Stage::Second)?)
    } else {
        None
    };
    Ok((first, second))
}

fn load_data(cfg: &RunConfig, split: Split) -> anyhow::Result<Dataset> {
    let data = cfg.load_data(split)?;
    if data.image_shape() != cfg.model.input_shape {
        return Err(anyhow!(
            "config key `model.input_shape`: dataset images are {:?}, model expects {:?}",
            data.image_shape(),
            cfg.model.input_shape
        ));
    }
    Ok(data)
}

/// `<root>/<UTC timestamp>-<hash><suffix>`, made unique if it already exists.
fn fresh_dir(root: &Path, hash: &str, suffix: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{hash}{suffix}"));
    let mut dir = base.clone();
    let mut i = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    Ok(dir)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("write {}", path.display()))
}

fn cmd_train(config: Option<&Path>, run_dir: Option<PathBuf>, set: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, set).usage()?;
    let data = load_data(&cfg, Split::Train).usage()?;
    let dir = match run_dir {
        Some(d) => d,
        None => fresh_dir(&cfg.output_dir, &cfg.hash(), "").runtime()?,
    };
    create_dir(&dir).runtime()?;
    write(&dir.join(CONFIG_ECHO), cfg.echo()).runtime()?;
    log::info!(
        "training {} on {} ({} images) with policy {}",
        cfg.model.variant,
        data.name,
        data.len(),
        cfg.policy
    );
    let opts = RunOptions::in_dir(&dir, cfg.exec);
    let outcome = train_first_stage(cfg.model.clone(), cfg.train.clone(), cfg.initial_state(), &data, &opts).runtime()?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("finished: raw_mse {:.5} gamma_sq {:.3e}", last.raw_mse, last.gamma_sq);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_train_second(run: &Path, set: &[String]) -> Result<(), Failure> {
    let cfg = run_config(run, set).usage()?;
    let ckpt = load_checkpoint(run, "").usage()?;
    let data = load_data(&cfg, Split::Train).usage()?;
    if !set.is_empty() {
        write(&run.join(format!("{SECOND_PREFIX}{CONFIG_ECHO}")), cfg.echo()).runtime()?;
    }
    let first = model_from_checkpoint(&ckpt, Stage::First).runtime()?;
    let latents = extract_latents(&first, data.to_matrix().view(), cfg.extract, cfg.train.seed, cfg.exec).runtime()?;
    let opts = RunOptions {
        out_dir: Some(run.to_path_buf()),
        prefix: SECOND_PREFIX.into(),
        exec: cfg.exec,
    };
    let second = cfg.second_stage();
    log::info!(
        "second stage: {} latent codes, {} epochs, lr {:e}",
        latents.nrows(),
        second.schedule.epochs,
        second.schedule.lr_initial
    );
    train_second_stage(latents.view(), &second, &opts).runtime()?;
    println!("{}", run.display());
    Ok(())
}

fn cmd_generate(
    run: &Path,
    n: usize,
    stage: u8,
    normalize: Option<bool>,
    seed: u64,
    format: Format,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = run_config(run, &[]).usage()?;
    if n == 0 {
        return Err(Failure::Usage(anyhow!("--n must be positive")));
    }
    let (first, second) = load_models(run, stage == 2).usage()?;
    let normalize = stage == 2 && normalize.unwrap_or(cfg.normalize);
    let generated = generate(&first, second.as_ref(), n, normalize, seed, cfg.exec).runtime()?;
    let dir = out.unwrap_or_else(|| {
        let tag = if stage == 2 && !normalize { "-raw" } else { "" };
        run.join(format!("samples-stage{stage}-seed{seed}{tag}"))
    });
    create_dir(&dir).runtime()?;
    let shape = first.config.input_shape;
    let files: Vec<String> = match format {
        Format::Png => {
            let mut names = Vec::with_capacity(n);
            for (i, img) in generated.images.outer_iter().enumerate() {
                let name = format!("sample-{i:04}.png");
                save_png(&img.to_vec(), shape, &dir.join(&name)).runtime()?;
                names.push(name);
            }
            names
        }
        Format::Npy => {
            let (h, w, c) = shape;
            let images = generated
                .images
                .into_shape_with_order((n, c, h, w))
                .map_err(|e| anyhow!(e))
                .runtime()?;
            balvae::npy::write_f32(&dir.join("samples.npy"), &images.into_dyn()).runtime()?;
            vec!["samples.npy".into()]
        }
    };
    let manifest = serde_json::json!({
        "run": run,
        "stage": stage,
        "n": n,
        "seed": seed,
        "normalize": normalize,
        "format": match format { Format::Png => "png", Format::Npy => "npy" },
        "image_shape": [shape.0, shape.1, shape.2],
        "layout": "NCHW",
        "files": files,
    });
    write(&dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).unwrap()).runtime()?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_evaluate(run: &Path, set: &[String]) -> Result<(), Failure> {
    let cfg = run_config(run, set).usage()?;
    let has_second = run.join(format!("{SECOND_PREFIX}final.ckpt")).is_file();
    let (first, second) = load_models(run, has_second).usage()?;
    let test = load_data(&cfg, Split::Test).usage()?;
    let extractor = cfg.extractor.build(&test).usage()?;
    let opts = EvalOptions {
        n_gen: cfg.n_gen,
        normalize: cfg.normalize,
        seed: cfg.train.seed,
        threshold: cfg.train.inactive_threshold,
        exec: cfg.exec,
    };
    let scores = evaluate(&first, second.as_ref(), &test, extractor.as_ref(), &opts).runtime()?;
    let csv = format!("{}\n{}\n", EvalScores::csv_header(), scores.csv_row());
    write(&run.join("eval.csv"), csv).runtime()?;
    write(&run.join("eval.json"), serde_json::to_vec_pretty(&scores).unwrap()).runtime()?;
    print!("{}", score_table(&scores));
    Ok(())
}

fn score_table(s: &EvalScores) -> String {
    let gen2 = s.gen2.map_or("-".to_string(), |v| format!("{v:.4}"));
    let cols = EvalScores::COLUMNS;
    format!(
        "features: {}\n{:>12} {:>12} {:>12} {:>12} {:>13}\n{:>12.4} {:>12.4} {:>12} {:>12.6} {:>13.3}\ninactive {} / active {}\n",
        s.extractor,
        cols[0],
        cols[1],
        cols[2],
        cols[3],
        cols[4],
        s.rec,
        s.gen1,
        gen2,
        s.mse,
        s.variance_law,
        s.inactive_count,
        s.active_count
    )
}

fn timeline_charts(records: &[DiagnosticsRecord], timeline: &ActivityTimeline) -> (Chart, Chart) {
    let mut activity = Chart::new("Latent activity", "epoch", "mean posterior variance");
    activity.reference = Some(timeline.threshold);
    for (z, series) in timeline.series.iter().enumerate() {
        activity.series.push(Series {
            name: format!("z{z}"),
            points: timeline.epochs.iter().map(|&e| e as f64).zip(series.iter().copied()).collect(),
        });
    }
    let mut law = Chart::new("Variance law", "epoch", "mean mu^2 + mean sigma^2");
    law.reference = Some(1.0);
    law.series.push(Series {
        name: "variance law".into(),
        points: records.iter().map(|r| (r.epoch as f64, r.variance_law)).collect(),
    });
    (activity, law)
}

fn cmd_diagnose(run: &Path, stage: u8) -> Result<(), Failure> {
    let prefix = if stage == 2 { SECOND_PREFIX } else { "" };
    let path = run.join(format!("{prefix}diagnostics.jsonl"));
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("missing {}", path.display())));
    }
    let mut records = read_records(&path).runtime()?;
    if records.is_empty() {
        return Err(Failure::Usage(anyhow!("{} holds no records", path.display())));
    }
    records.sort_by_key(|r| r.step);
    let timeline = activity_timeline(&records);
    let (activity, law) = timeline_charts(&records, &timeline);
    activity.save(&run.join(format!("{prefix}activity.svg"))).runtime()?;
    law.save(&run.join(format!("{prefix}variance_law.svg"))).runtime()?;
    let last = records.last().unwrap();
    let activated = timeline.activated();
    let summary = serde_json::json!({
        "timeline": timeline,
        "activated": activated,
        "final": last,
    });
    write(&run.join(format!("{prefix}timeline.json")), serde_json::to_vec_pretty(&summary).unwrap()).runtime()?;
    println!(
        "epoch {} step {}: variance law {:.3}, {} inactive / {} active (threshold {})",
        last.epoch, last.step, last.variance_law, last.inactive_count, last.active_count, last.threshold
    );
    println!("variables activated during training: {activated:?}");
    Ok(())
}

fn cmd_compare(
    config: Option<&Path>,
    policies: &[BalancingPolicy],
    seeds: &[u64],
    lrs: &[f64],
    parallel: bool,
    run_dir: Option<PathBuf>,
    set: &[String],
) -> Result<(), Failure> {
    let base = load_config(config, set).usage()?;
    if policies.is_empty() || seeds.is_empty() {
        return Err(Failure::Usage(anyhow!("need at least one policy and one seed")));
    }
    load_data(&base, Split::Train).usage()?;
    let lr_column: Vec<Option<f64>> = if lrs.is_empty() { vec![None] } else { lrs.iter().copied().map(Some).collect() };
    let mut cells = Vec::new();
    for &policy in policies {
        for &lr in &lr_column {
            let mut cfg = base.clone();
            cfg.policy = policy;
            let mut label = policy.to_string();
            if let Some(lr) = lr {
                cfg.train.lr_initial = lr;
                label = format!("{label} lr={lr:e}");
            }
            cfg.validate().usage()?;
            cells.push((label, cfg));
        }
    }
    let dir = match run_dir {
        Some(d) => d,
        None => fresh_dir(&base.output_dir, &base.hash(), "-sweep").runtime()?,
    };
    create_dir(&dir).runtime()?;
    write(&dir.join(CONFIG_ECHO), base.echo()).runtime()?;
    let opts = GridOptions {
        out_root: Some(dir.clone()),
        parallel_runs: parallel,
    };
    let runs = run_grid(&cells, seeds, &opts).runtime()?;
    let rows = summarize(&runs);
    write(&dir.join("runs.json"), serde_json::to_vec_pretty(&runs).unwrap()).runtime()?;
    write(&dir.join("summary.csv"), summary_csv(&rows)).runtime()?;
    print!("{}", format_summary(&rows));
    println!("{}", dir.display());
    Ok(())
}
