//! `rsqair`: dataset generation, training, evaluation, rollout strips and
//! plots.
//!
//! Exit codes: 0 success, 1 invalid configuration or missing inputs, 2 I/O
//! failure, 3 numeric failure.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ballsim::{split_path, BallCount, Manifest};
use clap::{Args, Parser, Subcommand};
use rsqair::eval::{evaluate_protocol, generalization_eval, CheckpointInfo, FinalFrame, MetricsReport};
use rsqair::training::{load_model, load_sequences, Trainer, BEST_DIR, CHECKPOINT_DIR, MANIFEST_FILE};
use rsqair::viz::{bar_chart_svg, rollout_strip, Bar};
use rsqair::RelationalKind;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<rsqair::Error> for CliError {
    fn from(e: rsqair::Error) -> Self {
        use rsqair::Error as E;
        match e {
            E::Io(io) => CliError::Io(io),
            E::Dataset(d) => d.into(),
            E::NonFinite(_) | E::Candle(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ballsim::Error> for CliError {
    fn from(e: ballsim::Error) -> Self {
        match e {
            ballsim::Error::Io(io) => CliError::Io(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rsqair", version, about = "Relational sequential attend-infer-repeat on bouncing balls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every component stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the bouncing-balls splits and write them with a manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Number of frames per sequence.
        #[arg(long)]
        frames: Option<u32>,
        /// Ball count of the train, val and test splits.
        #[arg(long)]
        balls: Option<u8>,
        /// Inclusive ball-count range of the generalization split.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        balls_test: Option<Vec<u8>>,
        /// Sequences per split, overriding every split size.
        #[arg(long)]
        sequences: Option<u32>,
    },
    /// Train a model on the train split, validating every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (default: config file, then $RSQAIR_DATA_DIR, then ./data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = ["identity", "in", "rmc"])]
        relational: Option<String>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Absolute cap on optimizer steps.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Score checkpoints on a split and write a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run or checkpoint directories; repeat for several models.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Split to evaluate (`gen-test` for the generalization split).
        #[arg(long, default_value = "test")]
        dataset: String,
        #[arg(long)]
        samples: Option<usize>,
        /// Score posterior reconstructions of the final frame instead of prior samples.
        #[arg(long)]
        posterior: bool,
        /// Use only the first N sequences of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Also write bar charts of the report.
        #[arg(long)]
        plot: bool,
    },
    /// Export an image strip of observed frames and a prior continuation.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        dataset: String,
        /// Sequence index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Frames filtered before sampling from the prior (default: half).
        #[arg(long)]
        context: Option<usize>,
        /// Pixel upscaling of each panel.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Bar charts with error bars from one or more metrics reports.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    // Usage errors count as invalid configuration so exit 2 stays reserved for I/O.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateData { common, frames, balls, balls_test, sequences } => {
            cmd_generate(common, frames, balls, balls_test, sequences)
        }
        Command::Train { common, data, relational, resume, max_iterations } => {
            cmd_train(common, data, relational, resume, max_iterations)
        }
        Command::Eval { common, data, checkpoints, dataset, samples, posterior, limit, plot } => {
            cmd_eval(common, data, checkpoints, &dataset, samples, posterior, limit, plot)
        }
        Command::Rollout { common, data, checkpoint, dataset, index, context, scale } => {
            cmd_rollout(common, data, checkpoint, &dataset, index, context, scale)
        }
        Command::Plot { common, reports } => cmd_plot(common, reports),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// `--out`, then the config's `out`, then `fallback`.
fn output_dir(cfg: &mut RunConfig, common: &Common, fallback: &str) -> PathBuf {
    let dir = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(fallback));
    cfg.out = Some(dir.clone());
    dir
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!("{} already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

fn cmd_generate(
    common: Common,
    frames: Option<u32>,
    balls: Option<u8>,
    balls_test: Option<Vec<u8>>,
    sequences: Option<u32>,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    let data_flag = common.out.clone();
    let out = cfg.resolve_data_dir(data_flag);
    cfg.out = Some(out.clone());
    let g = &mut cfg.generate;
    if let Some(t) = frames {
        g.frames = t;
    }
    for split in &mut g.splits {
        if let Some(n) = sequences {
            split.sequences = n;
        }
        match (split.name.as_str(), balls, balls_test.as_deref()) {
            ("gen-test", _, Some(&[lo, hi])) => split.balls = BallCount::Range(lo, hi),
            ("gen-test", _, _) => {}
            (_, Some(b), _) => split.balls = BallCount::Fixed(b),
            _ => {}
        }
    }
    let manifest = ballsim::generate_dataset(&cfg.generate, &out, common.force)?;
    cfg.write(&out)?;
    for f in &manifest.files {
        println!("{:<9} {:>6} sequences  {}", f.split, f.sequences, out.join(&f.path).display());
    }
    Ok(())
}

fn read_split(data: &Path, split: &str, limit: Option<usize>) -> Result<Vec<rsqair::scene::FrameSequence>, CliError> {
    let path = split_path(data, split);
    if !path.exists() {
        return Err(CliError::Config(format!("missing dataset split {}", path.display())));
    }
    Ok(load_sequences(&path, limit)?)
}

fn cmd_train(
    common: Common,
    data: Option<PathBuf>,
    relational: Option<String>,
    resume: bool,
    max_iterations: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(kind) = relational {
        cfg.train.model.relational.kind = kind.parse::<RelationalKind>()?;
    }
    if let Some(cap) = max_iterations {
        cfg.train.max_iterations = Some(cap);
    }
    let data = cfg.resolve_data_dir(data);
    let fallback = format!("runs/{}", cfg.train.model.relational.kind);
    let out = output_dir(&mut cfg, &common, &fallback);
    let train = read_split(&data, "train", cfg.train.train_sequences)?;
    let val = read_split(&data, "val", cfg.train.val_sequences)?;

    let mut trainer = if resume {
        if !out.join(CHECKPOINT_DIR).join(MANIFEST_FILE).exists() {
            return Err(CliError::Config(format!("no checkpoint to resume under {}", out.display())));
        }
        let t = Trainer::resume(&out, train, val)?;
        // The checkpoint's own configuration wins; only the cap may change.
        cfg.train = rsqair::training::TrainConfig { max_iterations: cfg.train.max_iterations, ..t.config().clone() };
        t
    } else {
        refuse_overwrite(&out.join(CHECKPOINT_DIR), common.force)?;
        if common.force && out.exists() {
            for stale in [CHECKPOINT_DIR, BEST_DIR, rsqair::training::METRICS_FILE] {
                let p = out.join(stale);
                if p.is_dir() {
                    fs::remove_dir_all(&p)?;
                } else if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
        }
        Trainer::new(cfg.train.clone(), train, val, &out)?
    };
    cfg.write(&out)?;
    let start = trainer.iteration();
    let summary = trainer.run(cfg.train.max_iterations)?;
    println!(
        "trained {} from iteration {start} to {} ({} epochs, stopped by {:?}); best validation bound {}",
        if trainer.config().is_baseline() { "SQAIR baseline".to_string() } else { format!("R-SQAIR ({})", trainer.config().model.relational.kind) },
        summary.iterations,
        summary.epochs,
        summary.reason,
        summary.best_val.map_or("n/a".to_string(), |v| format!("{v:.3}")),
    );
    println!("checkpoints under {}", out.display());
    Ok(())
}

/// A run directory resolves to its best weights, then its latest checkpoint.
fn checkpoint_dir(path: &Path) -> Result<PathBuf, CliError> {
    let candidates = [path.to_path_buf(), path.join(BEST_DIR), path.join(CHECKPOINT_DIR)];
    let order = if path.join(MANIFEST_FILE).exists() { &candidates[..1] } else { &candidates[1..] };
    order
        .iter()
        .find(|d| d.join(MANIFEST_FILE).exists())
        .cloned()
        .ok_or_else(|| CliError::Config(format!("no checkpoint found at {}", path.display())))
}

/// Ball radius and contact tolerance recorded by the generator, if available.
fn apply_physics(cfg: &mut RunConfig, data: &Path) {
    if let Ok(m) = Manifest::read(data) {
        cfg.eval.radius = m.generator.physics.radius;
        cfg.eval.tolerance = m.generator.physics.contact_tolerance;
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: Common,
    data: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    dataset: &str,
    samples: Option<usize>,
    posterior: bool,
    limit: Option<usize>,
    plot: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = samples {
        cfg.eval.samples = s;
    }
    if posterior {
        cfg.eval.final_frame = FinalFrame::Posterior;
    }
    let data = cfg.resolve_data_dir(data);
    apply_physics(&mut cfg, &data);
    let out = output_dir(&mut cfg, &common, "eval");
    let report_path = out.join("report.json");
    refuse_overwrite(&report_path, common.force)?;

    let dirs = checkpoints.iter().map(|p| checkpoint_dir(p)).collect::<Result<Vec<_>, _>>()?;
    let mut models = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let (model, manifest) = load_model(dir)?;
        let info = CheckpointInfo {
            path: dir.display().to_string(),
            model: manifest.model.clone(),
            weights_sha256: manifest.weights_sha256.clone(),
        };
        models.push((model, info));
    }
    let seqs = read_split(&data, dataset, limit)?;
    let refs: Vec<_> = models.iter().map(|(m, i)| (m, i.clone())).collect();
    let report = if dataset == "gen-test" {
        generalization_eval(&refs, &seqs, &cfg.eval)?
    } else {
        evaluate_protocol(&refs, &seqs, dataset, &cfg.eval)?
    };
    cfg.write(&out)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&report_path, text)?;
    let fmt = |a: &rsqair::eval::Aggregate| match (a.mean, a.std, &a.note) {
        (Some(m), Some(s), _) => format!("{m:.3} ± {s:.3} ({} values)", a.raw.len()),
        (_, _, Some(note)) => note.clone(),
        _ => "n/a".into(),
    };
    println!("{dataset}: {} sequences, {} colliding at the final frame", report.sequences, report.colliding_sequences);
    println!("data log-likelihood       {}", fmt(&report.data_ll));
    println!("relational log-likelihood {}", fmt(&report.relational_ll));
    println!("report written to {}", report_path.display());
    if plot {
        write_plots(&[report], &out)?;
    }
    Ok(())
}

fn cmd_rollout(
    common: Common,
    data: Option<PathBuf>,
    checkpoint: PathBuf,
    dataset: &str,
    index: usize,
    context: Option<usize>,
    scale: u32,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    let data = cfg.resolve_data_dir(data);
    let out = output_dir(&mut cfg, &common, "rollout");
    let image_path = out.join(format!("rollout_{dataset}_{index}.png"));
    refuse_overwrite(&image_path, common.force)?;
    let (model, _) = load_model(&checkpoint_dir(&checkpoint)?)?;
    let seqs = read_split(&data, dataset, Some(index + 1))?;
    let seq = seqs.get(index).ok_or_else(|| CliError::Config(format!("{dataset} has no sequence {index}")))?;
    let context = context.unwrap_or((seq.len() / 2).max(1));
    let strip = rollout_strip(&model, seq, context, cfg.eval.seed)?;
    cfg.write(&out)?;
    strip.to_image(scale).save(&image_path).map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    println!(
        "{} panels per row ({context} filtered, {} sampled from the prior) written to {}",
        strip.observed.len(),
        strip.predicted.len() - context,
        image_path.display()
    );
    Ok(())
}

fn cmd_plot(common: Common, reports: Vec<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    let out = output_dir(&mut cfg, &common, "plots");
    refuse_overwrite(&out.join("data_ll.svg"), common.force)?;
    let mut parsed = Vec::with_capacity(reports.len());
    for path in &reports {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        parsed.push(report);
    }
    write_plots(&parsed, &out)
}

/// One bar per model tag and dataset, over all raw values of that group.
fn bars(reports: &[MetricsReport], relational: bool) -> Vec<Bar> {
    let datasets: std::collections::BTreeSet<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        let agg = if relational { &r.relational_ll } else { &r.data_ll };
        for raw in &agg.raw {
            let tag = &r.checkpoints[raw.model].model;
            let label = if datasets.len() > 1 { format!("{tag} ({})", r.dataset) } else { tag.clone() };
            groups.entry(label).or_default().push(raw.value);
        }
    }
    groups
        .into_iter()
        .filter_map(|(label, v)| rsqair::eval::mean_std(&v).map(|(mean, std)| Bar { label, mean, std }))
        .collect()
}

fn write_plots(reports: &[MetricsReport], out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    for (file, title, relational) in
        [("data_ll.svg", "Data log-likelihood", false), ("relational_ll.svg", "Relational log-likelihood", true)]
    {
        let path = out.join(file);
        fs::write(&path, bar_chart_svg(title, &bars(reports, relational)))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
