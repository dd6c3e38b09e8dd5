//! `superevents` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or argument error, 2 I/O error, 3 numeric
//! failure (diverged training or a failing gradient check).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use superevents::checkpoint::Checkpoint;
use superevents::data::Dataset;
use superevents::error::Error;
use superevents::eval::evaluate;
use superevents::exec::Execution;
use superevents::gradcheck::{gradcheck, GradcheckInstance};
use superevents::model::Variant;
use superevents::synth::{generate_synthetic, rule_satisfaction, SynthConfig};
use superevents::training::{ModelState, TrainConfig};
use superevents::tsf::{center_position, width_scale};

const FILTERS_SCHEMA: &str = "superevents.filters/1";

#[derive(Parser)]
#[command(name = "superevents", version, about = "Super-event temporal activity detection")]
struct Cli {
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-rule dataset.
    Synth(SynthArgs),
    /// Train a detector and write a checkpoint.
    Train(TrainArgs),
    /// Report frame-level AP of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck(GradcheckArgs),
    /// Write per-class combined filters of a checkpoint as JSON.
    ExportFilters(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives train.json, test.json and the data files.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training videos.
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    test_videos: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; only --iters may change its settings.
    #[arg(long, conflicts_with_all = ["config", "variant", "lr", "batch", "filters", "gaussians", "dropout", "seed", "relative_len", "decay_every"])]
    resume: Option<PathBuf>,
    /// JSON file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lr: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Shared filter count M.
    #[arg(long)]
    filters: Option<usize>,
    /// Cauchy distributions per filter N.
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Kernel length L of the relative variant.
    #[arg(long = "L")]
    relative_len: Option<usize>,
    /// Steps between tenfold learning-rate decays.
    #[arg(long)]
    decay_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "attended")]
    variant: Variant,
    /// Seed of the first instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Frames at which filters are materialized.
    #[arg(long = "T")]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    Ok(serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.seed => cfg.seed);
    set!(args.videos => cfg.num_videos);
    set!(args.test_videos => cfg.test_videos);
    set!(args.min_frames => cfg.frames_range[0]);
    set!(args.max_frames => cfg.frames_range[1]);
    set!(args.dim => cfg.feature_dim);
    set!(args.sigma => cfg.noise_sigma);

    let out = generate_synthetic(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    let mut stdout = io::stdout().lock();
    let mut splits = vec![("train", &out.train)];
    if let Some(test) = &out.test {
        splits.push(("test", test));
    }
    for (name, data) in splits {
        let path = data.save(&args.out, name)?;
        writeln!(stdout, "manifest {}", path.display())?;
        writeln!(
            stdout,
            "  videos {}  classes {}  features {}  frames {}",
            data.videos.len(),
            data.classes(),
            data.feature_dim,
            data.total_frames()
        )?;
        for (c, rate) in data.positive_rates().iter().enumerate() {
            writeln!(stdout, "  positive rate {:<10} {:.4}", data.class_names[c], rate)?;
        }
        let (ok, total) = rule_satisfaction(data, &cfg.paired_rules);
        let pct = if total == 0 { 100.0 } else { 100.0 * ok as f64 / total as f64 };
        writeln!(stdout, "  paired rules satisfied {ok}/{total} ({pct:.2}%)")?;
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.variant => cfg.variant);
    set!(args.lr => cfg.lr);
    set!(args.iters => cfg.iterations);
    set!(args.batch => cfg.batch_size);
    set!(args.filters => cfg.filters);
    set!(args.gaussians => cfg.distributions);
    set!(args.dropout => cfg.dropout);
    set!(args.seed => cfg.seed);
    set!(args.relative_len => cfg.relative_len);
    set!(args.decay_every => cfg.lr_decay_every);
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs, exec: Execution) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let mut state = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.class_names != data.class_names {
                bail!(Error::Dataset("checkpoint class names differ from the dataset's".into()));
            }
            let mut state = ck.state;
            if let Some(n) = args.iters {
                state.config.iterations = n;
            }
            state
        }
        None => ModelState::new(train_config(&args)?, data.feature_dim, data.classes())?,
    };
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "iter,lr,loss")?;
    let mut write_err = None;
    let run = state.run(&data, exec, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(stdout, "{},{},{}", r.iteration + 1, r.lr, r.loss) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    run?;
    stdout.flush()?;
    Checkpoint::new(state.clone(), data.class_names.clone())?.save(&args.out)?;
    let report = evaluate(&state.model, &data, exec)?;
    eprintln!("train mAP {}", report.map);
    Ok(())
}

fn eval(args: EvalArgs, exec: Execution) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let mut report = evaluate(&ck.state.model, &data, exec)?;
    report.config = Some(serde_json::to_value(&ck.state.config)?);
    let mut stdout = io::stdout().lock();
    if args.json {
        serde_json::to_writer_pretty(&mut stdout, &report)?;
        writeln!(stdout)?;
    } else {
        write!(stdout, "{}", report.to_table())?;
    }
    Ok(())
}

/// Raised when a gradient check fails.
#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn gradcheck_cmd(args: GradcheckArgs, exec: Execution) -> Result<()> {
    let mut stdout = io::stdout().lock();
    let mut all_passed = true;
    let mut reports = Vec::new();
    for seed in args.seed..args.seed + args.instances {
        let inst = GradcheckInstance::random(args.variant, seed);
        let report = gradcheck(&inst, exec)?;
        all_passed &= report.passed;
        if !args.json {
            let s = report.shape;
            writeln!(
                stdout,
                "{} seed {seed}: T={} D={} C={} M={} N={} L={}",
                args.variant, report.frames, s.features, s.classes, s.filters, s.distributions, s.relative_len
            )?;
            for g in &report.groups {
                writeln!(
                    stdout,
                    "  {:<18} {:>5} params  max rel error {:.3e}  {}",
                    g.group.name(),
                    g.params,
                    g.max_rel_error,
                    if g.passed { "ok" } else { "FAIL" }
                )?;
            }
        }
        reports.push(report);
    }
    if args.json {
        serde_json::to_writer_pretty(&mut stdout, &reports)?;
        writeln!(stdout)?;
    } else {
        writeln!(stdout, "{}", if all_passed { "passed" } else { "FAILED" })?;
    }
    if !all_passed {
        bail!(GradcheckFailed);
    }
    Ok(())
}

#[derive(Serialize)]
struct FilterExport {
    /// Center positions `x̂` in frames.
    centers: Vec<f64>,
    /// Width scales `γ̂`.
    widths: Vec<f64>,
}

#[derive(Serialize)]
struct FiltersFile {
    schema: &'static str,
    variant: Variant,
    #[serde(rename = "T")]
    frames: usize,
    class_names: Vec<String>,
    /// Softmax attention rows `C×M`; absent for per-class filters.
    attention: Option<Vec<Vec<f64>>>,
    filters: Vec<FilterExport>,
    /// Per class, a `T×N` matrix.
    combined: Vec<Vec<Vec<f64>>>,
}

fn export_filters(args: ExportArgs) -> Result<()> {
    if args.frames == 0 {
        bail!(Error::InvalidArgument("--T must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.model)?;
    let model = &ck.state.model;
    let combined = model
        .combined_filters(args.frames)?
        .into_iter()
        .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect();
    let attention = match &model.attention {
        Some(a) => Some(a.softmax()?.rows().into_iter().map(|r| r.to_vec()).collect()),
        None => None,
    };
    let filters = model
        .filters
        .iter()
        .map(|f| FilterExport {
            centers: f.centers.iter().map(|&x| center_position(x, args.frames)).collect(),
            widths: f.widths.iter().map(|&g| width_scale(g)).collect(),
        })
        .collect();
    let file = FiltersFile {
        schema: FILTERS_SCHEMA,
        variant: model.variant,
        frames: args.frames,
        class_names: ck.class_names.clone(),
        attention,
        filters,
        combined,
    };
    write_json(&args.out, &file)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        if e.is_io() {
            return 2;
        }
        if e.is_numeric() {
            return 3;
        }
        return 1;
    }
    if err.downcast_ref::<io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a).context("synth"),
        Command::Train(a) => train(a, exec).context("train"),
        Command::Eval(a) => eval(a, exec).context("eval"),
        Command::Gradcheck(a) => gradcheck_cmd(a, exec).context("gradcheck"),
        Command::ExportFilters(a) => export_filters(a).context("export-filters"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
