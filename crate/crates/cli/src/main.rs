//! `luna`: preprocessing, synthetic data, pre-training, fine-tuning, cost
//! sweeps and query inspection.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

mod settings;

use clap::{Args, Parser, Subcommand};
use luna_core::bench::{self, Axis, CostModel, Point, SweepOptions};
use luna_core::io;
use luna_core::signal::{preprocess, MontageLayout, PreprocessConfig};
use luna_core::synth::{synth_eeg, Dataset, SynthConfig};
use luna_core::train::{finetune, pretrain, FinetuneOptions, PretrainOptions};
use luna_core::{Luna, LunaError, ModelSize};
use settings::RunConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "luna", version, about = "Topology-agnostic EEG encoder toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "LUNA_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, resample, window and normalize a directory of recordings.
    Preprocess(PreprocessArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Masked-reconstruction pre-training; writes a checkpoint and loss trace.
    Pretrain(PretrainArgs),
    /// Train a classification head; writes a checkpoint and metrics.
    Finetune(FinetuneArgs),
    /// FLOP and memory sweep of the encoder against attention baselines.
    Bench(BenchArgs),
    /// Per-query channel affinities of one segment.
    InspectQueries(InspectArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Directory of raw `.seg` recordings.
    #[arg(long)]
    input: PathBuf,
    /// Montage file describing the recordings.
    #[arg(long)]
    montage: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Power-line frequency to notch (50 or 60, 0 disables).
    #[arg(long)]
    notch: Option<f64>,
    /// Window length in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Target sampling rate in Hz.
    #[arg(long)]
    rate: Option<f64>,
    /// Derive the 20-channel longitudinal bipolar montage.
    #[arg(long)]
    bipolar: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Built-in montage (standard_1020, double_banana, seed62) or a montage file.
    #[arg(long, default_value = "double_banana")]
    montage: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: PathBuf,
    /// Label segments with 2 or 3 spectrally distinct classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    output: PathBuf,
    /// Loss-trace CSV (default: the checkpoint path with `.loss.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    size: Option<ModelSize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    output: PathBuf,
    /// Metrics CSV (default: the output path with `.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hold out every n-th segment for validation (0 keeps all).
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// channels or patches
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated, strictly increasing grid.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Comma-separated cost models.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    size: Option<ModelSize>,
    #[arg(long)]
    output: PathBuf,
    /// Also write a gnuplot script here.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Use analytic counts for every point.
    #[arg(long)]
    no_measure: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    segment: PathBuf,
    /// Montage file of the segment.
    #[arg(long)]
    montage: PathBuf,
    /// CSV destination (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Tag a core error with the stage it came from.
fn at<T>(stage: &str, r: luna_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure {
        code: match e {
            LunaError::Divergence { .. } => 3,
            _ => 2,
        },
        message: format!("{stage}: {e}"),
    })
}

fn write_text(stage: &str, path: &Path, text: &str) -> Result<(), Failure> {
    at(stage, std::fs::write(path, text).map_err(LunaError::from))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("luna: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&cfg, a),
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Pretrain(a) => cmd_pretrain(cfg, a),
        Command::Finetune(a) => cmd_finetune(cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::InspectQueries(a) => cmd_inspect(a),
    }
}

fn cmd_preprocess(cfg: &RunConfig, a: PreprocessArgs) -> Result<(), Failure> {
    let notch = a.notch.unwrap_or(cfg.preprocess.notch);
    if ![0.0, 50.0, 60.0].contains(&notch) {
        return Err(usage(format!("--notch must be 50, 60 or 0, got {notch}")));
    }
    let pc = PreprocessConfig {
        band: cfg.preprocess.band,
        notch: (notch > 0.0).then_some(notch),
        target_rate: a.rate.unwrap_or(cfg.preprocess.rate),
        window_seconds: a.window.unwrap_or(cfg.preprocess.window),
        bipolar: a.bipolar || cfg.preprocess.bipolar,
    };
    let montage = Arc::new(at("reading montage", io::read_montage(&a.montage))?);
    let raw = at("reading recordings", read_recordings(&a.input, montage.clone()))?;
    let mut segments = Vec::new();
    for (path, rec) in raw {
        let out = at(&format!("preprocessing {}", path.display()), preprocess(&rec, &pc))?;
        segments.extend(out);
    }
    let Some(first) = segments.first() else {
        return at(
            "preprocessing",
            Err(LunaError::Config("no complete window in any recording".into())),
        );
    };
    let data = Dataset {
        montage: first.montage.clone(),
        segments,
    };
    at("writing dataset", io::write_dataset(&a.output, &data))?;
    eprintln!("wrote {} segments to {}", data.len(), a.output.display());
    Ok(())
}

fn read_recordings(
    dir: &Path,
    montage: Arc<MontageLayout>,
) -> luna_core::Result<Vec<(PathBuf, luna_core::signal::EegSegment)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == io::SEGMENT_EXT))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| io::read_segment(&p, montage.clone()).map(|s| (p, s)))
        .collect()
}

fn builtin_montage(name: &str) -> luna_core::Result<MontageLayout> {
    match name {
        "standard_1020" => Ok(MontageLayout::standard_1020()),
        "double_banana" => Ok(MontageLayout::double_banana()),
        "seed62" => Ok(MontageLayout::seed62()),
        path => io::read_montage(path),
    }
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Result<(), Failure> {
    if a.classes.is_some_and(|k| !(2..=3).contains(&k)) {
        return Err(usage("--classes must be 2 or 3"));
    }
    let montage = Arc::new(at("reading montage", builtin_montage(&a.montage))?);
    let sc = SynthConfig {
        n_classes: a.classes,
        ..SynthConfig::default()
    };
    let data = at("generating", synth_eeg(montage, a.n, a.seed.unwrap_or(cfg.seed), &sc))?;
    at("writing dataset", io::write_dataset(&a.output, &data))?;
    eprintln!("wrote {} segments to {}", data.len(), a.output.display());
    Ok(())
}

fn cmd_pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<(), Failure> {
    if let Some(s) = a.size {
        cfg.size = s;
    }
    let p = &mut cfg.pretrain;
    if let Some(v) = a.steps {
        p.steps = v;
    }
    if let Some(v) = a.lr {
        p.peak_lr = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let opts = PretrainOptions {
        schedule: p.schedule(),
        loss: p.loss(),
        steps: p.steps,
        seed,
    };
    if let Err(e) = opts.schedule.validate().and(opts.loss.validate()) {
        return Err(usage(e.to_string()));
    }
    let data = at("reading dataset", io::read_dataset(&a.data))?;
    let mut model = match &a.init {
        Some(path) => at("reading checkpoint", io::read_checkpoint(path))?,
        None => Luna::new(cfg.model(), seed).map_err(|e| usage(e.to_string()))?,
    };
    let trace = at("pre-training", pretrain(&mut model, &data, &opts))?;
    at("writing checkpoint", io::write_checkpoint(&a.output, &model))?;
    let trace_path = a.trace.unwrap_or_else(|| with_suffix(&a.output, ".loss.csv"));
    write_text("writing loss trace", &trace_path, &io::loss_trace_csv(&trace))?;
    if let (Some(f), Some(l)) = (trace.first(), trace.last()) {
        let alpha = opts.loss.alpha;
        eprintln!(
            "step 1 loss {:.4}, step {} loss {:.4}",
            f.total(alpha),
            l.step,
            l.total(alpha)
        );
    }
    Ok(())
}

fn cmd_finetune(mut cfg: RunConfig, a: FinetuneArgs) -> Result<(), Failure> {
    let f = &mut cfg.finetune;
    if let Some(v) = a.epochs {
        f.epochs = v;
    }
    if a.max_steps.is_some() {
        f.max_steps = a.max_steps;
    }
    if let Some(v) = a.lr {
        f.peak_lr = v;
    }
    if let Some(v) = a.batch_size {
        f.batch_size = v;
    }
    if let Some(v) = a.val_every {
        f.val_every = v;
    }
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    let data = at("reading dataset", io::read_dataset(&a.data))?;
    let (train, val) = if f.val_every > 1 {
        let (t, v) = data.split_every(f.val_every);
        (t, (!v.is_empty()).then_some(v))
    } else {
        (data, None)
    };
    let opts = FinetuneOptions {
        schedule: f.schedule(train.len()),
        epochs: f.epochs,
        max_steps: f.max_steps,
        seed: a.seed.unwrap_or(cfg.seed),
        freeze_decoder: f.freeze_decoder,
    };
    if let Err(e) = opts.schedule.validate() {
        return Err(usage(e.to_string()));
    }
    let mut model = at("reading checkpoint", io::read_checkpoint(&a.checkpoint))?;
    let report = at(
        "fine-tuning",
        finetune(&mut model, &train, val.as_ref(), a.classes, &opts),
    )?;
    at("writing checkpoint", io::write_checkpoint(&a.output, &model))?;
    let mut csv = String::from("split,accuracy,balanced_accuracy,auroc,auc_pr,cohen_kappa,weighted_f1\n");
    let rows = std::iter::once(("train", report.train)).chain(report.validation.map(|m| ("validation", m)));
    for (split, m) in rows {
        let _ = writeln!(
            csv,
            "{split},{},{},{},{},{},{}",
            m.accuracy, m.balanced_accuracy, m.auroc, m.auc_pr, m.cohen_kappa, m.weighted_f1
        );
    }
    let path = a.metrics.unwrap_or_else(|| with_suffix(&a.output, ".metrics.csv"));
    write_text("writing metrics", &path, &csv)?;
    eprintln!(
        "{} steps, best epoch {}, train balanced accuracy {:.3}",
        report.steps, report.best_epoch, report.train.balanced_accuracy
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, a: BenchArgs) -> Result<(), Failure> {
    let b = &cfg.bench;
    let axis: Axis = a
        .axis
        .as_deref()
        .unwrap_or(&b.axis)
        .parse()
        .map_err(|e: LunaError| usage(e.to_string()))?;
    let models = a
        .models
        .as_ref()
        .unwrap_or(&b.models)
        .iter()
        .map(|m| m.parse::<CostModel>())
        .collect::<luna_core::Result<Vec<_>>>()
        .map_err(|e| usage(e.to_string()))?;
    let mut model_cfg = cfg.model();
    if let Some(s) = a.size {
        model_cfg = luna_core::ModelConfig {
            precision: cfg.precision,
            ..luna_core::ModelConfig::preset(s)
        };
    }
    let mut opts = SweepOptions::new(axis, a.grid.unwrap_or_else(|| b.grid.clone()), model_cfg);
    opts.models = models;
    opts.fixed = Point {
        batch: b.batch,
        patches: b.patches,
        channels: b.channels,
    };
    opts.measure = b.measure && !a.no_measure;
    opts.memory_budget = b.memory_budget_mb << 20;
    opts.seed = cfg.seed;
    let report = bench::sweep(&opts).map_err(|e| usage(format!("bench: {e}")))?;
    write_text("writing sweep", &a.output, &report.to_csv())?;
    if let Some(plot) = &a.plot {
        write_text(
            "writing plot script",
            plot,
            &report.gnuplot(&a.output.display().to_string()),
        )?;
    }
    for f in &report.fits {
        eprintln!(
            "{:<17} exponent {:.3}  attention exponent {:.3}  affine R² {:.5}",
            f.model.name(),
            f.exponent,
            f.attention_exponent,
            f.affine_r2
        );
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let model = at("reading checkpoint", io::read_checkpoint(&a.checkpoint))?;
    let montage = Arc::new(at("reading montage", io::read_montage(&a.montage))?);
    let seg = at("reading segment", io::read_segment(&a.segment, montage.clone()))?;
    let inf = at("encoding", model.infer(&[&seg]))?;
    // affinity is [S, Q, C]; average the patches
    let shape = inf.affinity.shape().to_vec();
    let (s, q, c) = (shape[0], shape[1], shape[2]);
    let mut mean = vec![0.0; q * c];
    for row in inf.affinity.data().chunks(q * c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / s as f64;
        }
    }
    let mut csv = String::from("query");
    for l in montage.labels() {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for (i, row) in mean.chunks(c).enumerate() {
        csv.push_str(&i.to_string());
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    match &a.output {
        Some(p) => write_text("writing affinities", p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
