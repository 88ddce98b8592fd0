use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::s;

use reschunk::checkpoint;
use reschunk::config::RunConfig;
use reschunk::corpus::{check_window_shape, load_dir, make_windows, Corpus};
use reschunk::eval::{
    action_of, emit_table, evaluate_baseline, evaluate_windows, plot_prediction, run_ablation, AblationData,
    AblationVariant, ResultsTable, TableFormat,
};
use reschunk::model::predict;
use reschunk::motion_data::{read_sequence, save_sequence, synth_dataset, MotionSequence, Split, SynthConfig};
use reschunk::par::Execution;
use reschunk::rng::{stream, Stream};
use reschunk::training::{grad_check, grad_check_config, train};

#[derive(Parser)]
#[command(name = "reschunk", version, about = "Two-scale motion prediction with learned joint grouping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as MTF files.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// MPJPE of a checkpoint and the zero-velocity baseline.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants.
    Ablate(AblateArgs),
    /// Predict the continuation of one sequence.
    Predict(PredictArgs),
    /// Render ground truth and prediction as SVG stick figures.
    Plot(PlotArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    joints: usize,
    #[arg(long, default_value_t = 10)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 6.0)]
    seconds: f64,
    #[arg(long, default_value_t = 2)]
    groups: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let pairs = self
            .set
            .iter()
            .map(|kv| kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE")))
            .collect::<Result<Vec<_>>>()?;
        cfg = cfg.set_all(pairs)?;
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated: full, 1L, Fixed, 1ch, 4ch, 7ch, NoPONO.
    #[arg(long, default_value = "full,1L,Fixed,1ch,4ch,NoPONO")]
    variants: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MTF sequence; the observed frames are read from `--start`.
    #[arg(long)]
    input: PathBuf,
    /// First observed frame; defaults to the last `T` frames.
    #[arg(long)]
    start: Option<usize>,
    /// Output MTF with the predicted frames.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MTF sequence holding at least `T + p` frames from `--start`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// 0-based predicted frames to draw, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    frames: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

/// Fit joint count, dimension and fps to the data, then check the windowing.
fn bind_to_data(mut cfg: RunConfig, corpus: &Corpus) -> Result<RunConfig> {
    let fps = corpus.train.first().or(corpus.test.first()).map(|s| s.fps).context("empty corpus")?;
    cfg.model.joints = corpus.skeleton.joint_count;
    cfg.model.dim = corpus.skeleton.per_joint_dim;
    cfg.horizons.fps = fps;
    cfg.validate()?;
    check_window_shape(&cfg.windowing, fps, &cfg.model)?;
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) {
    println!("{}", cfg.to_text().trim_end());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let cfg = SynthConfig { groups: a.groups, ..Default::default() };
    let mut rng = stream(a.seed, Stream::Synth, 0);
    let seqs = synth_dataset(a.sequences, a.joints, a.fps, a.seconds, &cfg, &mut rng)?;
    for s in &seqs {
        save_sequence(a.out.join(format!("{}.mtf", s.name)), s)?;
    }
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let corpus = load_dir(&a.data)?;
    let cfg = bind_to_data(a.cfg.resolve()?, &corpus)?;
    print_config(&cfg);
    println!("seed = {}", a.seed);
    let tr = make_windows(&corpus.train, &cfg.windowing, Split::Train, a.seed)?;
    let va = make_windows(&corpus.validation, &cfg.windowing, Split::Validation, a.seed)?;
    let report = train(&tr, &va, &corpus.skeleton, &cfg.model, &cfg.optimizer, &cfg.horizons, a.seed, a.cfg.exec())?;
    checkpoint::save(&a.out, &report.params, &cfg.model)?;
    let log = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    write_text(&log, &report.log)?;
    println!(
        "trained {} steps over {} epochs; best epoch {}; checkpoint {}; log {}",
        report.step_losses.len(),
        report.epochs,
        report.best_epoch,
        a.out.display(),
        log.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (params, model) = checkpoint::load(&a.checkpoint)?;
    let corpus = load_dir(&a.data)?;
    let mut cfg = a.cfg.resolve()?;
    cfg.model = model;
    let cfg = bind_to_data(cfg, &corpus)?;
    print_config(&cfg);
    let windows = make_windows(corpus.split(a.split), &cfg.windowing, a.split, a.seed)?;
    if windows.is_empty() {
        bail!("no windows in the {:?} split", a.split);
    }
    let frames = cfg.horizons.frames(cfg.model.output_frames)?;
    let mut table = ResultsTable::new(cfg.horizons.sorted_ms());
    let mut actions: Vec<&str> = windows.iter().map(|w| action_of(&w.source_id)).collect();
    actions.sort_unstable();
    actions.dedup();
    for action in actions {
        let subset: Vec<_> = windows.iter().filter(|w| action_of(&w.source_id) == action).cloned().collect();
        let model = evaluate_windows(&params, &cfg.model, &subset, &corpus.skeleton, &frames, a.cfg.exec())?;
        let base = evaluate_baseline(&subset, &corpus.skeleton, &frames, a.cfg.exec())?;
        table.push("model", action, model)?;
        table.push("zero-velocity", action, base)?;
    }
    print!("{}", emit_table(&table, a.format));
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let corpus = load_dir(&a.data)?;
    let cfg = bind_to_data(a.cfg.resolve()?, &corpus)?;
    let variants = AblationVariant::parse_list(&a.variants)?;
    print_config(&cfg);
    println!("seed = {}", a.seed);
    let tr = make_windows(&corpus.train, &cfg.windowing, Split::Train, a.seed)?;
    let va = make_windows(&corpus.validation, &cfg.windowing, Split::Validation, a.seed)?;
    let te = make_windows(&corpus.test, &cfg.windowing, Split::Test, a.seed)?;
    let data = AblationData { train: &tr, validation: &va, test: &te, skeleton: &corpus.skeleton };
    let table = run_ablation(&data, &cfg.model, &cfg.optimizer, &cfg.horizons, &variants, a.seed, a.cfg.exec())?;
    let text = emit_table(&table, a.format);
    print!("{text}");
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    Ok(())
}

fn observed(seq: &MotionSequence, start: usize, t: usize, needed: usize) -> Result<ndarray::Array2<f64>> {
    if start + needed > seq.len() {
        bail!("{} has {} frames; need {needed} from frame {start}", seq.name, seq.len());
    }
    Ok(seq.frames.slice(s![start..start + t, ..]).to_owned())
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let (params, cfg) = checkpoint::load(&a.checkpoint)?;
    let seq = read_sequence(&a.input)?;
    let t = cfg.input_frames;
    let start = a.start.unwrap_or(seq.len().saturating_sub(t));
    let x0 = observed(&seq, start, t, t)?;
    let (y, partition) = predict(&x0, &params, &cfg)?;
    let mut out = MotionSequence::new(format!("{}_pred", seq.name), seq.skeleton.clone(), seq.fps, y)?;
    out.planted_groups = None;
    save_sequence(&a.out, &out)?;
    println!("grouping {}", partition.to_line());
    println!("wrote {} predicted frames to {}", cfg.output_frames, a.out.display());
    Ok(())
}

fn plot_cmd(a: &PlotArgs) -> Result<()> {
    let (params, cfg) = checkpoint::load(&a.checkpoint)?;
    let seq = read_sequence(&a.input)?;
    let (t, p) = (cfg.input_frames, cfg.output_frames);
    let x0 = observed(&seq, a.start, t, t + p)?;
    let gt = seq.frames.slice(s![a.start + t..a.start + t + p, ..]);
    let (y, _) = predict(&x0, &params, &cfg)?;
    let svg = plot_prediction(gt, y.view(), &seq.skeleton, &a.frames)?;
    write_text(&a.out, &svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let cfg = grad_check_config();
    println!("{}", RunConfig { model: cfg.clone(), ..Default::default() }.to_text().trim_end());
    let report = grad_check(&cfg, a.seed, a.tolerance)?;
    print!("{}", report.render());
    println!("max relative error {:.3e}", report.max_rel_error());
    if !report.passed() {
        bail!("gradient check failed for {}", report.flagged().join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
