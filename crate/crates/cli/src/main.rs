use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csi_mtl::channel::{generate_dataset, load_dataset, save_dataset, ChannelDims, ScenarioDataset, ScenarioProfile, SplitCounts};
use csi_mtl::config::ExperimentConfig;
use csi_mtl::models::{build_model, load_checkpoint, save_checkpoint, CompressionConfig, CompressionRatio, FeedbackModel};
use csi_mtl::nn::Partition;
use csi_mtl::pipeline::{Nmse, NEG_INF_DB};
use csi_mtl::trainer::{
    combine_datasets, derive_seed, evaluate, evaluate_with, finetune, pretrain, resolve_datasets, run_experiment,
    train_single_task, EpochLog, ExperimentReport, RunOptions,
};
use csi_mtl::{Error, Result};

/// Exit code of a report with missing cells.
const EXIT_PARTIAL: u8 = 5;

#[derive(Parser)]
#[command(name = "csi-mtl", version, about = "Multi-task CSI feedback: data, training, evaluation and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one scenario dataset file.
    GenerateData(GenerateArgs),
    /// Pre-train on the combined small-size sets of every configured scenario.
    Pretrain(PretrainArgs),
    /// Fine-tune the decoder of a pre-trained checkpoint on one scenario.
    Finetune(FinetuneArgs),
    /// Train an independent model on one scenario.
    TrainSingle(SingleArgs),
    /// NMSE of an encoder/decoder pair on a dataset's test split.
    Evaluate(EvaluateArgs),
    /// Rebuild report.txt and results.csv from an experiment directory.
    Report(ReportArgs),
    /// Run the full strategy x scenario x CR grid.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    profile: String,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    antennas: usize,
    #[arg(long, default_value_t = 72)]
    subcarriers: usize,
    #[arg(long, default_value_t = 15e3)]
    spacing: f64,
}

#[derive(Args)]
struct PhaseCommon {
    #[arg(long)]
    config: PathBuf,
    /// Compression ratio; defaults to the first configured one.
    #[arg(long)]
    cr: Option<CompressionRatio>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: PhaseCommon,
    /// Dataset files; defaults to the configured scenarios.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Output directory for pretrained.ckpt and pretrain.log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: PhaseCommon,
    /// Pre-trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the decoder checkpoint and log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SingleArgs {
    #[command(flatten)]
    common: PhaseCommon,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint holding the encoder (a full or encoder-only checkpoint).
    #[arg(long)]
    encoder: PathBuf,
    /// Checkpoint holding the decoder; defaults to the encoder checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    decoder: Option<PathBuf>,
    /// Debug path: replace the decoder by an oracle returning the true channel.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    data: PathBuf,
    /// Append the result line to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    experiment: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent grid units; CSI_MTL_THREADS overrides it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn format_db(n: &Nmse) -> String {
    if n.db == NEG_INF_DB {
        "-inf".to_string()
    } else {
        format!("{:.2}", n.db)
    }
}

fn write_log(path: &Path, phase: &str, trace: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,loss,val_loss,seconds\n");
    for e in trace {
        let val = e.val_loss.map_or(String::new(), |v| format!("{v:.6e}"));
        s.push_str(&format!("{},{:.6e},{val},{:.3}\n", e.epoch, e.train_loss, e.seconds));
    }
    fs::write(path, s)?;
    if let Some(last) = trace.last() {
        println!("{phase}: {} epochs, final loss {:.6e}, {:.1} s", trace.len(), last.train_loss, last.seconds);
    }
    Ok(())
}

fn load_phase(common: &PhaseCommon) -> Result<(ExperimentConfig, CompressionRatio)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let cr = match common.cr {
        Some(cr) => cr,
        None => *cfg
            .crs
            .first()
            .ok_or_else(|| Error::Config("no compression ratio configured; pass --cr".into()))?,
    };
    Ok((cfg, cr))
}

fn check_data(ds: &ScenarioDataset, model: &CompressionConfig) -> Result<()> {
    if ds.sample_dims() != model.input_dims() {
        return Err(Error::Integrity(format!(
            "dataset `{}` has sample dims {:?}, model expects {:?}",
            ds.id,
            ds.sample_dims(),
            model.input_dims()
        )));
    }
    Ok(())
}

fn model_for(cfg: &ExperimentConfig, cr: CompressionRatio, seed: u64) -> Result<FeedbackModel> {
    build_model(&CompressionConfig::new(cfg.dims.rows, cfg.dims.antennas, cr)?, seed)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let dims = ChannelDims {
        spacing: a.spacing,
        subcarriers: a.subcarriers,
        antennas: a.antennas,
        rows: a.rows,
    };
    if a.train == 0 || a.val == 0 || a.test == 0 {
        return Err(Error::Config("--train, --val and --test must be >= 1".into()));
    }
    let profile = ScenarioProfile::preset(&a.profile, dims)?;
    let ds = generate_dataset(&profile, SplitCounts::new(a.train, a.val, a.test), a.seed)?;
    save_dataset(&ds, &a.out)?;
    let c = ds.counts();
    println!("{}: train {} / val {} / test {} -> {}", ds.id, c.train, c.val, c.test, a.out.display());
    if let Some(s) = &ds.summary {
        println!(
            "scale {:.6e}, energy ratio mean {:.6} min {:.6}, clamped {}",
            s.scale, s.mean_energy_ratio, s.min_energy_ratio, s.clamped
        );
    }
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let (cfg, cr) = load_phase(&a.common)?;
    let data = if a.data.is_empty() {
        resolve_datasets(&cfg, None)?
    } else {
        a.data.iter().map(load_dataset).collect::<Result<_>>()?
    };
    let model = model_for(&cfg, cr, derive_seed(cfg.seed, "pretrain/init"))?;
    let small: Vec<ScenarioDataset> = data
        .iter()
        .map(|d| {
            check_data(d, model.config())?;
            d.take_train(cfg.pretrain.train)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&ScenarioDataset> = small.iter().collect();
    let combined = combine_datasets(&refs, derive_seed(cfg.seed, "pretrain/combine"))?;
    let train_cfg = csi_mtl::trainer::TrainConfig {
        seed: derive_seed(cfg.seed, "pretrain/train"),
        ..cfg.pretrain.train_cfg
    };
    let out = pretrain(&model, &combined, None, &train_cfg)?;
    fs::create_dir_all(&a.out)?;
    write_log(&a.out.join("pretrain.log"), "pretrain", &out.trace)?;
    let mut trained = model;
    trained.load_params(&out.params)?;
    let path = a.out.join("pretrained.ckpt");
    save_checkpoint(&trained.checkpoint(None, train_cfg.seed, train_cfg.epochs as u32), &path)?;
    println!("{} samples from {} scenarios -> {}", combined.len(), refs.len(), path.display());
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    let (cfg, _) = load_phase(&a.common)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut model = build_model(&ckpt.meta.config, 0)?;
    model.attach(&ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_data(&ds, model.config())?;
    let subset = ds.take_train(cfg.finetune.train)?;
    let train_cfg = csi_mtl::trainer::TrainConfig {
        seed: derive_seed(cfg.seed, &format!("finetune/{}", ds.id)),
        ..cfg.finetune.train_cfg
    };
    let out = finetune(&model, &subset.train, None, &train_cfg)?;
    fs::create_dir_all(&a.out)?;
    write_log(&a.out.join(format!("finetune-{}.log", ds.id)), "finetune", &out.trace)?;
    let tuned = model.with_decoder(&out.params)?;
    let path = a.out.join(format!("decoder-{}.ckpt", ds.id));
    save_checkpoint(&tuned.checkpoint(Some(Partition::Decoder), train_cfg.seed, train_cfg.epochs as u32), &path)?;
    println!("decoder for `{}` -> {}", ds.id, path.display());
    Ok(())
}

fn single_cmd(a: &SingleArgs) -> Result<()> {
    let (cfg, cr) = load_phase(&a.common)?;
    let ds = load_dataset(&a.data)?;
    let model = model_for(&cfg, cr, derive_seed(cfg.seed, &format!("single/{}/init", ds.id)))?;
    check_data(&ds, model.config())?;
    let data = ds.take_train(cfg.single.train)?;
    let train_cfg = csi_mtl::trainer::TrainConfig {
        seed: derive_seed(cfg.seed, &format!("single/{}/train", ds.id)),
        ..cfg.single.train_cfg
    };
    let out = train_single_task(&model, &data.train, None, &train_cfg)?;
    fs::create_dir_all(&a.out)?;
    write_log(&a.out.join(format!("single-{}.log", ds.id)), "single", &out.trace)?;
    let mut trained = model;
    trained.load_params(&out.params)?;
    let path = a.out.join(format!("single-{}.ckpt", ds.id));
    save_checkpoint(&trained.checkpoint(None, train_cfg.seed, train_cfg.epochs as u32), &path)?;
    println!("model for `{}` -> {}", ds.id, path.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let enc = load_checkpoint(&a.encoder)?;
    let mut model = build_model(&enc.meta.config, 0)?;
    if enc.params.iter().all(|(_, e)| e.partition == Partition::Decoder) {
        return Err(Error::Integrity(format!("{} holds no encoder parameters", a.encoder.display())));
    }
    model.attach(&enc)?;
    let decoder_path = a.decoder.as_ref().unwrap_or(&a.encoder);
    if !a.oracle {
        let dec = load_checkpoint(decoder_path)?;
        let decoder = dec.params.partition(Partition::Decoder);
        if decoder.is_empty() {
            return Err(Error::Integrity(format!("{} holds no decoder parameters", decoder_path.display())));
        }
        if dec.meta.config != *model.config() {
            return Err(Error::Integrity(format!(
                "decoder checkpoint is for {:?}, encoder for {:?}",
                dec.meta.config.input_dims(),
                model.config().input_dims()
            )));
        }
        model = model.with_decoder(&decoder)?;
    }
    let ds = load_dataset(&a.data)?;
    check_data(&ds, model.config())?;
    let nmse = if a.oracle {
        evaluate_with(&ds.test, &ds.normalizer, |batch| Ok(batch.clone()))?
    } else {
        evaluate(&model, &ds.test, &ds.normalizer)?
    };
    let decoder_label = if a.oracle { "oracle".to_string() } else { decoder_path.display().to_string() };
    let line = format!(
        "scenario={} cr={} encoder={} decoder={} nmse_linear={:.6e} nmse_db={}",
        ds.id,
        model.config().ratio,
        a.encoder.display(),
        decoder_label,
        nmse.linear,
        format_db(&nmse)
    );
    println!("{line}");
    if let Some(path) = &a.report {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn finish(report: &ExperimentReport) -> ExitCode {
    print!("{}", report.to_text());
    if report.is_complete() && report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    }
}

fn report_cmd(a: &ReportArgs) -> Result<ExitCode> {
    let report = ExperimentReport::load(&a.experiment)?;
    report.write(&a.experiment)?;
    Ok(finish(&report))
}

fn thread_override() -> Result<Option<usize>> {
    match std::env::var("CSI_MTL_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("CSI_MTL_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn experiment_cmd(a: &ExperimentArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let jobs = thread_override()?.or(a.jobs).unwrap_or(0);
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        jobs,
        verbose: !a.quiet,
    };
    let report = run_experiment(&cfg, &opts)?;
    Ok(finish(&report))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenerateData(a) => generate(a).map(|_| ExitCode::SUCCESS),
        Command::Pretrain(a) => pretrain_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Finetune(a) => finetune_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::TrainSingle(a) => single_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Report(a) => report_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
