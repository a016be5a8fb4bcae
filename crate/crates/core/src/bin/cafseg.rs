use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cafseg::background::BACKGROUND;
use cafseg::caf::FusionMode;
use cafseg::checkpoint::{load_checkpoint, save_checkpoint};
use cafseg::data::{self, DatasetSpec};
use cafseg::gradcheck::{format_table, run_suite, SuiteOptions};
use cafseg::metrics::fmt_metric;
use cafseg::protocol::{build_scenario, Setting};
use cafseg::report::{aggregate, aggregate_csv, write_reports};
use cafseg::train::{evaluate, run_experiment, TrainConfig, Variant};
use cafseg::{config, Error, Result};

#[derive(Parser)]
#[command(name = "cafseg", version, about = "Continual semantic segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as PPM/PGM files.
    GenData(GenData),
    /// Run an incremental experiment and write CSV reports.
    Train(Train),
    /// Evaluate a checkpoint on a corpus.
    Eval(Eval),
    /// Finite-difference check of every op and loss.
    Gradcheck(Gradcheck),
    /// Average final-step mIoU over run directories.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    num_images: usize,
    /// Foreground classes `1..=N`.
    #[arg(long, default_value_t = 5)]
    classes: u8,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long, default_value = "4-1")]
    scenario: String,
    #[arg(long, default_value = "disjoint")]
    setting: Setting,
    /// ft, joint, full, or baseline with +kd/+bkd/+ad/+caf tokens.
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// `key = value` file; `--set` and `CAF_SEED` take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation corpus directory.
    #[arg(long, conflicts_with = "holdout")]
    val: Option<PathBuf>,
    /// Validate on this fraction of the training corpus instead.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frozen previous-step checkpoint, needed by `concat`.
    #[arg(long)]
    previous: Option<PathBuf>,
    #[arg(long, default_value = "skip")]
    fusion_mode: FusionMode,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Incremental step; step 1 skips distillation cases.
    #[arg(long, default_value_t = 2)]
    step: usize,
    /// Scale the analytic gradient of this case (checker self-test).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct Report {
    /// Run directories written by `train`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenData) -> Result<ExitCode> {
    let mut spec = DatasetSpec::with_classes(a.seed, a.num_images, a.classes);
    spec.width = a.width;
    spec.height = a.height;
    let ds = data::generate(&spec)?;
    data::save(&ds, &a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn universe(ds: &data::Dataset) -> Vec<usize> {
    let mut seen = [false; 256];
    for s in &ds.samples {
        for c in s.mask.classes() {
            seen[c as usize] = true;
        }
    }
    (1..255).filter(|&c| seen[c]).collect()
}

fn train(a: Train) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => config::load(p)?,
        None => TrainConfig::default(),
    };
    config::apply_env(&mut cfg)?;
    config::apply_overrides(&mut cfg, &a.set)?;
    cfg.validate()?;

    let corpus = data::load(&a.data)?;
    let (train, val) = match (&a.val, a.holdout) {
        (Some(dir), _) => (corpus, data::load(dir)?),
        (None, Some(f)) => corpus.split_holdout(f)?,
        (None, None) => return Err(Error::Config("pass --val DIR or --holdout FRACTION".into())),
    };
    let scenario = build_scenario(&universe(&train), &a.scenario, a.setting)?;
    log::info!("{} steps: {:?}", scenario.num_steps(), scenario.steps);

    let result = run_experiment(&scenario, &train, &val, &cfg, &a.variant)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let cfg_path = a.out.join("config.txt");
    std::fs::write(&cfg_path, config::to_text(&cfg)).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    for (i, m) in result.models.iter().enumerate() {
        save_checkpoint(m, &a.out.join(format!("step{}.ckpt", i + 1)))?;
    }
    let info = [
        ("variant", a.variant.to_string()),
        ("scenario", scenario.to_spec_string()),
        ("setting", a.setting.to_string()),
        ("seed", cfg.seed.to_string()),
        ("train_images", train.len().to_string()),
        ("val_images", val.len().to_string()),
    ];
    write_reports(&a.out, &result, &info)?;
    for st in &result.steps {
        println!(
            "step {}: old {} new {} all {}",
            st.step,
            fmt_metric(st.old),
            fmt_metric(st.new),
            fmt_metric(st.all)
        );
    }
    println!("reports in {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: Eval) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?;
    let previous = a.previous.as_deref().map(load_checkpoint).transpose()?;
    let ds = data::load(&a.data)?;
    let val: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (s.image.to_tensor(), s.mask.data.clone()))
        .collect();
    let num_ids = model.classes().into_iter().max().unwrap_or(0) + 1;
    let cm = evaluate(&model, previous.as_ref(), &val, a.fusion_mode, num_ids)?;
    let mut classes = model.classes();
    classes.sort_unstable();
    println!("class_id,iou");
    for c in &classes {
        println!("{c},{}", fmt_metric(cm.iou(*c)));
    }
    let old: Vec<usize> = model.meta.old_classes.iter().copied().filter(|&c| c != BACKGROUND).collect();
    println!("old,{}", fmt_metric(cm.miou(&old)));
    println!("new,{}", fmt_metric(cm.miou(&model.meta.new_classes)));
    println!("all,{}", fmt_metric(cm.miou(&classes)));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: Gradcheck) -> Result<ExitCode> {
    let opts = SuiteOptions {
        seeds: (a.first_seed..a.first_seed + a.seeds).collect(),
        step: a.step,
        corrupt: a.corrupt,
        ..SuiteOptions::default()
    };
    let results = run_suite(&opts)?;
    print!("{}", format_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} cases, {failed} failed", results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(a: Report) -> Result<ExitCode> {
    let text = aggregate_csv(&aggregate(&a.runs)?);
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
