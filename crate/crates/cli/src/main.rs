use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use vtqa_core::data::{load_dataset, SampleRecord, Splits};
use vtqa_core::model::{
    forward, load_checkpoint, save_checkpoint, ModelConfig, Preset, Variant,
};
use vtqa_core::synth::{generate_synthetic, SynthConfig};
use vtqa_core::train::{
    ablate, ablation_tsv, evaluate, run, standard_variants, AblationRow, TrainConfig,
};
use vtqa_core::viz::{render_svg, render_table, AttentionReport};
use vtqa_core::Error;

#[derive(Parser)]
#[command(name = "vtqa", version, about = "Visual and textual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted textual clues.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        clue_rate: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and write a checkpoint plus `<out>.metrics.json`.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split or file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score when --data is a directory.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        no_ar: bool,
        #[arg(long)]
        credit: Option<f64>,
    },
    /// Train every fusion combination under several seeds.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show paragraph attention for one sample as a table and an SVG.
    VisualizeAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "vtqa")]
    variant: Variant,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_lf: bool,
    #[arg(long)]
    no_ar: bool,
    #[arg(long, default_value_t = 1.0)]
    credit: f64,
    /// Training epochs (default 40).
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ModelArgs {
    fn train_config(&self) -> Result<TrainConfig, Failure> {
        let defaults = TrainConfig::default();
        let config = TrainConfig {
            seed: self.seed,
            epochs: self.epochs.unwrap_or(defaults.epochs),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            ..defaults
        };
        config.validate().map_err(Failure::usage)?;
        Ok(config)
    }
}

/// Exit 2 for bad input or arguments, 1 when the work itself fails.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            clue_rate,
            noise,
            seed,
        } => gen_data(&out, n, clue_rate, noise, seed),
        Command::Train { model, out } => train(&model, &out),
        Command::Eval {
            ckpt,
            data,
            split,
            no_ar,
            credit,
        } => eval(&ckpt, &data, &split, no_ar, credit),
        Command::Ablate { model, seeds, out } => ablate_cmd(&model, seeds, out.as_deref()),
        Command::VisualizeAttention {
            ckpt,
            data,
            id,
            out,
        } => visualize(&ckpt, &data, &id, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn gen_data(out: &Path, n: usize, clue_rate: f64, noise: f64, seed: u64) -> CliResult {
    let config = SynthConfig {
        n_samples: n,
        clue_rate,
        noise,
        seed,
        ..SynthConfig::default()
    };
    let splits = generate_synthetic(&config).map_err(Failure::usage)?;
    splits
        .write_dir(out)
        .map_err(|e| Failure::usage(format!("cannot write to {}: {e}", out.display())))?;
    println!("split\tsamples");
    for (name, part) in ["train", "val", "test"].iter().zip(splits.parts()) {
        println!("{name}\t{}", part.len());
    }
    Ok(())
}

fn read_splits(dir: &Path) -> Result<Splits, Failure> {
    Splits::read_dir(dir)
        .map_err(|e| Failure::usage(format!("cannot read dataset {}: {e}", dir.display())))
}

fn model_template(args: &ModelArgs) -> Result<ModelConfig, Failure> {
    let mut config = ModelConfig::preset(args.preset, args.variant, 0, 0);
    match args.variant {
        Variant::VqaOnly if args.no_lf => {
            warn!("--no-lf has no effect on the vqa variant (single branch); ignoring it")
        }
        Variant::TextQaOnly if args.no_lf || args.no_ar => {
            warn!("the textqa variant uses neither late fusion nor answer recommendation; ignoring --no-lf/--no-ar")
        }
        _ => {}
    }
    config.late_fusion = !args.no_lf;
    config.answer_recommendation = !args.no_ar;
    config.credit = args.credit;
    config.seed = args.seed;
    // Sizes are filled in once the vocabularies exist; validate the rest now.
    ModelConfig {
        vocab_size: 2,
        n_answers: 1,
        ..config.clone()
    }
    .validate()
    .map_err(Failure::usage)?;
    Ok(config)
}

fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.json");
    PathBuf::from(s)
}

fn train(args: &ModelArgs, out: &Path) -> CliResult {
    let template = model_template(args)?;
    let splits = read_splits(&args.data)?;
    let train_config = args.train_config()?;
    let result = run(&template, &train_config, &splits).map_err(|e| match e {
        Error::Config(_) => Failure::usage(e),
        e => Failure::runtime(e),
    })?;
    save_checkpoint(out, &result.checkpoint).map_err(Failure::runtime)?;
    let json = serde_json::to_string_pretty(&result.metrics).map_err(Failure::runtime)?;
    fs::write(metrics_path(out), json + "\n").map_err(Failure::runtime)?;

    let m = &result.metrics;
    println!("epoch\ttrain_loss\tval_accuracy");
    for e in &m.epochs {
        let val = e.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{}\t{:.6}\t{val}", e.epoch, e.train_loss);
    }
    let test = m.test_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("best_epoch\t{}\ntest_accuracy\t{test}", m.best_epoch);
    Ok(())
}

fn load_records(data: &Path, split: Option<&str>) -> Result<Vec<SampleRecord>, Failure> {
    let records = if data.is_dir() {
        let splits = read_splits(data)?;
        match split {
            Some("train") => splits.train,
            Some("val") => splits.val,
            Some("test") => splits.test,
            Some(other) => {
                return Err(Failure::usage(format!(
                    "unknown split {other:?} (expected train, val or test)"
                )))
            }
            None => [splits.train, splits.val, splits.test].concat(),
        }
    } else {
        let sidecar = Splits::sidecar_path(data);
        load_dataset(data, sidecar.exists().then_some(sidecar.as_path()))
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", data.display())))?
    };
    Ok(records)
}

fn eval(ckpt: &Path, data: &Path, split: &str, no_ar: bool, credit: Option<f64>) -> CliResult {
    let mut checkpoint = load_checkpoint(ckpt).map_err(Failure::usage)?;
    if no_ar {
        checkpoint.config.answer_recommendation = false;
    }
    if let Some(c) = credit {
        checkpoint.config.credit = c;
    }
    checkpoint.config.validate().map_err(Failure::usage)?;
    let records = load_records(data, Some(split))?;
    let samples = checkpoint
        .vocabs
        .prepare_all(&records)
        .map_err(Failure::usage)?;
    let result =
        evaluate(&checkpoint.params, &checkpoint.config, &samples).map_err(Failure::runtime)?;
    println!("split\taccuracy\tcorrect\ttotal");
    println!(
        "{split}\t{:.4}\t{}\t{}",
        result.accuracy, result.correct, result.total
    );
    Ok(())
}

fn ablate_cmd(args: &ModelArgs, seeds: u64, out: Option<&Path>) -> CliResult {
    if seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let template = model_template(args)?;
    let splits = read_splits(&args.data)?;
    let seed_list: Vec<u64> = (args.seed..args.seed + seeds).collect();
    let rows: Vec<AblationRow> = ablate(
        &standard_variants(&template),
        &args.train_config()?,
        &splits,
        &seed_list,
    )
    .map_err(Failure::runtime)?;
    print!("{}", ablation_tsv(&rows));
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&rows).map_err(Failure::runtime)?;
        fs::write(path, json + "\n").map_err(Failure::runtime)?;
    }
    Ok(())
}

fn visualize(ckpt: &Path, data: &Path, id: &str, out: &Path) -> CliResult {
    let checkpoint = load_checkpoint(ckpt).map_err(Failure::usage)?;
    let records = load_records(data, None)?;
    let record = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Failure::usage(format!("no sample with id {id:?} in {}", data.display())))?;
    let sample = checkpoint.vocabs.prepare(record).map_err(Failure::usage)?;
    let output =
        forward(&sample, &checkpoint.params, &checkpoint.config).map_err(Failure::runtime)?;
    let alpha = output.paragraph_attention.ok_or_else(|| {
        Failure::usage(format!(
            "the {} variant has no paragraph attention to show",
            checkpoint.config.variant
        ))
    })?;
    let answers = &checkpoint.vocabs.answers;
    let report = AttentionReport {
        id: record.id.clone(),
        question: record.question.clone(),
        predicted: answers
            .answer(output.logits.argmax())
            .unwrap_or_default()
            .to_string(),
        gold: record.answer.clone(),
        sentences: record
            .paragraph
            .iter()
            .cloned()
            .zip(alpha.data().iter().copied())
            .collect(),
    };
    print!("{}", render_table(&report));
    fs::write(out, render_svg(&report))
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}
