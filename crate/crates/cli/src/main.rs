use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use medvqa_core::data::synth::{write_caption_corpus, write_vqa_corpus};
use medvqa_core::data::{check_images_decode, load_caption_dataset, load_image, load_vqa_dataset, ImageConfig};
use medvqa_core::eval::{
    aggregate, find_counts, load_predictions, load_verdicts, score_predictions, write_jsonl, Prediction, Regime,
    SynonymTable, VerdictRecord,
};
use medvqa_core::finetune::{
    load_checkpoint, load_stage_examples, predict, run_stage, PipelineConfig, RUN_DIR_ENV,
};
use medvqa_core::prompt::assemble_vqa_prompt;
use medvqa_core::{Model, Split};
use medvqa_humaneval::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "medvqa", version, about = "Medical VQA fine-tuning and generative-answer evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check and summarize dataset record files.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Run one fine-tuning stage.
    Train(TrainArgs),
    /// Greedy answers for one split of a VQA file, as a predictions file.
    Predict(PredictArgs),
    /// Score predictions and verdict files.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Start the human-review HTTP service.
    Serve(ServeArgs),
    /// Write a small synthetic caption and VQA corpus with PNG images.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RecordKind {
    Vqa,
    Caption,
}

#[derive(Subcommand)]
enum IngestCmd {
    Validate {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "vqa")]
        kind: RecordKind,
        /// Also decode every referenced image.
        #[arg(long)]
        check_images: bool,
    },
    Stats {
        path: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    config: PathBuf,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, env = RUN_DIR_ENV, default_value = "runs")]
    run_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Exact,
    Assisted,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Accuracy from a predictions file; the assisted regime also needs `--verdicts`.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        regime: RegimeArg,
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Extra synonym groups (TOML, `groups = [["a", "b"], ...]`).
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Verdict-file skeleton for offline review: auto verdicts filled, finals
    /// set only for EXACT items.
    ExportSession {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Both regimes from a completed verdict file.
    Report {
        #[arg(long)]
        verdicts: PathBuf,
    },
    /// Integer counts consistent with rounded accuracies (percent, one decimal).
    Counts {
        #[arg(long)]
        total: usize,
        #[arg(long)]
        open: f64,
        #[arg(long)]
        closed: f64,
        #[arg(long)]
        overall: f64,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    data_dir: PathBuf,
    /// Defaults to `<data-dir>/images`.
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Show rule-engine suggestions to annotators.
    #[arg(long)]
    hints: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    train: usize,
    #[arg(long, default_value_t = 8)]
    test: usize,
    #[arg(long, default_value_t = 16)]
    captions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest(cmd) => ingest(cmd),
        Command::Train(args) => train(args),
        Command::Predict(args) => predict_split(args),
        Command::Eval(cmd) => eval(cmd),
        Command::Serve(args) => serve(args),
        Command::Synth(args) => synth(args),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(cmd: IngestCmd) -> Result<()> {
    match cmd {
        IngestCmd::Validate {
            path,
            kind: RecordKind::Caption,
            check_images,
        } => {
            let recs = load_caption_dataset(&path)?;
            if check_images {
                check_images_decode(recs.iter().map(|r| r.image_path.as_path()))?;
            }
            println!("ok: {} caption records", recs.len());
        }
        IngestCmd::Validate {
            path,
            kind: RecordKind::Vqa,
            check_images,
        } => {
            let m = load_vqa_dataset(&path)?;
            if check_images {
                check_images_decode(m.records.iter().map(|r| r.image_path.as_path()))?;
            }
            for w in &m.warnings {
                println!("warning: {w}");
            }
            println!("ok: {} records (train {}, test {})", m.records.len(), m.counts.train, m.counts.test);
        }
        IngestCmd::Stats { path } => {
            let m = load_vqa_dataset(&path)?;
            print_json(&serde_json::json!({
                "source": m.source_name,
                "counts": m.counts,
                "by_answer_type": m.counts_by_type(),
                "warnings": m.warnings,
            }))?;
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if cfg.stage.stage != args.stage {
        bail!("--stage {} but {} configures stage {}", args.stage, args.config.display(), cfg.stage.stage);
    }
    let mut model = match &args.init {
        Some(path) => {
            let m = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if m.config != cfg.model {
                log::warn!("using the model config stored in {}; [model] in the config file is ignored", path.display());
            }
            m
        }
        None => Model::new(cfg.model.clone())?,
    };
    std::fs::create_dir_all(&args.run_dir).with_context(|| format!("creating {}", args.run_dir.display()))?;
    let examples = load_stage_examples(&cfg.stage, &model)?;
    log::info!("stage {}: {} examples", args.stage, examples.len());
    let report = run_stage(&cfg.stage, &mut model, &examples, Some(&args.run_dir))?;
    println!(
        "stage {} done: {} steps, final loss {:.4}, {} trainable params, checkpoint {}",
        report.stage,
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.trainable_count.grand_total,
        report.checkpoint_path.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default(),
    );
    Ok(())
}

fn predict_split(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let manifest = load_vqa_dataset(&args.dataset)?;
    let (split, tag) = match args.split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let icfg = ImageConfig::with_size(model.config.image_size);
    let mut preds = Vec::new();
    for (i, r) in manifest.split(split).iter().enumerate() {
        let img = load_image(&r.image_path, &icfg)?;
        let features = model.frozen_visual_features(&img)?;
        let prompt = assemble_vqa_prompt(&r.question)?;
        preds.push(Prediction {
            id: format!("{tag}-{i:05}"),
            question: r.question.clone(),
            ground_truth: r.answer.clone(),
            generated: predict(&model, &prompt, &features, args.max_new_tokens)?,
            answer_type: r.answer_type,
        });
    }
    write_jsonl(&args.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn synonyms(path: Option<&Path>) -> Result<SynonymTable> {
    Ok(match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynonymTable::extended(SynonymTable::from_toml(&text)?)
        }
        None => SynonymTable::default(),
    })
}

fn auto_records(preds: &[Prediction], table: &SynonymTable) -> Vec<VerdictRecord> {
    score_predictions(preds, table)
        .iter()
        .map(|s| VerdictRecord::from_auto(&s.prediction, s.classification))
        .collect()
}

fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Score {
            predictions,
            regime,
            verdicts,
            synonyms: syn,
        } => {
            let preds = load_predictions(&predictions)?;
            let report = match regime {
                RegimeArg::Exact => aggregate(&auto_records(&preds, &synonyms(syn.as_deref())?), Regime::Exact)?,
                RegimeArg::Assisted => {
                    let Some(vpath) = verdicts else {
                        bail!("the assisted regime needs --verdicts (human final verdicts)");
                    };
                    let records = load_verdicts(&vpath)?;
                    let mut want: Vec<&str> = preds.iter().map(|p| p.id.as_str()).collect();
                    let mut have: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
                    want.sort_unstable();
                    have.sort_unstable();
                    if want != have {
                        bail!("{} and {} cover different ids", predictions.display(), vpath.display());
                    }
                    aggregate(&records, Regime::Assisted)?
                }
            };
            print_json(&report)
        }
        EvalCmd::ExportSession {
            predictions,
            out,
            synonyms: syn,
        } => {
            let records = auto_records(&load_predictions(&predictions)?, &synonyms(syn.as_deref())?);
            write_jsonl(&out, &records)?;
            let pending = records.iter().filter(|r| r.final_verdict.is_none()).count();
            println!("wrote {} records ({pending} need review) to {}", records.len(), out.display());
            Ok(())
        }
        EvalCmd::Report { verdicts } => {
            let records = load_verdicts(&verdicts)?;
            print_json(&serde_json::json!({
                "exact": aggregate(&records, Regime::Exact)?,
                "assisted": aggregate(&records, Regime::Assisted)?,
            }))
        }
        EvalCmd::Counts {
            total,
            open,
            closed,
            overall,
        } => {
            let tenths = |x: f64| (x * 10.0).round() as u64;
            let sols = find_counts(total, tenths(open), tenths(closed), tenths(overall));
            if sols.is_empty() {
                println!("no integer counts over {total} questions round to {open}/{closed}/{overall}");
            }
            print_json(&sols)
        }
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(&args.data_dir);
    cfg.images_dir = args.images_dir;
    cfg.hints = args.hints;
    let state = AppState::open(cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        tokio::select! {
            r = medvqa_humaneval::serve(listener, state) => r?,
            _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
        }
        Ok(())
    })
}

fn synth(args: SynthArgs) -> Result<()> {
    let captions = write_caption_corpus(&args.out.join("captions"), args.captions, args.seed)?;
    let vqa = write_vqa_corpus(&args.out.join("vqa"), args.train, args.test, args.seed + 1)?;
    println!("{}\n{}", captions.display(), vqa.display());
    Ok(())
}
