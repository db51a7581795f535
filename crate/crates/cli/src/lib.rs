//! `renovate` command line: argument definitions, subcommand bodies and the
//! review service router.

pub mod review;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use renovate_core::aggregation::{SoftLabelLine, SoftLabelSet};
use renovate_core::evaluation::{
    agreement_rate, distribution_csv, label_distribution, pairwise_confusion, parse_mturk,
};
use renovate_core::ingestion::{merge, parse_predictions_file};
use renovate_core::pipeline::{
    self, prepare, ReviewSession, RunConfig, DEFAULT_LABEL_CAP, INGEST_REPORT_FILE, PREDICTIONS_FILE,
};
use renovate_core::presets::preset;
use renovate_core::prompt_plan::{plan, render_prompt, TemplateKind};
use renovate_core::synthetic::{generate, recovery_metrics, write_dataset, SyntheticSpec};
use renovate_core::{LabelSet, LabelVocabulary};

#[derive(Debug, Parser)]
#[command(name = "renovate", version, about = "Renovate image-classification test-set labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shuffle the vocabulary into prompt batches and write the plan.
    PlanPrompts(PlanArgs),
    /// Parse and merge the configured prediction files.
    Ingest(IngestArgs),
    /// Run the full pipeline from a config file.
    Run(ConfigArgs),
    /// Agreement rate of soft labels against MTurk records.
    Agree(AgreeArgs),
    /// Label distributions and pairwise confusion grids as CSV.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Generate a synthetic dataset, run it and score the recovery.
    Simulate(SimulateArgs),
    /// Serve the review API and UI for a completed run.
    Review(ReviewArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub vocabulary: PathBuf,
    #[arg(long, default_value = "batched")]
    pub template: TemplateKind,
    /// Labels per prompt; taken from `--preset` when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dataset preset supplying the batch size (e.g. cifar-100).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plan file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print every rendered prompt for this image reference instead.
    #[arg(long)]
    pub render: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    #[arg(long)]
    pub vocabulary: PathBuf,
    #[arg(long)]
    pub mturk: PathBuf,
    #[arg(long)]
    pub soft_labels: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Per-label prediction counts, one column per method.
    Distribution {
        #[arg(long)]
        vocabulary: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Methods to include; all when omitted.
        #[arg(long = "method")]
        methods: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Counts of (primary label of A, primary label of B) over images where both predict.
    Confusion {
        #[arg(long)]
        vocabulary: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        row_method: String,
        #[arg(long)]
        col_method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Synthetic spec JSON; the default spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn emit(out: Option<&Path>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, body).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn pretty(value: &impl serde::Serialize) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn plan_prompts(args: &PlanArgs) -> anyhow::Result<()> {
    let vocab = LabelVocabulary::load(&args.vocabulary)?;
    let batch_size = match (args.batch_size, &args.preset) {
        (Some(n), _) => n,
        (None, Some(name)) => {
            preset(name)
                .with_context(|| format!("unknown preset {name:?}"))?
                .label_batch_size
        }
        (None, None) if args.template == TemplateKind::Batched => bail!("--batch-size or --preset is required"),
        (None, None) => 1,
    };
    let plan = plan(&vocab, args.template, batch_size, args.seed)?;
    match &args.render {
        Some(image_ref) => {
            let mut body = String::new();
            for i in 0..plan.batches.len() {
                body.push_str(&render_prompt(&plan, i, image_ref)?);
                body.push_str("\n\n");
            }
            emit(args.out.as_deref(), &body)
        }
        None => emit(args.out.as_deref(), &plan.to_json()),
    }
}

pub fn ingest(args: &IngestArgs) -> anyhow::Result<serde_json::Value> {
    let config = RunConfig::load(&args.config)?;
    config.validate()?;
    let prepared = prepare(&config)?;
    let out = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(PREDICTIONS_FILE), prepared.matrix.to_jsonl(&prepared.vocab))?;
    fs::write(out.join(INGEST_REPORT_FILE), pretty(&prepared.ingest)?)?;
    Ok(json!({
        "images": prepared.universe.len(),
        "methods": prepared.matrix.methods(),
        "malformed_lines": prepared.ingest.sources.iter().map(|s| s.malformed.len()).sum::<usize>(),
    }))
}

pub fn run(args: &ConfigArgs) -> anyhow::Result<serde_json::Value> {
    let outcome = pipeline::run(&args.config)?;
    let report = &outcome.calibrated.renovation.report;
    Ok(json!({
        "dataset_id": report.dataset_id,
        "images": report.image_count,
        "full_score": report.full_score,
        "noisy_label_count": report.noisy_label_count,
        "missing_label_count": report.missing_label_count,
        "verdicts_applied": outcome.verdicts_applied,
    }))
}

pub fn agree(args: &AgreeArgs) -> anyhow::Result<serde_json::Value> {
    let vocab = LabelVocabulary::load(&args.vocabulary)?;
    let file = fs::File::open(&args.mturk).with_context(|| format!("opening {}", args.mturk.display()))?;
    let records = parse_mturk(BufReader::new(file), &vocab)?;
    let text =
        fs::read_to_string(&args.soft_labels).with_context(|| format!("reading {}", args.soft_labels.display()))?;
    let mut predictions: BTreeMap<String, LabelSet> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: SoftLabelLine =
            serde_json::from_str(line).with_context(|| format!("{} line {}", args.soft_labels.display(), i + 1))?;
        let soft = SoftLabelSet::from_line(&parsed, &vocab)?;
        predictions.insert(soft.image_id.clone(), soft.label_set());
    }
    let rate = agreement_rate(&predictions, &records)?;
    Ok(json!({ "records": records.len(), "agreement_rate": rate }))
}

fn load_matrix(
    vocabulary: &Path,
    predictions: &Path,
) -> anyhow::Result<(LabelVocabulary, renovate_core::ingestion::PredictionMatrix)> {
    let vocab = LabelVocabulary::load(vocabulary)?;
    let parsed = parse_predictions_file(predictions, &vocab, DEFAULT_LABEL_CAP.max(vocab.len()))?;
    let records = parsed.into_records();
    let universe: Vec<String> = records
        .iter()
        .map(|r| r.image_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let matrix = merge(vocab.dataset_id(), &records, &universe)?;
    Ok((vocab, matrix))
}

pub fn analyze(command: &AnalyzeCommand) -> anyhow::Result<()> {
    match command {
        AnalyzeCommand::Distribution {
            vocabulary,
            predictions,
            methods,
            out,
        } => {
            let (vocab, matrix) = load_matrix(vocabulary, predictions)?;
            let methods = if methods.is_empty() {
                matrix.methods().to_vec()
            } else {
                methods.clone()
            };
            let columns = methods
                .iter()
                .map(|m| Ok((m.clone(), label_distribution(&matrix, m, &vocab)?)))
                .collect::<renovate_core::Result<Vec<_>>>()?;
            emit(out.as_deref(), &distribution_csv(&vocab, &columns)?)
        }
        AnalyzeCommand::Confusion {
            vocabulary,
            predictions,
            row_method,
            col_method,
            out,
        } => {
            let (vocab, matrix) = load_matrix(vocabulary, predictions)?;
            let confusion = pairwise_confusion(&matrix, row_method, col_method, &vocab)?;
            emit(out.as_deref(), &confusion.to_csv(&vocab)?)
        }
    }
}

pub fn simulate(args: &SimulateArgs) -> anyhow::Result<serde_json::Value> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let instance = generate(&spec)?;
    let config = write_dataset(&instance, &args.out)?;
    fs::write(args.out.join("spec.json"), pretty(&spec)?)?;
    let outcome = pipeline::run(&config)?;
    let recovery = recovery_metrics(
        &instance,
        &outcome.calibrated.estimates,
        &outcome.calibrated.renovation.soft_labels,
    )?;
    fs::write(args.out.join("recovery.json"), pretty(&recovery)?)?;
    Ok(serde_json::to_value(&recovery)?)
}

pub async fn serve(args: &ReviewArgs) -> anyhow::Result<()> {
    let config = RunConfig::load(&args.config)?;
    let session = ReviewSession::open(config)?;
    let app = review::router(review::shared(session));
    let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
        .await
        .with_context(|| format!("binding {}:{}", args.host, args.port))?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Machine-readable error line for stderr.
pub fn error_body(error: &anyhow::Error) -> String {
    match error.downcast_ref::<renovate_core::Error>() {
        Some(e) => pipeline::error_json(e),
        None => json!({ "kind": "cli", "message": format!("{error:#}") }).to_string(),
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let print = |value: serde_json::Value| -> anyhow::Result<()> {
        print!("{}", pretty(&value)?);
        Ok(())
    };
    match cli.command {
        Command::PlanPrompts(args) => plan_prompts(&args),
        Command::Ingest(args) => print(ingest(&args)?),
        Command::Run(args) => print(run(&args)?),
        Command::Agree(args) => print(agree(&args)?),
        Command::Analyze(command) => analyze(&command),
        Command::Simulate(args) => print(simulate(&args)?),
        Command::Review(args) => tokio::runtime::Runtime::new()?.block_on(serve(&args)),
    }
}
