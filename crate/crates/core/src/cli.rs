//! `stancemoe` command line: train, predict, eval, ablate, gradcheck.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::encoder::EmbeddingStore;
use crate::error::{Error, Result};
use crate::evaluation::{ablate, AblationReport, MetricsReport};
use crate::experts::ExpertMask;
use crate::head::HeadVariant;
use crate::model::EncoderMode;
use crate::textpipe::{
    build_vocab, encode_record, read_records, stratified_holdout, CueLexicon, Label, Record, Vocab,
};
use crate::training::{
    evaluate_ensemble, model_grad_check, run_kfold, Corpus, TrainConfig, TrainingReport,
};

#[derive(Debug, Parser)]
#[command(
    name = "stancemoe",
    version,
    about = "Mixture-of-experts stance classifier"
)]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a k-fold ensemble and write a checkpoint plus a JSON report.
    Train(TrainArgs),
    /// Write one JSON line of probabilities, class and gate weights per example.
    Predict(PredictArgs),
    /// Score a checkpoint on labeled data.
    Eval(EvalArgs),
    /// Retrain without each expert in turn and tabulate the results.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
}

/// Flags that override values from `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON training config; keys not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// moe, stacked or fusion.
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadVariant>,
    /// Comma-separated expert keys, e.g. `mean,max,cue`.
    #[arg(long, value_parser = parse_experts)]
    pub experts: Option<ExpertMask>,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long)]
    pub cue_lexicon: Option<PathBuf>,
    #[arg(long)]
    pub contrast_lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// JSONL with `id`, `text`, `label`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path [default: <out>.report.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Labeled data for the report's ensemble metrics instead of the training data.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// SMEB1 store; switches the model to precomputed encodings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.json, metrics.txt and confusion.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out test data [default: a stratified 15% split of --data].
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 6)]
    pub tokens: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

fn parse_head(s: &str) -> std::result::Result<HeadVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown head '{s}' (expected moe, stacked or fusion)"))
}

fn parse_experts(s: &str) -> std::result::Result<ExpertMask, String> {
    let keys: Vec<&str> = s
        .split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .collect();
    serde_json::from_value(serde_json::json!(keys)).map_err(|e| e.to_string())
}

impl Overrides {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })* };
        }
        over!(
            seed,
            epochs,
            k,
            batch_size,
            learning_rate,
            label_smoothing,
            dim,
            filters,
            max_len,
            head,
            experts
        );
        if self.freeze_encoder {
            c.freeze_encoder = true;
        }
        if self.cue_lexicon.is_some() {
            c.cue_lexicon = self.cue_lexicon.clone();
        }
        if self.contrast_lexicon.is_some() {
            c.contrast_lexicon = self.contrast_lexicon.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Writes every file or none: on failure the ones already written are removed.
fn write_outputs(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (i, (path, bytes)) in files.iter().enumerate() {
        if let Err(e) = std::fs::write(path, bytes) {
            for (done, _) in &files[..i] {
                let _ = std::fs::remove_file(done);
            }
            return Err(Error::io(path, e));
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn encode_all(
    records: &[Record],
    vocab: &Vocab,
    lexicon: &CueLexicon,
    max_len: usize,
) -> Vec<crate::textpipe::TokenizedExample> {
    records
        .iter()
        .map(|r| encode_record(r, vocab, lexicon, max_len))
        .collect()
}

fn corpus_for(
    records: &[Record],
    vocab: &Vocab,
    lexicon: &CueLexicon,
    max_len: usize,
    mode: EncoderMode,
    embeddings: Option<&Path>,
    dim: usize,
) -> Result<Corpus> {
    let examples = encode_all(records, vocab, lexicon, max_len);
    match (mode, embeddings) {
        (EncoderMode::Toy, _) => Ok(Corpus::new(examples)),
        (EncoderMode::Precomputed, Some(path)) => {
            let store = EmbeddingStore::read(path)?;
            store.expect_dim(dim)?;
            Corpus::with_embeddings(examples, store)
        }
        (EncoderMode::Precomputed, None) => {
            Err(Error::config("precomputed encoder needs --embeddings"))
        }
    }
}

fn lexicon_for(config: &TrainConfig) -> Result<CueLexicon> {
    CueLexicon::from_files(
        config.cue_lexicon.as_deref(),
        config.contrast_lexicon.as_deref(),
    )
}

pub fn train(args: &TrainArgs) -> Result<TrainingReport> {
    let mut config = args.overrides.resolve()?;
    if args.embeddings.is_some() {
        config.encoder = EncoderMode::Precomputed;
    }
    let lexicon = lexicon_for(&config)?;
    let records = read_records(&args.data)?;
    let vocab = build_vocab(&records, config.max_len);
    let corpus = corpus_for(
        &records,
        &vocab,
        &lexicon,
        config.max_len,
        config.encoder,
        args.embeddings.as_deref(),
        config.dim,
    )?;
    log::info!("training {} folds on {} examples", config.k, corpus.len());
    let ensemble = run_kfold(&config, &corpus, vocab.len(), args.jobs)?;
    let (metrics, split) = match &args.eval_data {
        Some(path) => {
            let eval_records = read_records(path)?;
            let eval = corpus_for(
                &eval_records,
                &vocab,
                &lexicon,
                config.max_len,
                config.encoder,
                args.embeddings.as_deref(),
                config.dim,
            )?;
            (evaluate_ensemble(&ensemble, &eval)?, "eval")
        }
        None => (evaluate_ensemble(&ensemble, &corpus)?, "train"),
    };
    let report = TrainingReport::new(&ensemble, metrics, split);
    let checkpoint = Checkpoint {
        config,
        vocab,
        lexicon,
        ensemble,
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", args.out.display())));
    write_outputs(&[
        (args.out.clone(), checkpoint.to_bytes()?),
        (report_path, pretty(&report)?),
    ])?;
    Ok(report)
}

fn load_for_inference(
    model: &Path,
    data: &Path,
    embeddings: Option<&Path>,
) -> Result<(Checkpoint, Corpus)> {
    let ck = Checkpoint::load(model)?;
    let records = read_records(data)?;
    let spec = ck.ensemble.spec().clone();
    let corpus = corpus_for(
        &records,
        &ck.vocab,
        &ck.lexicon,
        spec.max_len,
        spec.encoder,
        embeddings,
        spec.dim,
    )?;
    Ok((ck, corpus))
}

#[derive(Debug, Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    probs: &'a [f64],
    class: Label,
    gate_weights: &'a [f64],
}

pub fn predict(args: &PredictArgs) -> Result<usize> {
    let (ck, corpus) = load_for_inference(&args.model, &args.data, args.embeddings.as_deref())?;
    let mut out = Vec::new();
    for i in 0..corpus.len() {
        let p = ck.ensemble.predict(&corpus.input(i)?)?;
        let line = PredictionLine {
            id: &corpus.examples[i].id,
            probs: &p.probs,
            class: p.class,
            gate_weights: &p.gate_weights,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    write_outputs(&[(args.out.clone(), out)])?;
    Ok(corpus.len())
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let (ck, corpus) = load_for_inference(&args.model, &args.data, args.embeddings.as_deref())?;
    let report = evaluate_ensemble(&ck.ensemble, &corpus)?;
    ensure_dir(&args.out_dir)?;
    write_outputs(&[
        (args.out_dir.join("metrics.json"), pretty(&report)?),
        (
            args.out_dir.join("metrics.txt"),
            report.to_text().into_bytes(),
        ),
        (
            args.out_dir.join("confusion.csv"),
            report.confusion.to_csv().into_bytes(),
        ),
    ])?;
    Ok(report)
}

fn row_slug(name: &str) -> String {
    name.to_lowercase()
        .replace("w/o ", "wo_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn ablation(args: &AblateArgs) -> Result<AblationReport> {
    let mut config = args.overrides.resolve()?;
    if args.embeddings.is_some() {
        config.encoder = EncoderMode::Precomputed;
    }
    let lexicon = lexicon_for(&config)?;
    let records = read_records(&args.data)?;
    let (train_records, test_records) = match &args.test {
        Some(path) => (records, read_records(path)?),
        None => {
            let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
            let (keep, held) = stratified_holdout(&labels, 0.15, config.seed);
            let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
            (pick(&keep), pick(&held))
        }
    };
    let vocab = build_vocab(&train_records, config.max_len);
    let emb = args.embeddings.as_deref();
    let train = corpus_for(
        &train_records,
        &vocab,
        &lexicon,
        config.max_len,
        config.encoder,
        emb,
        config.dim,
    )?;
    let test = corpus_for(
        &test_records,
        &vocab,
        &lexicon,
        config.max_len,
        config.encoder,
        emb,
        config.dim,
    )?;
    let report = ablate(&config, &train, &test, vocab.len(), args.jobs)?;
    ensure_dir(&args.out_dir)?;
    let mut files = vec![
        (args.out_dir.join("ablation.json"), pretty(&report)?),
        (
            args.out_dir.join("classwise.txt"),
            report.classwise_table().into_bytes(),
        ),
        (
            args.out_dir.join("overall.txt"),
            report.overall_table().into_bytes(),
        ),
    ];
    for row in &report.rows {
        files.push((
            args.out_dir
                .join(format!("confusion_{}.csv", row_slug(&row.name))),
            row.ensemble.confusion.to_csv().into_bytes(),
        ));
    }
    write_outputs(&files)?;
    Ok(report)
}

/// Runs one command, printing a summary to stdout. Returns the exit status.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => {
            let r = train(a)?;
            println!(
                "trained {} folds; ensemble on {} data: accuracy {:.4}, macro-F1 {:.4}",
                r.folds.len(),
                r.ensemble_split,
                r.ensemble.accuracy,
                r.ensemble.macro_f1
            );
        }
        Command::Predict(a) => {
            let n = predict(a)?;
            println!("wrote {n} predictions to {}", a.out.display());
        }
        Command::Eval(a) => print!("{}", eval(a)?.to_text()),
        Command::Ablate(a) => {
            let r = ablation(a)?;
            print!("{}\n{}", r.classwise_table(), r.overall_table());
        }
        Command::Gradcheck(a) => {
            let r = model_grad_check(a.dim, a.tokens, a.seed, a.step, a.tol)?;
            let worst = r
                .worst
                .as_ref()
                .map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
            println!(
                "checked {} parameters; max relative error {:.3e} at {worst} (analytic {:.6e}, numeric {:.6e})",
                r.checked, r.max_rel_error, r.worst_analytic, r.worst_numeric
            );
            if r.passed() {
                println!("PASS (tolerance {:e})", r.tolerance);
            } else {
                println!("FAIL (tolerance {:e})", r.tolerance);
                return Ok(1);
            }
        }
    }
    Ok(0)
}
