//! `katz` command line. Every subcommand reads an optional JSON config
//! file; flags given on the command line override its fields.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on any other failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use katz_core::corpus::{
    build_examples, dedupe, train_test_split, CorpusStats, ExampleKind, QAPair, SentencePair,
};
use katz_core::eval::{
    ablation_table, compare_models, comparison_table, evaluate_records, render_table, run_ablation,
    AblationData, AblationRow, AblationSpec, AblationVariable, EvalReport, ModelRow,
    PredictionRecord,
};
use katz_core::model::DecodeOptions;
use katz_core::train::{finetune_sequential, train_with, LossKind, Stage, TrainConfig};
use katz_core::{Model, ModelConfig, RngStream, Vocabulary};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, TokenizerConfig};
use crate::error::{Error, Result};
use crate::service::{self, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "katz",
    version,
    about = "Train, evaluate, and serve katz language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, deduplicate, and split corpora; write corpus statistics.
    Preprocess(PreprocessArgs),
    /// Train one stage on one corpus, optionally resuming a checkpoint.
    Train(TrainArgs),
    /// Sentence completion followed by QA fine-tuning.
    Finetune(FinetuneArgs),
    /// Score prediction files with ROUGE.
    Eval(EvalArgs),
    /// Sweep block count or loss kind.
    Ablate(AblateArgs),
    /// Generate text from a checkpoint.
    Generate(GenerateArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => data::read_json(p),
        None => Ok(C::default()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("{what} is required (flag or config field)")))
}

fn check_vocab(config: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if config.vocab != vocab.len() {
        return Err(Error::Usage(format!(
            "model vocab is {} but the tokenizer has {} entries",
            config.vocab,
            vocab.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub sentences: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub expected_sentences: Option<usize>,
    pub expected_qa: Option<usize>,
    pub n_ctx: usize,
    pub mask_prompt_loss: bool,
    pub tokenizer: TokenizerConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sentences: None,
            qa: None,
            out_dir: None,
            test_fraction: 0.2,
            split_seed: 0,
            expected_sentences: None,
            expected_qa: None,
            n_ctx: 1024,
            mask_prompt_loss: false,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sentence-completion CSV with header `sentence1,sentence2`.
    #[arg(long)]
    sentences: Option<PathBuf>,
    /// QA JSON array of `{question, answer}`.
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    expected_sentences: Option<usize>,
    #[arg(long)]
    expected_qa: Option<usize>,
    #[arg(long)]
    n_ctx: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_completion: Option<CorpusStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<CorpusStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_test: Option<usize>,
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg: PreprocessConfig = load_config(args.config.as_deref())?;
    if args.sentences.is_some() {
        cfg.sentences = args.sentences;
    }
    if args.qa.is_some() {
        cfg.qa = args.qa;
    }
    if args.out_dir.is_some() {
        cfg.out_dir = args.out_dir;
    }
    set(&mut cfg.test_fraction, args.test_fraction);
    set(&mut cfg.split_seed, args.split_seed);
    set(&mut cfg.n_ctx, args.n_ctx);
    if args.expected_sentences.is_some() {
        cfg.expected_sentences = args.expected_sentences;
    }
    if args.expected_qa.is_some() {
        cfg.expected_qa = args.expected_qa;
    }
    let out = require(&cfg.out_dir, "--out-dir")?.to_path_buf();
    if cfg.sentences.is_none() && cfg.qa.is_none() {
        return Err(Error::Usage("give --sentences, --qa, or both".into()));
    }
    let vocab = cfg.tokenizer.load()?;
    let mut stats = PreprocessStats {
        sentence_completion: None,
        qa: None,
        qa_train: None,
        qa_test: None,
    };

    if let Some(path) = &cfg.sentences {
        let records = data::load_sentence_pairs(path)?;
        data::check_count(path, records.len(), cfg.expected_sentences)?;
        let unique = dedupe(&records);
        let report = build_examples(&unique, &vocab, cfg.n_ctx, false);
        let s = CorpusStats::new(records.len(), unique.len(), &report);
        println!(
            "sentence pairs: {} read, {} duplicates, {} dropped",
            s.records, s.duplicates_removed, s.dropped
        );
        data::write_sentence_pairs(&out.join("sentences.csv"), &unique)?;
        stats.sentence_completion = Some(s);
    }
    if let Some(path) = &cfg.qa {
        let records = data::load_qa(path)?;
        data::check_count(path, records.len(), cfg.expected_qa)?;
        let unique = dedupe(&records);
        let report = build_examples(&unique, &vocab, cfg.n_ctx, cfg.mask_prompt_loss);
        let s = CorpusStats::new(records.len(), unique.len(), &report);
        let (train, test) = train_test_split(&unique, cfg.test_fraction, cfg.split_seed)?;
        println!(
            "qa pairs: {} read, {} duplicates, {} dropped, split {}/{}",
            s.records,
            s.duplicates_removed,
            s.dropped,
            train.len(),
            test.len()
        );
        data::write_qa(&out.join("qa_train.json"), &train)?;
        data::write_qa(&out.join("qa_test.json"), &test)?;
        stats.qa = Some(s);
        stats.qa_train = Some(train.len());
        stats.qa_test = Some(test.len());
    }
    data::write_json(&out.join("stats.json"), &stats)
}

// --------------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub kind: ExampleKind,
    pub tokenizer: TokenizerConfig,
    pub init_seed: u64,
    /// Checkpoint to continue from. Its model config wins; its optimizer
    /// state is reused when it has one.
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: None,
            kind: ExampleKind::Qa,
            tokenizer: TokenizerConfig::default(),
            init_seed: 0,
            resume: None,
            out: None,
        }
    }
}

/// Flags shared by the training commands.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// cross_entropy (ce), hinge, or mse.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_prompt_loss: bool,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.loss_kind, self.loss);
        set(&mut cfg.seed, self.seed);
        if self.mask_prompt_loss {
            cfg.mask_prompt_loss = true;
        }
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: katz_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ExampleKind, String> {
    match s {
        "sc" => Ok(ExampleKind::Sc),
        "qa" => Ok(ExampleKind::Qa),
        other => Err(format!("kind must be sc or qa, got {other:?}")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// `sc` for a sentence CSV, `qa` for a QA JSON file.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ExampleKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

enum Records {
    Sc(Vec<SentencePair>),
    Qa(Vec<QAPair>),
}

impl Records {
    fn read(path: &Path, kind: ExampleKind) -> Result<Self> {
        Ok(match kind {
            ExampleKind::Sc => Records::Sc(data::load_sentence_pairs(path)?),
            ExampleKind::Qa => Records::Qa(data::load_qa(path)?),
        })
    }

    fn encode(
        &self,
        path: &Path,
        vocab: &Vocabulary,
        n_ctx: usize,
        mask: bool,
    ) -> Vec<katz_core::corpus::EncodedExample> {
        let report = match self {
            Records::Sc(r) => build_examples(r, vocab, n_ctx, mask),
            Records::Qa(r) => build_examples(r, vocab, n_ctx, mask),
        };
        if !report.dropped.is_empty() {
            eprintln!(
                "warning: {}: dropped {} records whose target does not fit the context",
                path.display(),
                report.dropped.len()
            );
        }
        report.examples
    }
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = load_config(args.config.as_deref())?;
    if args.corpus.is_some() {
        cfg.corpus = args.corpus;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if args.resume.is_some() {
        cfg.resume = args.resume;
    }
    set(&mut cfg.kind, args.kind);
    set(&mut cfg.model.n_blocks, args.n_blocks);
    set(&mut cfg.init_seed, args.init_seed);
    args.flags.apply(&mut cfg.train);
    cfg.train.stage = match cfg.kind {
        ExampleKind::Sc => Stage::SentenceCompletion,
        ExampleKind::Qa => Stage::Qa,
    };
    let corpus = require(&cfg.corpus, "--corpus")?.to_path_buf();
    let out = require(&cfg.out, "--out")?.to_path_buf();
    cfg.train.validate()?;

    let records = Records::read(&corpus, cfg.kind)?;
    let vocab = cfg.tokenizer.load()?;
    let (mut model, state) = match &cfg.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            let state = ck.state.clone();
            (ck.into_model(), state)
        }
        None => {
            check_vocab(&cfg.model, &vocab)?;
            (Model::<f32>::init(cfg.model.clone(), cfg.init_seed)?, None)
        }
    };
    check_vocab(&model.config, &vocab)?;
    let examples = records.encode(
        &corpus,
        &vocab,
        model.config.n_ctx,
        cfg.train.mask_prompt_loss,
    );
    let tc = cfg.train.clone();
    let state = train_with(&mut model, &examples, &cfg.train, state, |m, s| {
        println!(
            "epoch {} loss {:.6}",
            s.history.len(),
            s.history.last().unwrap()
        );
        Checkpoint::from_model(m)
            .with_state(s.clone(), tc.clone())
            .save(&out)
            .map_err(|e| katz_core::Error::Data(e.to_string()))
    })?;
    Checkpoint::from_model(&model)
        .with_state(state, cfg.train)
        .save(&out)
}

// ------------------------------------------------------------------ finetune

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub sentence_completion: TrainConfig,
    pub qa: TrainConfig,
    pub sentences: Option<PathBuf>,
    pub qa_corpus: Option<PathBuf>,
    pub skip_sentence_completion: bool,
    pub tokenizer: TokenizerConfig,
    pub init_seed: u64,
    /// Starting weights; a fresh initialization when absent.
    pub init: Option<PathBuf>,
    /// Receives `sentence_completion.ckpt` and `qa.ckpt`.
    pub out_dir: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sentence_completion: TrainConfig {
                stage: Stage::SentenceCompletion,
                ..TrainConfig::default()
            },
            qa: TrainConfig::default(),
            sentences: None,
            qa_corpus: None,
            skip_sentence_completion: false,
            tokenizer: TokenizerConfig::default(),
            init_seed: 0,
            init: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sentences: Option<PathBuf>,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    skip_sentence_completion: bool,
    #[arg(long)]
    n_blocks: Option<usize>,
    /// Applied to both stages.
    #[command(flatten)]
    flags: TrainFlags,
}

pub fn stage_checkpoint_name(stage: Stage) -> String {
    format!("{}.ckpt", stage.name())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let mut cfg: FinetuneConfig = load_config(args.config.as_deref())?;
    if args.sentences.is_some() {
        cfg.sentences = args.sentences;
    }
    if args.qa.is_some() {
        cfg.qa_corpus = args.qa;
    }
    if args.out_dir.is_some() {
        cfg.out_dir = args.out_dir;
    }
    if args.init.is_some() {
        cfg.init = args.init;
    }
    cfg.skip_sentence_completion |= args.skip_sentence_completion;
    set(&mut cfg.model.n_blocks, args.n_blocks);
    args.flags.apply(&mut cfg.sentence_completion);
    args.flags.apply(&mut cfg.qa);
    let out = require(&cfg.out_dir, "--out-dir")?.to_path_buf();
    let qa_path = require(&cfg.qa_corpus, "--qa")?.to_path_buf();

    let sc_records = if cfg.skip_sentence_completion {
        None
    } else {
        let p = require(&cfg.sentences, "--sentences")?.to_path_buf();
        Some((Records::read(&p, ExampleKind::Sc)?, p))
    };
    let qa_records = Records::read(&qa_path, ExampleKind::Qa)?;
    let vocab = cfg.tokenizer.load()?;
    let mut model = match &cfg.init {
        Some(p) => Checkpoint::<f32>::load(p)?.into_model(),
        None => {
            check_vocab(&cfg.model, &vocab)?;
            Model::<f32>::init(cfg.model.clone(), cfg.init_seed)?
        }
    };
    check_vocab(&model.config, &vocab)?;
    let n_ctx = model.config.n_ctx;
    let sc = match &sc_records {
        Some((r, p)) => r.encode(p, &vocab, n_ctx, cfg.sentence_completion.mask_prompt_loss),
        None => Vec::new(),
    };
    let qa = qa_records.encode(&qa_path, &vocab, n_ctx, cfg.qa.mask_prompt_loss);
    finetune_sequential(
        &mut model,
        &sc,
        &qa,
        &cfg.sentence_completion,
        &cfg.qa,
        cfg.skip_sentence_completion,
        |m, s| {
            let tc = match s.stage {
                Stage::SentenceCompletion => cfg.sentence_completion.clone(),
                _ => cfg.qa.clone(),
            };
            println!(
                "stage {} done after {} epochs, loss {:.6}",
                s.stage.name(),
                s.history.len(),
                s.history.last().copied().unwrap_or(f64::NAN)
            );
            Checkpoint::from_model(m)
                .with_state(s.clone(), tc)
                .save(out.join(stage_checkpoint_name(s.stage)))
                .map_err(|e| katz_core::Error::Data(e.to_string()))
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSONL, one `{question, reference, prediction}` per line.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// `name=path` entry for a model comparison; repeatable.
    #[arg(long = "model", value_name = "NAME=PATH")]
    models: Vec<String>,
    /// Write predictions from this checkpoint for `--qa` first.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// `eval` report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalOutput {
    Single(EvalReport),
    Comparison { models: Vec<ModelRow> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tokenizer: TokenizerConfig,
}

fn predict(
    ck: &Path,
    qa: &Path,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<Vec<PredictionRecord>> {
    let model = Checkpoint::<f32>::load(ck)?.into_model();
    check_vocab(&model.config, vocab)?;
    let pairs = data::load_qa(qa)?;
    let opts = DecodeOptions {
        max_new_tokens,
        ..DecodeOptions::default()
    };
    let mut rng = RngStream::new(0);
    pairs
        .iter()
        .map(|p| {
            let a = model.answer(vocab, &p.question, &opts, &mut rng)?;
            Ok(PredictionRecord {
                question: p.question.clone(),
                reference: p.answer.clone(),
                prediction: a.text,
            })
        })
        .collect()
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let cfg: EvalConfig = load_config(args.config.as_deref())?;
    if !args.models.is_empty() {
        if args.predictions.is_some() || args.checkpoint.is_some() {
            return Err(Error::Usage(
                "--model cannot be combined with --predictions or --checkpoint".into(),
            ));
        }
        let mut entries = Vec::new();
        for m in &args.models {
            let (name, path) = m
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--model expects NAME=PATH, got {m:?}")))?;
            let records = data::load_predictions(Path::new(path))?;
            entries.push((name.to_string(), evaluate_records(&records)?));
        }
        let rows = compare_models(&entries)?;
        print!("{}", comparison_table(&rows));
        if let Some(r) = &args.report {
            data::write_json(r, &EvalOutput::Comparison { models: rows })?;
        }
        return Ok(());
    }

    let pred_path = require(&args.predictions, "--predictions")?;
    if let Some(ck) = &args.checkpoint {
        let qa = require(&args.qa, "--qa")?;
        let vocab = cfg.tokenizer.load()?;
        let records = predict(ck, qa, &vocab, args.max_new_tokens)?;
        data::write_predictions(pred_path, &records)?;
    }
    let records = data::load_predictions(pred_path)?;
    let report = evaluate_records(&records)?;
    let c = &report.corpus;
    let row = |name: &str, p: &katz_core::eval::Prf| {
        vec![
            name.to_string(),
            format!("{:.4}", p.precision),
            format!("{:.4}", p.recall),
            format!("{:.4}", p.f),
        ]
    };
    print!(
        "{}",
        render_table(
            &["metric", "precision", "recall", "f"],
            &[
                row("rouge1", &c.rouge1),
                row("rouge2", &c.rouge2),
                row("rougeL", &c.rouge_l)
            ],
        )
    );
    println!("records: {}", report.records);
    if let Some(r) = &args.report {
        data::write_json(r, &EvalOutput::Single(report))?;
    }
    Ok(())
}

// -------------------------------------------------------------------- ablate

/// Corpus files of an ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCorpus {
    #[serde(default)]
    pub sentences: Option<PathBuf>,
    pub qa: PathBuf,
    /// Held-out questions. When absent, `qa` is split with
    /// `test_fraction` and `split_seed`.
    #[serde(default)]
    pub qa_test: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

/// Ablation spec file: the sweep itself plus a `corpus` object and an
/// optional `tokenizer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    #[serde(flatten)]
    pub spec: AblationSpec,
    pub corpus: AblationCorpus,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
}

fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variable: AblationVariable,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn ablate_file(file: &AblationFile) -> Result<AblationReport> {
    let vocab = file.tokenizer.load()?;
    check_vocab(&file.spec.model, &vocab)?;
    let c = &file.corpus;
    let sentences: Vec<SentencePair> = match (&c.sentences, file.spec.skip_sentence_completion) {
        (_, true) => Vec::new(),
        (Some(p), false) => data::load_sentence_pairs(p)?,
        (None, false) => {
            return Err(Error::Usage(
                "ablation spec needs sentences unless skip_sentence_completion".into(),
            ))
        }
    };
    let qa = data::load_qa(&c.qa)?;
    let (train, test): (Vec<QAPair>, Vec<QAPair>) = match &c.qa_test {
        Some(p) => (qa, data::load_qa(p)?),
        None => train_test_split(&qa, c.test_fraction, c.split_seed)?,
    };
    let rows = run_ablation(
        &file.spec,
        &vocab,
        AblationData {
            sentence_completion: &sentences,
            qa_train: &train,
            qa_test: &test,
        },
    )?;
    Ok(AblationReport {
        variable: file.spec.variable,
        rows,
    })
}

fn ablate(args: AblateArgs) -> Result<()> {
    let file: AblationFile = data::read_json(&args.spec)?;
    let report = ablate_file(&file)?;
    print!("{}", ablation_table(report.variable, &report.rows));
    if let Some(r) = &args.report {
        data::write_json(r, &report)?;
    }
    Ok(())
}

// ------------------------------------------------------------------ generate

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub checkpoint: Option<PathBuf>,
    pub tokenizer: TokenizerConfig,
    pub decode: DecodeOptions,
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    /// Treat the prompt as a question and answer it.
    #[arg(long)]
    question: bool,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg: GenerateConfig = load_config(args.config.as_deref())?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    set(&mut cfg.decode.max_new_tokens, args.max_new_tokens);
    set(&mut cfg.decode.temperature, args.temperature);
    set(&mut cfg.decode.top_k, args.top_k);
    set(&mut cfg.seed, args.seed);
    let model = Checkpoint::<f32>::load(require(&cfg.checkpoint, "--checkpoint")?)?.into_model();
    let vocab = cfg.tokenizer.load()?;
    check_vocab(&model.config, &vocab)?;
    let mut rng = RngStream::new(cfg.seed);
    let answer = if args.question {
        model.answer(&vocab, &args.prompt, &cfg.decode, &mut rng)?
    } else {
        if args.prompt.is_empty() {
            return Err(Error::Usage("--prompt must be nonempty".into()));
        }
        model.reply(&vocab, vocab.encode(&args.prompt), &cfg.decode, &mut rng)?
    };
    println!("{}", answer.text);
    Ok(())
}

// --------------------------------------------------------------------- serve

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Config file, then environment, then flags.
pub fn service_config(args: &ServeArgs) -> Result<ServiceConfig> {
    let mut cfg: ServiceConfig = load_config(args.config.as_deref())?;
    cfg.apply_env();
    if let Some(a) = &args.addr {
        cfg.addr = a.clone();
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    Ok(cfg)
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = service_config(&args)?;
    let addr = cfg.addr.clone();
    let state = AppState::from_config(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Error::io("tokio runtime"))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(Error::io(addr.clone()))?;
        let local = listener.local_addr().map_err(Error::io(addr.clone()))?;
        println!("listening on http://{local}");
        service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

// ------------------------------------------------------------------ dispatch

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Usage(_) = e {
                eprintln!("run `katz --help` for usage");
            }
            e.exit_code()
        }
    }
}
