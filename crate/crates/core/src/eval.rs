//! ROUGE scoring, model comparison tables, and ablation sweeps.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_examples, QAPair, SentencePair};
use crate::error::{Error, Result};
use crate::model::{DecodeOptions, Model, ModelConfig};
use crate::numerics::RngStream;
use crate::tokenizer::Vocabulary;
use crate::train::{finetune_sequential, LossKind, TrainConfig};

/// Case-folded alphanumeric runs.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    /// Precision and recall from a match count; F is the plain harmonic
    /// mean. An empty side gives zero for the ratio it divides.
    pub fn from_counts(matches: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |n: usize| {
            if n == 0 {
                0.0
            } else {
                matches as f64 / n as f64
            }
        };
        let (p, r) = (ratio(candidate), ratio(reference));
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        Self {
            precision: p,
            recall: r,
            f,
        }
    }

    fn mean(items: impl Iterator<Item = Prf>) -> Prf {
        let (mut sum, mut n) = (Prf::default(), 0usize);
        for x in items {
            sum.precision += x.precision;
            sum.recall += x.recall;
            sum.f += x.f;
            n += 1;
        }
        let d = n.max(1) as f64;
        Prf {
            precision: sum.precision / d,
            recall: sum.recall / d,
            f: sum.f / d,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

fn rouge_n_tokens(cand: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |x: &[String]| (x.len() + 1).saturating_sub(n);
    Prf::from_counts(overlap, total(cand), total(reference))
}

/// Clipped n-gram overlap between candidate and reference.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::precondition("ROUGE-N needs n >= 1"));
    }
    Ok(rouge_n_tokens(
        &rouge_tokens(candidate),
        &rouge_tokens(reference),
        n,
    ))
}

/// Length of the longest common subsequence.
pub fn lcs_len<X: PartialEq>(a: &[X], b: &[X]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&rouge_tokens(candidate), &rouge_tokens(reference))
}

/// ROUGE-L over already tokenized sequences.
pub fn rouge_l_tokens<X: PartialEq>(candidate: &[X], reference: &[X]) -> Prf {
    Prf::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn score(candidate: &str, reference: &str) -> RougeScores {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    RougeScores {
        rouge1: rouge_n_tokens(&c, &r, 1),
        rouge2: rouge_n_tokens(&c, &r, 2),
        rouge_l: rouge_l_tokens(&c, &r),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question: String,
    pub reference: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    /// Mean of the per-record scores.
    pub corpus: RougeScores,
    pub per_record: Vec<RougeScores>,
}

pub fn evaluate_records(records: &[PredictionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::data("no prediction records"));
    }
    if let Some(i) = records.iter().position(|r| r.reference.trim().is_empty()) {
        return Err(Error::DataAt {
            position: i,
            message: "empty reference".to_string(),
        });
    }
    let per_record: Vec<RougeScores> = records
        .iter()
        .map(|r| score(&r.prediction, &r.reference))
        .collect();
    let corpus = RougeScores {
        rouge1: Prf::mean(per_record.iter().map(|s| s.rouge1)),
        rouge2: Prf::mean(per_record.iter().map(|s| s.rouge2)),
        rouge_l: Prf::mean(per_record.iter().map(|s| s.rouge_l)),
    };
    Ok(EvalReport {
        records: records.len(),
        corpus,
        per_record,
    })
}

/// Left-aligned text table with a dashed rule under the header.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(cell);
            s.extend(core::iter::repeat_n(' ', w - cell.chars().count()));
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(&mut header.iter().copied());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&mut rule.iter().map(String::as_str)));
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub best: bool,
}

/// One row per model, ascending by Rouge-L F with ties broken by name.
/// Rows sharing the highest Rouge-L are marked best.
pub fn compare_models(entries: &[(String, EvalReport)]) -> Result<Vec<ModelRow>> {
    if entries.is_empty() {
        return Err(Error::config("no models to compare"));
    }
    let mut names = BTreeMap::new();
    for (name, _) in entries {
        if names.insert(name.as_str(), ()).is_some() {
            return Err(Error::config(format!("duplicate model name {name:?}")));
        }
    }
    let mut rows: Vec<ModelRow> = entries
        .iter()
        .map(|(name, r)| ModelRow {
            name: name.clone(),
            rouge1: r.corpus.rouge1.f,
            rouge2: r.corpus.rouge2.f,
            rouge_l: r.corpus.rouge_l.f,
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.rouge_l
            .total_cmp(&b.rouge_l)
            .then_with(|| a.name.cmp(&b.name))
    });
    let top = rows.last().map(|r| r.rouge_l).unwrap_or(0.0);
    for r in &mut rows {
        r.best = r.rouge_l == top;
    }
    Ok(rows)
}

pub fn comparison_table(rows: &[ModelRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            alloc::vec![
                if r.best {
                    format!("{} *", r.name)
                } else {
                    r.name.clone()
                },
                format!("{:.4}", r.rouge1),
                format!("{:.4}", r.rouge2),
                format!("{:.4}", r.rouge_l),
            ]
        })
        .collect();
    render_table(&["model", "rouge1", "rouge2", "rougeL"], &body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariable {
    NBlocks,
    LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AblationValue {
    NBlocks(usize),
    Loss(LossKind),
}

impl AblationValue {
    pub fn label(&self) -> String {
        match self {
            AblationValue::NBlocks(n) => n.to_string(),
            AblationValue::Loss(k) => k.name().to_string(),
        }
    }
}

/// A one-variable sweep over a shared base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variable: AblationVariable,
    pub values: Vec<AblationValue>,
    pub model: ModelConfig,
    pub sentence_completion: TrainConfig,
    pub qa: TrainConfig,
    #[serde(default)]
    pub skip_sentence_completion: bool,
    /// Seed of every run's fresh weight initialization.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_answer_tokens")]
    pub max_new_tokens: usize,
}

fn default_answer_tokens() -> usize {
    64
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("ablation needs at least one value"));
        }
        for v in &self.values {
            match (self.variable, v) {
                (AblationVariable::NBlocks, AblationValue::NBlocks(n)) if *n > 0 => {}
                (AblationVariable::LossKind, AblationValue::Loss(_)) => {}
                _ => {
                    return Err(Error::config(format!(
                        "value {} is not valid for {:?}",
                        v.label(),
                        self.variable
                    )))
                }
            }
        }
        self.model.validate()?;
        self.sentence_completion.validate()?;
        self.qa.validate()
    }

    /// Model and stage configs for one sweep value.
    pub fn configs_for(&self, value: AblationValue) -> (ModelConfig, TrainConfig, TrainConfig) {
        let (mut m, mut sc, mut qa) = (
            self.model.clone(),
            self.sentence_completion.clone(),
            self.qa.clone(),
        );
        match value {
            AblationValue::NBlocks(n) => m.n_blocks = n,
            AblationValue::Loss(k) => {
                sc.loss_kind = k;
                qa.loss_kind = k;
            }
        }
        (m, sc, qa)
    }
}

/// Corpora shared by every run of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub sentence_completion: &'a [SentencePair],
    pub qa_train: &'a [QAPair],
    pub qa_test: &'a [QAPair],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub final_loss: f64,
}

fn ablation_run(
    spec: &AblationSpec,
    value: AblationValue,
    vocab: &Vocabulary,
    data: AblationData<'_>,
) -> Result<AblationRow> {
    let (mcfg, sc_cfg, qa_cfg) = spec.configs_for(value);
    let mut model = Model::<f32>::init(mcfg, spec.init_seed)?;
    let n_ctx = model.config.n_ctx;
    let sc = build_examples(
        data.sentence_completion,
        vocab,
        n_ctx,
        sc_cfg.mask_prompt_loss,
    );
    let qa = build_examples(data.qa_train, vocab, n_ctx, qa_cfg.mask_prompt_loss);
    let outcome = finetune_sequential(
        &mut model,
        &sc.examples,
        &qa.examples,
        &sc_cfg,
        &qa_cfg,
        spec.skip_sentence_completion,
        |_, _| Ok(()),
    )?;
    let opts = DecodeOptions {
        max_new_tokens: spec.max_new_tokens,
        ..DecodeOptions::default()
    };
    let mut rng = RngStream::new(0);
    let mut preds = Vec::with_capacity(data.qa_test.len());
    for pair in data.qa_test {
        let answer = model.answer(vocab, &pair.question, &opts, &mut rng)?;
        preds.push(PredictionRecord {
            question: pair.question.clone(),
            reference: pair.answer.clone(),
            prediction: answer.text,
        });
    }
    let report = evaluate_records(&preds)?;
    Ok(AblationRow {
        value: value.label(),
        rouge1: report.corpus.rouge1.f,
        rouge2: report.corpus.rouge2.f,
        rouge_l: report.corpus.rouge_l.f,
        final_loss: outcome.qa.history.last().copied().unwrap_or(f64::NAN),
    })
}

/// For each value: fresh seeded weights, sequential fine-tuning, greedy
/// answers to the test questions, and corpus ROUGE. Only the swept
/// variable differs between runs.
pub fn run_ablation(
    spec: &AblationSpec,
    vocab: &Vocabulary,
    data: AblationData<'_>,
) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    spec.values
        .iter()
        .map(|&v| {
            ablation_run(spec, v, vocab, data).map_err(|e| Error::Ablation {
                value: v.label(),
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn ablation_table(variable: AblationVariable, rows: &[AblationRow]) -> String {
    let name = match variable {
        AblationVariable::NBlocks => "n_blocks",
        AblationVariable::LossKind => "loss_kind",
    };
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            alloc::vec![
                r.value.clone(),
                format!("{:.4}", r.rouge1),
                format!("{:.4}", r.rouge2),
                format!("{:.4}", r.rouge_l),
                format!("{:.4}", r.final_loss),
            ]
        })
        .collect();
    render_table(&[name, "rouge1", "rouge2", "rougeL", "final_loss"], &body)
}
