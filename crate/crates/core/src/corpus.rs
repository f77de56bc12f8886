//! Record schemas, text cleaning, and training-example construction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::tokenizer::Vocabulary;

/// NFC-normalize, drop control characters, collapse whitespace runs to a
/// single space, and trim.
///
/// Whitespace controls (tab, carriage return, form feed) count as
/// whitespace rather than being deleted, so `"a\tb"` becomes `"a b"`.
pub fn clean_text(raw: &str) -> String {
    let filtered: String = raw
        .chars()
        .filter(|c| !c.is_control() || c.is_whitespace())
        .collect();
    let mut out = String::with_capacity(filtered.len());
    let mut pending_space = false;
    for c in filtered.nfc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// Which fine-tuning stage a record type feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Sc,
    Qa,
}

/// A two-field corpus record: a context and the text to be predicted.
pub trait Record: Clone {
    const KIND: ExampleKind;

    fn context(&self) -> &str;
    fn target(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub sentence1: String,
    pub sentence2: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

fn cleaned_pair(a: &str, b: &str, names: [&str; 2]) -> Result<(String, String)> {
    let (a, b) = (clean_text(a), clean_text(b));
    for (v, name) in [(&a, names[0]), (&b, names[1])] {
        if v.is_empty() {
            return Err(Error::Data(format!("{name} is empty after cleaning")));
        }
    }
    Ok((a, b))
}

impl SentencePair {
    /// Cleans both fields; either one empty afterwards is a data error.
    pub fn new(sentence1: &str, sentence2: &str) -> Result<Self> {
        let (sentence1, sentence2) =
            cleaned_pair(sentence1, sentence2, ["sentence1", "sentence2"])?;
        Ok(Self {
            sentence1,
            sentence2,
        })
    }
}

impl QAPair {
    pub fn new(question: &str, answer: &str) -> Result<Self> {
        let (question, answer) = cleaned_pair(question, answer, ["question", "answer"])?;
        Ok(Self { question, answer })
    }
}

impl Record for SentencePair {
    const KIND: ExampleKind = ExampleKind::Sc;

    fn context(&self) -> &str {
        &self.sentence1
    }

    fn target(&self) -> &str {
        &self.sentence2
    }
}

impl Record for QAPair {
    const KIND: ExampleKind = ExampleKind::Qa;

    fn context(&self) -> &str {
        &self.question
    }

    fn target(&self) -> &str {
        &self.answer
    }
}

fn dedupe_key<R: Record>(r: &R) -> String {
    // Cleaned text holds no control characters, so NUL cannot be ambiguous.
    let mut key = r.context().to_lowercase();
    key.push('\0');
    key.push_str(&r.target().to_lowercase());
    key
}

/// Keeps the first of each group of records whose case-folded fields agree.
pub fn dedupe<R: Record>(records: &[R]) -> Vec<R> {
    let mut seen = BTreeMap::new();
    records
        .iter()
        .filter(|r| seen.insert(dedupe_key(*r), ()).is_none())
        .cloned()
        .collect()
}

/// One next-token-prediction sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Positions contributing to the loss.
    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Output of [`build_examples`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub examples: Vec<EncodedExample>,
    /// Input indices of records whose target alone does not fit.
    pub dropped: Vec<usize>,
    /// Number of kept records whose context was cut from the left.
    pub truncated: usize,
}

/// `context + [sep] + target + [eot]`, context truncated from the left to
/// fit `n_ctx`. `None` when the target, sep and eot alone exceed `n_ctx`.
///
/// Labels are the inputs shifted left with a final end-of-text. With
/// `mask_prompt_loss`, positions whose label lies in the context or is the
/// separator are excluded, so the separator position still learns the first
/// target token.
pub fn encode_pair(
    vocab: &Vocabulary,
    context: &str,
    target: &str,
    n_ctx: usize,
    mask_prompt_loss: bool,
) -> Option<(EncodedExample, bool)> {
    let sp = vocab.specials();
    let ctx = vocab.encode(context);
    let tgt = vocab.encode(target);
    let fixed = tgt.len() + 2;
    if fixed > n_ctx {
        return None;
    }
    let ctx_len = ctx.len();
    let keep = ctx_len.min(n_ctx - fixed);
    let ctx = &ctx[ctx_len - keep..];
    let mut input_ids = Vec::with_capacity(keep + fixed);
    input_ids.extend_from_slice(ctx);
    input_ids.push(sp.sep);
    input_ids.extend_from_slice(&tgt);
    input_ids.push(sp.end_of_text);
    let mut label_ids = input_ids[1..].to_vec();
    label_ids.push(sp.end_of_text);
    let loss_mask = (0..input_ids.len())
        .map(|t| !mask_prompt_loss || t >= keep)
        .collect();
    let example = EncodedExample {
        input_ids,
        label_ids,
        loss_mask,
    };
    Some((example, keep < ctx_len))
}

pub fn build_examples<R: Record>(
    records: &[R],
    vocab: &Vocabulary,
    n_ctx: usize,
    mask_prompt_loss: bool,
) -> BuildReport {
    let mut report = BuildReport::default();
    for (i, r) in records.iter().enumerate() {
        match encode_pair(vocab, r.context(), r.target(), n_ctx, mask_prompt_loss) {
            Some((ex, cut)) => {
                report.truncated += cut as usize;
                report.examples.push(ex);
            }
            None => report.dropped.push(i),
        }
    }
    report
}

/// Right-pads every example to the longest one; pads are masked out.
pub fn pad_batch(examples: &[EncodedExample], pad_id: u32) -> Vec<EncodedExample> {
    let width = examples.iter().map(EncodedExample::len).max().unwrap_or(0);
    examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.input_ids.resize(width, pad_id);
            e.label_ids.resize(width, pad_id);
            e.loss_mask.resize(width, false);
            e
        })
        .collect()
}

/// Seeded partition; both halves keep input order. The test half has
/// `round(n · test_fraction)` records.
pub fn train_test_split<R: Clone>(
    records: &[R],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<R>, Vec<R>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n = records.len();
    let n_test = num_traits::Float::round(n as f64 * test_fraction) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut order);
    let mut in_test = alloc::vec![false; n];
    for &i in &order[..n_test] {
        in_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Width of each token-length histogram bucket.
pub const HISTOGRAM_BUCKET: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub duplicates_removed: usize,
    pub examples: usize,
    pub dropped: usize,
    pub truncated: usize,
    /// Bucket lower bound → example count.
    pub token_length_histogram: BTreeMap<usize, usize>,
    pub max_length: usize,
}

impl CorpusStats {
    pub fn new(records: usize, after_dedupe: usize, report: &BuildReport) -> Self {
        let mut hist = BTreeMap::new();
        for e in &report.examples {
            *hist
                .entry(e.len() / HISTOGRAM_BUCKET * HISTOGRAM_BUCKET)
                .or_insert(0) += 1;
        }
        Self {
            records,
            duplicates_removed: records - after_dedupe,
            examples: report.examples.len(),
            dropped: report.dropped.len(),
            truncated: report.truncated,
            token_length_histogram: hist,
            max_length: report
                .examples
                .iter()
                .map(EncodedExample::len)
                .max()
                .unwrap_or(0),
        }
    }
}
