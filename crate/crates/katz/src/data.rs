//! Corpus, vocabulary, glossary, and prediction files.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use katz_core::corpus::{QAPair, SentencePair};
use katz_core::eval::PredictionRecord;
use katz_core::lingua::GlossaryTranslator;
use katz_core::Vocabulary;
use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn schema(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Reads a `sentence1,sentence2` CSV. Rows are numbered from 1 after the
/// header.
pub fn load_sentence_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| schema(path, 0, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| schema(path, 0, format!("missing column {name:?}")))
    };
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(katz_core::Error::Data(format!("{}: empty file", path.display())).into());
    }
    let (c1, c2) = (col("sentence1")?, col("sentence2")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| schema(path, row, e.to_string()))?;
        let get = |c: usize| rec.get(c).ok_or_else(|| schema(path, row, "short row"));
        let pair =
            SentencePair::new(get(c1)?, get(c2)?).map_err(|e| schema(path, row, e.to_string()))?;
        out.push(pair);
    }
    if out.is_empty() {
        return Err(katz_core::Error::Data(format!("{}: no records", path.display())).into());
    }
    Ok(out)
}

pub fn write_sentence_pairs(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in pairs {
        w.serialize(p).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().expect("in-memory writer");
    write_text(path, std::str::from_utf8(&bytes).expect("UTF-8 CSV"))
}

/// Reads a JSON array of `{"question", "answer"}` objects. Rows are
/// numbered from 1.
pub fn load_qa(path: &Path) -> Result<Vec<QAPair>> {
    let values: Vec<serde_json::Value> = read_json(path)?;
    if values.is_empty() {
        return Err(katz_core::Error::Data(format!("{}: no records", path.display())).into());
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let row = i + 1;
            let field = |k: &str| {
                v.get(k)
                    .and_then(|x| x.as_str())
                    .ok_or_else(|| schema(path, row, format!("missing string field {k:?}")))
            };
            QAPair::new(field("question")?, field("answer")?)
                .map_err(|e| schema(path, row, e.to_string()))
        })
        .collect()
}

pub fn write_qa(path: &Path, pairs: &[QAPair]) -> Result<()> {
    write_json(path, &pairs)
}

/// Fails when `expected` is given and differs from `found`.
pub fn check_count(path: &Path, found: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(katz_core::Error::Data(format!(
            "{}: expected {e} records, found {found}",
            path.display()
        ))
        .into()),
        _ => Ok(()),
    }
}

/// Token→id entries of a vocabulary JSON object, in file order, with
/// duplicate keys preserved so they can be reported.
struct Entries(Vec<(String, u32)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object mapping tokens to ids")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, u32>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Loads a GPT-2 style vocabulary (token→id JSON) and merges file.
pub fn load_vocabulary(vocab_path: &Path, merges_path: &Path) -> Result<Vocabulary> {
    let Entries(entries) = read_json(vocab_path)?;
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = entries.iter().find(|(k, _)| !seen.insert(k.as_str())) {
        return Err(Error::Json {
            path: vocab_path.to_path_buf(),
            message: format!("duplicate token {dup:?}"),
        });
    }
    let merges = read_text(merges_path)?;
    Ok(Vocabulary::from_gpt2(entries, &merges)?)
}

/// Tokenizer selection: GPT-2 files when both paths are given, otherwise
/// the byte-level fallback.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
}

impl TokenizerConfig {
    pub fn load(&self) -> Result<Vocabulary> {
        match (&self.vocab, &self.merges) {
            (Some(v), Some(m)) => load_vocabulary(v, m),
            (None, None) => Ok(Vocabulary::bytes()),
            _ => Err(Error::Usage(
                "tokenizer needs both vocab and merges paths".into(),
            )),
        }
    }
}

pub fn load_glossary(path: &Path) -> Result<GlossaryTranslator> {
    Ok(GlossaryTranslator::parse(&read_text(path)?)?)
}

/// One `{"question","reference","prediction"}` object per line; blank
/// lines are skipped. Errors carry 1-based line numbers.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| {
            Error::Core(katz_core::Error::Parse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.write_all(b"\n").expect("in-memory write");
    }
    write_text(path, std::str::from_utf8(&buf).expect("UTF-8 JSON"))
}
