//! Speech, language detection, translation, and the chat pipeline that
//! wraps the English-only model for Chinese and voice input.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Answer, DecodeOptions, Model};
use crate::numerics::{Real, RngStream};
use crate::tokenizer::Vocabulary;

/// Media type whose payload the mock recognizer reads back as UTF-8 text.
pub const MOCK_AUDIO_MEDIA_TYPE: &str = "text/x-mock-audio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LangCode {
    En,
    Zh,
    Unknown,
}

impl LangCode {
    pub fn as_str(self) -> &'static str {
        match self {
            LangCode::En => "en",
            LangCode::Zh => "zh",
            LangCode::Unknown => "unknown",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        match code {
            "en" => Ok(LangCode::En),
            "zh" => Ok(LangCode::Zh),
            "unknown" => Ok(LangCode::Unknown),
            other => Err(Error::UnsupportedLanguage(other.to_string())),
        }
    }
}

pub trait SpeechToText: Send + Sync {
    fn transcribe(
        &self,
        payload: &[u8],
        media_type: &str,
        hint: Option<LangCode>,
    ) -> Result<String>;
}

pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> Result<LangCode>;
}

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, target: LangCode) -> Result<String>;
}

/// Reads `text/x-mock-audio` payloads as UTF-8 transcripts.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockSpeech;

impl SpeechToText for MockSpeech {
    fn transcribe(
        &self,
        payload: &[u8],
        media_type: &str,
        _hint: Option<LangCode>,
    ) -> Result<String> {
        if payload.is_empty() {
            return Err(Error::precondition("empty audio payload"));
        }
        if media_type != MOCK_AUDIO_MEDIA_TYPE {
            return Err(Error::Upstream {
                stage: "stt",
                message: format!("mock recognizer cannot read {media_type:?}"),
            });
        }
        String::from_utf8(payload.to_vec()).map_err(|e| Error::Upstream {
            stage: "stt",
            message: format!("payload is not UTF-8: {e}"),
        })
    }
}

fn is_cjk(c: char) -> bool {
    ('\u{4E00}'..='\u{9FFF}').contains(&c)
}

/// Character-class rule: at least 30% CJK ideographs among non-space
/// characters is Chinese, otherwise at least 50% ASCII letters is English.
pub fn detect_rule(text: &str) -> Result<LangCode> {
    let (mut total, mut cjk, mut ascii) = (0usize, 0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        cjk += is_cjk(c) as usize;
        ascii += c.is_ascii_alphabetic() as usize;
    }
    if total == 0 {
        return Err(Error::precondition(
            "cannot detect the language of empty text",
        ));
    }
    Ok(if cjk * 10 >= total * 3 {
        LangCode::Zh
    } else if ascii * 2 >= total {
        LangCode::En
    } else {
        LangCode::Unknown
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleDetector;

impl LanguageDetector for RuleDetector {
    fn detect(&self, text: &str) -> Result<LangCode> {
        detect_rule(text)
    }
}

/// Phrase-substitution translator over a Chinese/English glossary.
///
/// Each row is classified by which side is Chinese, so rows may be written
/// in either direction. Translation replaces the longest glossary phrase
/// starting at each position and copies unmatched characters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlossaryTranslator {
    zh_to_en: Vec<(String, String)>,
    en_to_zh: Vec<(String, String)>,
}

impl GlossaryTranslator {
    pub fn new(rows: &[(String, String)]) -> Self {
        let mut t = Self::default();
        for (a, b) in rows {
            let (zh, en) =
                if detect_rule(a) == Ok(LangCode::Zh) || detect_rule(b) != Ok(LangCode::Zh) {
                    (a, b)
                } else {
                    (b, a)
                };
            t.zh_to_en.push((zh.clone(), en.clone()));
            t.en_to_zh.push((en.clone(), zh.clone()));
        }
        // Longest phrase first; stable so earlier rows win ties.
        for table in [&mut t.zh_to_en, &mut t.en_to_zh] {
            table.sort_by_key(|x| core::cmp::Reverse(x.0.len()));
            table.retain(|(k, _)| !k.is_empty());
        }
        t
    }

    /// Parses `source<TAB>target` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((src, dst)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected source<TAB>target".to_string(),
                });
            };
            rows.push((src.to_string(), dst.to_string()));
        }
        Ok(Self::new(&rows))
    }

    pub fn len(&self) -> usize {
        self.zh_to_en.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zh_to_en.is_empty()
    }

    fn substitute(table: &[(String, String)], text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            match table.iter().find(|(k, _)| rest.starts_with(k.as_str())) {
                Some((k, v)) => {
                    // Adjacent CJK terms carry no space; their Latin
                    // translations need one.
                    let word = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric());
                    if word(out.chars().next_back()) && word(v.chars().next()) {
                        out.push(' ');
                    }
                    out.push_str(v);
                    rest = &rest[k.len()..];
                }
                None => {
                    out.push(c);
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        out
    }
}

impl Translator for GlossaryTranslator {
    fn translate(&self, text: &str, target: LangCode) -> Result<String> {
        let table = match target {
            LangCode::En => &self.zh_to_en,
            LangCode::Zh => &self.en_to_zh,
            LangCode::Unknown => return Err(Error::UnsupportedLanguage("unknown".to_string())),
        };
        match detect_rule(text)? {
            LangCode::Unknown => Err(Error::UnsupportedLanguage(format!(
                "cannot translate from an unknown language into {}",
                target.as_str()
            ))),
            source if source == target => Ok(text.to_string()),
            _ => Ok(Self::substitute(table, text)),
        }
    }
}

/// The three providers a pipeline needs. Unbound slots fail at use.
#[derive(Default)]
pub struct Providers {
    pub stt: Option<Box<dyn SpeechToText>>,
    pub detector: Option<Box<dyn LanguageDetector>>,
    pub translator: Option<Box<dyn Translator>>,
}

impl Providers {
    pub fn mock(glossary: GlossaryTranslator) -> Self {
        Self {
            stt: Some(Box::new(MockSpeech)),
            detector: Some(Box::new(RuleDetector)),
            translator: Some(Box::new(glossary)),
        }
    }

    fn stt(&self) -> Result<&dyn SpeechToText> {
        self.stt
            .as_deref()
            .ok_or_else(|| Error::config("no speech-to-text provider bound"))
    }

    fn detector(&self) -> Result<&dyn LanguageDetector> {
        self.detector
            .as_deref()
            .ok_or_else(|| Error::config("no language detector bound"))
    }

    fn translator(&self) -> Result<&dyn Translator> {
        self.translator
            .as_deref()
            .ok_or_else(|| Error::config("no translator bound"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatInput {
    Text(String),
    Audio {
        payload: Vec<u8>,
        media_type: String,
        hint: Option<LangCode>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Text,
    Audio,
}

/// Microsecond timestamps for stage timings.
pub trait Clock {
    fn now_micros(&self) -> u64;
}

/// A clock that always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub micros: u64,
}

/// Everything one pass through the pipeline saw and produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub input_kind: InputKind,
    pub transcript: String,
    pub detected: LangCode,
    pub english: String,
    pub prompt_ids: Vec<u32>,
    pub reply_ids: Vec<u32>,
    pub reply: String,
    pub final_reply: String,
    pub timings: Vec<StageTiming>,
}

/// Token history of one conversation: whole turns of
/// `question [sep] reply [eot]`, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChatHistory {
    turns: VecDeque<Vec<u32>>,
    last_lang: Option<LangCode>,
}

impl ChatHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.turns.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.turns.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn turns(&self) -> usize {
        self.turns.len()
    }

    pub fn last_lang(&self) -> Option<LangCode> {
        self.last_lang
    }

    /// Prompt `history + question + [sep]` leaving `reply_budget` positions
    /// free, evicting whole oldest turns as needed.
    pub fn prompt(
        &mut self,
        question: &[u32],
        sep: u32,
        n_ctx: usize,
        reply_budget: usize,
    ) -> Result<Vec<u32>> {
        let own = question.len() + 1;
        if own + reply_budget > n_ctx {
            return Err(Error::ContextLength {
                requested: own + reply_budget,
                limit: n_ctx,
            });
        }
        while self.len() + own + reply_budget > n_ctx {
            self.turns.pop_front();
        }
        let mut p = self.tokens();
        p.extend_from_slice(question);
        p.push(sep);
        Ok(p)
    }

    pub fn push_turn(&mut self, question: &[u32], sep: u32, reply: &[u32], eot: u32) {
        let mut turn = Vec::with_capacity(question.len() + reply.len() + 2);
        turn.extend_from_slice(question);
        turn.push(sep);
        turn.extend_from_slice(reply);
        turn.push(eot);
        self.turns.push_back(turn);
    }
}

fn tag(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Upstream { .. }
        | Error::UnsupportedLanguage(_)
        | Error::Config(_)
        | Error::Precondition(_) => e,
        other => Error::Upstream {
            stage,
            message: other.to_string(),
        },
    }
}

/// Speech to text when needed, language detection, translation into
/// English, generation conditioned on `session`, and translation of the
/// reply back. English input skips both translations.
///
/// On success the turn is appended to `session`.
#[allow(clippy::too_many_arguments)]
pub fn chat_pipeline<T: Real>(
    input: &ChatInput,
    providers: &Providers,
    model: &Model<T>,
    vocab: &Vocabulary,
    session: &mut ChatHistory,
    opts: &DecodeOptions,
    rng: &mut RngStream,
    clock: &dyn Clock,
) -> Result<PipelineTrace> {
    let mut timings = Vec::new();
    let mut lap = |stage: &str, start: u64| {
        timings.push(StageTiming {
            stage: stage.to_string(),
            micros: clock.now_micros().saturating_sub(start),
        })
    };

    let t0 = clock.now_micros();
    let (input_kind, transcript) = match input {
        ChatInput::Text(t) => (InputKind::Text, t.clone()),
        ChatInput::Audio {
            payload,
            media_type,
            hint,
        } => {
            let t = providers
                .stt()?
                .transcribe(payload, media_type, *hint)
                .map_err(tag("stt"))?;
            lap("stt", t0);
            (InputKind::Audio, t)
        }
    };

    let t1 = clock.now_micros();
    let detected = providers
        .detector()?
        .detect(&transcript)
        .map_err(tag("detect"))?;
    lap("detect", t1);
    if detected == LangCode::Unknown {
        return Err(Error::UnsupportedLanguage(
            "input is neither English nor Chinese".to_string(),
        ));
    }

    let english = if detected == LangCode::En {
        transcript.clone()
    } else {
        let t2 = clock.now_micros();
        let e = providers
            .translator()?
            .translate(&transcript, LangCode::En)
            .map_err(tag("translate"))?;
        lap("translate", t2);
        e
    };

    let t3 = clock.now_micros();
    let sp = vocab.specials();
    let question = vocab.encode(&english);
    let prompt = session.prompt(&question, sp.sep, model.config.n_ctx, opts.max_new_tokens)?;
    let Answer { prompt, ids, text } = model.reply(vocab, prompt, opts, rng)?;
    lap("generate", t3);

    let final_reply = if detected == LangCode::En {
        text.clone()
    } else {
        let t4 = clock.now_micros();
        let back = providers
            .translator()?
            .translate(&text, detected)
            .or_else(|e| match e {
                // A reply with no letters at all has nothing to translate.
                Error::UnsupportedLanguage(_) | Error::Precondition(_) => Ok(text.clone()),
                other => Err(other),
            })
            .map_err(tag("back_translate"))?;
        lap("back_translate", t4);
        back
    };

    session.push_turn(&question, sp.sep, &ids, sp.end_of_text);
    session.last_lang = Some(detected);
    Ok(PipelineTrace {
        input_kind,
        transcript,
        detected,
        english,
        prompt_ids: prompt,
        reply_ids: ids,
        reply: text,
        final_reply,
        timings,
    })
}
