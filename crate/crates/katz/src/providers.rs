//! HTTP speech, detection, and translation providers.
//!
//! Each endpoint takes a JSON POST and answers `{"result": "..."}`:
//!
//! | slot       | request body                                   |
//! |------------|------------------------------------------------|
//! | stt        | `{"audio": <base64>, "media_type", "lang_hint"}` |
//! | detect     | `{"text"}`, result is `en`, `zh`, or `unknown`   |
//! | translate  | `{"text", "target"}`                             |
//!
//! The blocking client must not be driven from inside an async task.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use katz_core::lingua::{
    GlossaryTranslator, LangCode, LanguageDetector, MockSpeech, Providers, RuleDetector,
    SpeechToText, Translator,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub stt_url: Option<String>,
    pub detect_url: Option<String>,
    pub translate_url: Option<String>,
    /// Glossary for the offline translator used when `translate_url` is
    /// unset.
    pub glossary: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            stt_url: None,
            detect_url: None,
            translate_url: None,
            glossary: None,
            timeout_secs: 30,
        }
    }
}

impl ProviderConfig {
    /// HTTP providers for the slots with a URL, offline ones elsewhere.
    pub fn build(&self) -> Result<Providers> {
        let client = || HttpEndpoint::client(Duration::from_secs(self.timeout_secs));
        let stt: Box<dyn SpeechToText> = match &self.stt_url {
            Some(u) => Box::new(HttpSpeech(HttpEndpoint::new(u, "stt", client()?))),
            None => Box::new(MockSpeech),
        };
        let detector: Box<dyn LanguageDetector> = match &self.detect_url {
            Some(u) => Box::new(HttpDetector(HttpEndpoint::new(u, "detect", client()?))),
            None => Box::new(RuleDetector),
        };
        let translator: Box<dyn Translator> = match (&self.translate_url, &self.glossary) {
            (Some(u), _) => Box::new(HttpTranslator(HttpEndpoint::new(u, "translate", client()?))),
            (None, Some(path)) => Box::new(crate::data::load_glossary(path)?),
            (None, None) => Box::new(GlossaryTranslator::new(&[])),
        };
        Ok(Providers {
            stt: Some(stt),
            detector: Some(detector),
            translator: Some(translator),
        })
    }
}

#[derive(Debug, Deserialize)]
struct Reply {
    result: String,
}

pub struct HttpEndpoint {
    url: String,
    stage: &'static str,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    fn client(timeout: Duration) -> Result<reqwest::blocking::Client> {
        reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| crate::Error::Http(e.to_string()))
    }

    pub fn new(url: &str, stage: &'static str, client: reqwest::blocking::Client) -> Self {
        Self {
            url: url.to_string(),
            stage,
            client,
        }
    }

    fn upstream(&self, message: impl Into<String>) -> katz_core::Error {
        katz_core::Error::Upstream {
            stage: self.stage,
            message: message.into(),
        }
    }

    /// POSTs `body` and returns the `result` field of the answer.
    pub fn call(&self, body: &serde_json::Value) -> katz_core::Result<String> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| self.upstream(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(self.upstream(format!("HTTP {status}: {}", text.trim())));
        }
        let reply: Reply = resp
            .json()
            .map_err(|e| self.upstream(format!("bad response body: {e}")))?;
        Ok(reply.result)
    }
}

pub struct HttpSpeech(pub HttpEndpoint);

impl SpeechToText for HttpSpeech {
    fn transcribe(
        &self,
        payload: &[u8],
        media_type: &str,
        hint: Option<LangCode>,
    ) -> katz_core::Result<String> {
        if payload.is_empty() {
            return Err(katz_core::Error::Precondition("empty audio payload".into()));
        }
        self.0.call(&serde_json::json!({
            "audio": base64::engine::general_purpose::STANDARD.encode(payload),
            "media_type": media_type,
            "lang_hint": hint.map(LangCode::as_str),
        }))
    }
}

pub struct HttpDetector(pub HttpEndpoint);

impl LanguageDetector for HttpDetector {
    fn detect(&self, text: &str) -> katz_core::Result<LangCode> {
        let code = self.0.call(&serde_json::json!({ "text": text }))?;
        LangCode::parse(code.trim()).map_err(|e| self.0.upstream(e.to_string()))
    }
}

pub struct HttpTranslator(pub HttpEndpoint);

impl Translator for HttpTranslator {
    fn translate(&self, text: &str, target: LangCode) -> katz_core::Result<String> {
        self.0
            .call(&serde_json::json!({ "text": text, "target": target.as_str() }))
    }
}
