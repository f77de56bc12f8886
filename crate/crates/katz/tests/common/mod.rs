#![allow(dead_code)]

use std::future::Future;

use katz::service::{self, AppState, ServiceConfig};
use katz_core::lingua::{GlossaryTranslator, Providers};
use katz_core::model::DecodeOptions;
use katz_core::{Model, ModelConfig, Vocabulary};

pub const GLOSSARY: &str = "# zh\ten\n考试\texam\n截止日期\tdeadline\n你好\thello\n学生\tstudent\n";

pub fn glossary() -> GlossaryTranslator {
    GlossaryTranslator::parse(GLOSSARY).unwrap()
}

pub fn tiny_model(n_ctx: usize, seed: u64) -> Model<f32> {
    Model::init(ModelConfig::tiny(259, 16, 2, 2, n_ctx), seed).unwrap()
}

pub fn service_config(max_new_tokens: usize) -> ServiceConfig {
    ServiceConfig {
        decode: DecodeOptions {
            max_new_tokens,
            ..DecodeOptions::default()
        },
        ..ServiceConfig::default()
    }
}

pub fn mock_state(model: Model<f32>, cfg: ServiceConfig) -> AppState {
    AppState::new(model, Vocabulary::bytes(), Providers::mock(glossary()), cfg).unwrap()
}

/// Serves `state` on an ephemeral local port for the duration of `body`.
pub fn with_server<F, Fut>(state: AppState, body: F)
where
    F: FnOnce(String, AppState) -> Fut,
    Fut: Future<Output = ()>,
{
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(service::serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        body(base, state).await;
        let _ = tx.send(());
        server.await.unwrap().unwrap();
    });
}

pub async fn post(
    client: &reqwest::Client,
    url: String,
    body: serde_json::Value,
) -> (u16, serde_json::Value) {
    let resp = client.post(url).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

/// Eight sessions of ten turns each, all in flight at once. Every reply is
/// checked against direct greedy generation on the prompt the session
/// should have produced, and every final history against the concatenated
/// turns. Returns a description of the first mismatch.
pub fn concurrent_sessions_check() -> Result<(), String> {
    const SESSIONS: usize = 8;
    const TURNS: usize = 10;
    const NEW: usize = 6;
    let model = tiny_model(256, 7);
    let oracle = model.clone();
    let vocab = Vocabulary::bytes();
    let sp = vocab.specials();
    let opts = DecodeOptions {
        max_new_tokens: NEW,
        ..DecodeOptions::default()
    };
    let mut result = Ok(());
    with_server(mock_state(model, service_config(NEW)), |base, state| {
        let result = &mut result;
        async move {
            let client = reqwest::Client::new();
            let tasks: Vec<_> = (0..SESSIONS)
                .map(|s| {
                    let client = client.clone();
                    let url = format!("{base}/v1/chat");
                    tokio::spawn(async move {
                        let mut id = serde_json::Value::Null;
                        let mut log = Vec::new();
                        for t in 0..TURNS {
                            let msg = format!("session {s} turn {t}");
                            let mut body = serde_json::json!({ "message": msg });
                            if !id.is_null() {
                                body["session_id"] = id.clone();
                            }
                            let (status, resp) = post(&client, url.clone(), body).await;
                            if status != 200 {
                                return Err(format!(
                                    "session {s} turn {t}: status {status} {resp}"
                                ));
                            }
                            id = resp["session_id"].clone();
                            log.push((msg, resp));
                        }
                        Ok((id.as_str().unwrap().to_string(), log))
                    })
                })
                .collect();
            let mut sessions = Vec::new();
            for t in tasks {
                match t.await.unwrap() {
                    Ok(s) => sessions.push(s),
                    Err(e) => {
                        *result = Err(e);
                        return;
                    }
                }
            }
            for (s, (id, log)) in sessions.iter().enumerate() {
                let mut expected: Vec<u32> = Vec::new();
                for (t, (msg, resp)) in log.iter().enumerate() {
                    let q = vocab.encode(msg);
                    let mut prompt = expected.clone();
                    prompt.extend_from_slice(&q);
                    prompt.push(sp.sep);
                    let ans = oracle
                        .reply(&vocab, prompt, &opts, &mut katz_core::RngStream::new(0))
                        .unwrap();
                    if resp["reply"] != ans.text.as_str()
                        || resp["tokens_generated"] != ans.ids.len()
                    {
                        *result = Err(format!(
                            "session {s} turn {t}: reply {resp} differs from {:?}",
                            ans.text
                        ));
                        return;
                    }
                    expected.extend_from_slice(&q);
                    expected.push(sp.sep);
                    expected.extend_from_slice(&ans.ids);
                    expected.push(sp.end_of_text);
                }
                if state.history(id).await.as_ref() != Some(&expected) {
                    *result = Err(format!(
                        "session {s}: stored history differs from its turns"
                    ));
                    return;
                }
            }
        }
    });
    result
}
