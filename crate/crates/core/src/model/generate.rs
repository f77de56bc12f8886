use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Real, RngStream, Tensor};
use crate::tokenizer::{SpecialRendering, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    /// `0` means greedy decoding.
    pub temperature: f64,
    /// `0` means no truncation.
    pub top_k: usize,
    pub stop_id: Option<u32>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            temperature: 0.0,
            top_k: 0,
            stop_id: None,
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Model<T> {
    /// Extends `prompt` autoregressively. The returned sequence starts with
    /// the prompt and includes the stop id when one was produced.
    pub fn generate(
        &self,
        prompt: &[u32],
        opts: &DecodeOptions,
        rng: &mut RngStream,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::precondition("generation needs a nonempty prompt"));
        }
        let requested = prompt.len() + opts.max_new_tokens;
        if requested > self.config.n_ctx {
            return Err(Error::ContextLength {
                requested,
                limit: self.config.n_ctx,
            });
        }
        if opts.temperature < 0.0 || !opts.temperature.is_finite() {
            return Err(Error::config("temperature must be finite and >= 0"));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..opts.max_new_tokens {
            let logits = self.last_logits(&seq)?;
            let next = if opts.temperature == 0.0 {
                argmax(logits.data())
            } else {
                sample(logits.data(), opts.temperature, opts.top_k, rng)
            } as u32;
            seq.push(next);
            if Some(next) == opts.stop_id {
                break;
            }
        }
        Ok(seq)
    }
}

/// A generated reply to one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub prompt: Vec<u32>,
    /// New tokens, without the stop id.
    pub ids: Vec<u32>,
    pub text: String,
}

impl<T: Real> Model<T> {
    /// Answers `question` with the `question [sep]` prompt the fine-tuning
    /// examples use, stopping at end-of-text unless `opts` names another
    /// stop id. The question is cut from the left when the prompt plus
    /// `opts.max_new_tokens` would not fit the context.
    pub fn answer(
        &self,
        vocab: &Vocabulary,
        question: &str,
        opts: &DecodeOptions,
        rng: &mut RngStream,
    ) -> Result<Answer> {
        let room = self.config.n_ctx.saturating_sub(opts.max_new_tokens + 1);
        if room == 0 {
            return Err(Error::ContextLength {
                requested: opts.max_new_tokens + 2,
                limit: self.config.n_ctx,
            });
        }
        let mut prompt = vocab.encode(question);
        if prompt.len() > room - 1 {
            prompt.drain(..prompt.len() + 1 - room);
        }
        prompt.push(vocab.specials().sep);
        self.reply(vocab, prompt, opts, rng)
    }

    /// Generates from a ready-made prompt and splits off the reply.
    pub fn reply(
        &self,
        vocab: &Vocabulary,
        prompt: Vec<u32>,
        opts: &DecodeOptions,
        rng: &mut RngStream,
    ) -> Result<Answer> {
        let opts = DecodeOptions {
            stop_id: opts.stop_id.or(Some(vocab.specials().end_of_text)),
            ..*opts
        };
        let seq = self.generate(&prompt, &opts, rng)?;
        let mut ids = seq[prompt.len()..].to_vec();
        if ids.last().copied() == opts.stop_id {
            ids.pop();
        }
        let text = vocab.decode_with(&ids, SpecialRendering::Hide)?;
        Ok(Answer { prompt, ids, text })
    }
}

fn sample<T: Real>(logits: &[T], temperature: f64, top_k: usize, rng: &mut RngStream) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // descending by logit, ascending id on ties
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if top_k > 0 && top_k < order.len() {
        order.truncate(top_k);
    }
    let scaled: Vec<f64> = order
        .iter()
        .map(|&i| logits[i].as_f64() / temperature)
        .collect();
    let probs = softmax_rows(&Tensor::<f64>::new(&[scaled.len()], scaled).expect("nonempty"));
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (&id, &p) in order.iter().zip(probs.data()) {
        acc += p;
        if u < acc {
            return id;
        }
    }
    *order.last().expect("nonempty vocabulary")
}
