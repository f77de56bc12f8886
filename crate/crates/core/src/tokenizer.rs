//! Byte-level BPE tokenizer.
//!
//! Text is split with the GPT-2 pre-tokenization rule, each piece is turned
//! into byte tokens, and adjacent pairs are merged greedily by merge rank.
//! Three special tokens sit after the base vocabulary: end-of-text (shared
//! with the base vocabulary when it has one), padding, and the
//! question/answer separator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Base vocabulary size of a GPT-2 vocabulary file.
pub const GPT2_BASE_SIZE: usize = 50257;
/// Full vocabulary size once padding and separator are appended.
pub const GPT2_VOCAB_SIZE: usize = 50259;
pub const END_OF_TEXT_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub end_of_text: u32,
    pub pad: u32,
    pub sep: u32,
}

/// How [`Vocabulary::decode_with`] renders special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialRendering {
    Show,
    Hide,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: BTreeMap<Vec<u8>, u32>,
    id_to_token: Vec<Vec<u8>>,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// (left id, right id) → (rank, merged id)
    merge_ranks: BTreeMap<(u32, u32), (usize, u32)>,
    byte_ids: [u32; 256],
    specials: Specials,
}

impl Vocabulary {
    /// 256 byte tokens followed by end-of-text, pad, and separator.
    pub fn bytes() -> Self {
        let base = (0u8..=255).map(|b| alloc::vec![b]).collect();
        Self::from_tokens(base, None, Vec::new()).expect("byte vocabulary is valid")
    }

    /// Builds a vocabulary from base tokens listed in id order.
    ///
    /// `end_of_text` names the base id that serves as end-of-text; when it is
    /// `None` the token is appended. Pad and separator are always appended.
    pub fn from_tokens(
        base: Vec<Vec<u8>>,
        end_of_text: Option<u32>,
        merges: Vec<(Vec<u8>, Vec<u8>)>,
    ) -> Result<Self> {
        let mut id_to_token = base;
        let eot = match end_of_text {
            Some(id) if (id as usize) < id_to_token.len() => id,
            Some(id) => {
                return Err(Error::Format(format!(
                    "end-of-text id {id} outside base vocabulary of {}",
                    id_to_token.len()
                )))
            }
            None => {
                id_to_token.push(END_OF_TEXT_TOKEN.as_bytes().to_vec());
                (id_to_token.len() - 1) as u32
            }
        };
        let pad = id_to_token.len() as u32;
        id_to_token.push(b"<|pad|>".to_vec());
        let sep = pad + 1;
        id_to_token.push(b"<|sep|>".to_vec());
        let specials = Specials {
            end_of_text: eot,
            pad,
            sep,
        };

        let mut token_to_id = BTreeMap::new();
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Format(format!(
                    "duplicate token {:?} at id {id}",
                    String::from_utf8_lossy(tok)
                )));
            }
        }

        let mut byte_ids = [0u32; 256];
        for b in 0..=255u8 {
            match token_to_id.get(&[b][..]) {
                Some(&id) if !is_special(&specials, id) => byte_ids[b as usize] = id,
                _ => {
                    return Err(Error::Format(format!(
                        "vocabulary has no token for byte 0x{b:02x}"
                    )))
                }
            }
        }

        let mut merge_ranks = BTreeMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let line = rank + 1;
            let lookup = |t: &[u8]| {
                token_to_id.get(t).copied().ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unknown token {:?}", String::from_utf8_lossy(t)),
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let mut joined = left.clone();
            joined.extend_from_slice(right);
            let merged = lookup(&joined)?;
            if is_special(&specials, merged) || is_special(&specials, l) || is_special(&specials, r)
            {
                continue;
            }
            merge_ranks.entry((l, r)).or_insert((rank, merged));
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_ranks,
            byte_ids,
            specials,
        })
    }

    /// GPT-2 style vocabulary: `entries` are `(token, id)` pairs from the
    /// vocab JSON (tokens in the printable byte alphabet), `merges_text` is
    /// the merges file.
    pub fn from_gpt2(entries: Vec<(String, u32)>, merges_text: &str) -> Result<Self> {
        if entries.len() != GPT2_BASE_SIZE {
            return Err(Error::Format(format!(
                "expected {GPT2_BASE_SIZE} vocabulary entries, found {}",
                entries.len()
            )));
        }
        let decoder = unicode_to_byte_table();
        let mut slots: Vec<Option<Vec<u8>>> = alloc::vec![None; entries.len()];
        let mut eot = None;
        for (tok, id) in entries {
            let slot = slots.get_mut(id as usize).ok_or_else(|| {
                Error::Format(format!("token id {id} outside 0..{GPT2_BASE_SIZE}"))
            })?;
            if slot.is_some() {
                return Err(Error::Format(format!("duplicate token id {id}")));
            }
            if tok == END_OF_TEXT_TOKEN {
                eot = Some(id);
                *slot = Some(tok.into_bytes());
            } else {
                *slot = Some(decode_printable(&tok, &decoder).ok_or_else(|| {
                    Error::Format(format!(
                        "token {tok:?} uses characters outside the byte alphabet"
                    ))
                })?);
            }
        }
        let base: Vec<Vec<u8>> = slots
            .into_iter()
            .map(|s| s.expect("all ids filled"))
            .collect();
        let merges = parse_merges(merges_text, |s| {
            decode_printable(s, &decoder)
                .ok_or_else(|| "characters outside the byte alphabet".to_string())
        })?;
        Self::from_tokens(
            base,
            Some(eot.unwrap_or((GPT2_BASE_SIZE - 1) as u32)),
            merges,
        )
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn token_id(&self, token: &[u8]) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_to_token.get(id as usize).map(|t| t.as_slice())
    }

    pub fn is_special(&self, id: u32) -> bool {
        is_special(&self.specials, id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut symbols = Vec::new();
        for piece in pretokenize(text) {
            symbols.clear();
            symbols.extend(piece.bytes().map(|b| self.byte_ids[b as usize]));
            self.merge_word(&mut symbols);
            out.extend_from_slice(&symbols);
        }
        out
    }

    fn merge_word(&self, symbols: &mut Vec<u32>) {
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0], w[1]))
                        .map(|&(rank, _)| (rank, w[0], w[1]))
                })
                .min();
            let Some((_, l, r)) = best else { break };
            let merged = self.merge_ranks[&(l, r)].1;
            let mut write = 0;
            let mut read = 0;
            while read < symbols.len() {
                if read + 1 < symbols.len() && symbols[read] == l && symbols[read + 1] == r {
                    symbols[write] = merged;
                    read += 2;
                } else {
                    symbols[write] = symbols[read];
                    read += 1;
                }
                write += 1;
            }
            symbols.truncate(write);
        }
    }

    /// Decodes with specials shown as their literal names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.decode_with(ids, SpecialRendering::Show)
    }

    pub fn decode_with(&self, ids: &[u32], specials: SpecialRendering) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_bytes(id).ok_or(Error::Range {
                id,
                size: self.len(),
            })?;
            if specials == SpecialRendering::Hide && self.is_special(id) {
                continue;
            }
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn is_special(s: &Specials, id: u32) -> bool {
    id == s.end_of_text || id == s.pad || id == s.sep
}

/// Parses a merges file: one space-separated pair per line, optional
/// leading `#` header, blank lines ignored.
pub fn parse_merges<F>(text: &str, decode: F) -> Result<Vec<(Vec<u8>, Vec<u8>)>>
where
    F: Fn(&str) -> core::result::Result<Vec<u8>, String>,
{
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.is_empty() || (line == 1 && trimmed.starts_with('#')) {
            continue;
        }
        let mut parts = trimmed.split(' ');
        let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line,
                message: format!("expected two space-separated tokens, got {trimmed:?}"),
            });
        };
        if l.is_empty() || r.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty merge token".to_string(),
            });
        }
        let conv = |s: &str| decode(s).map_err(|message| Error::Parse { line, message });
        out.push((conv(l)?, conv(r)?));
    }
    Ok(out)
}

/// GPT-2's reversible byte → printable character table.
pub fn byte_to_unicode_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u32 {
        let printable =
            (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1 char")
        } else {
            let c = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            c
        };
    }
    table
}

fn unicode_to_byte_table() -> BTreeMap<char, u8> {
    byte_to_unicode_table()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect()
}

fn decode_printable(s: &str, table: &BTreeMap<char, u8>) -> Option<Vec<u8>> {
    s.chars().map(|c| table.get(&c).copied()).collect()
}

/// Encodes raw bytes in the printable byte alphabet (inverse of the table
/// used when reading vocabulary files).
pub fn encode_printable(bytes: &[u8]) -> String {
    let table = byte_to_unicode_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Space,
    Other,
}

fn classify(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

/// GPT-2 pre-tokenization:
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |k: usize| chars.get(k).map_or(text.len(), |&(b, _)| b);
    let run_end = |mut k: usize, class: Class| {
        while k < chars.len() && classify(chars[k].1) == class {
            k += 1;
        }
        k
    };
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let rest = &text[start..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            let n = c.chars().count();
            pieces.push(&text[start..end_of(i + n)]);
            i += n;
            continue;
        }
        let c = chars[i].1;
        let (body, lead) =
            if c == ' ' && i + 1 < chars.len() && classify(chars[i + 1].1) != Class::Space {
                (i + 1, 1)
            } else {
                (i, 0)
            };
        let class = classify(chars[body].1);
        let j = if class == Class::Space {
            let j = run_end(i, Class::Space);
            if j < chars.len() && j - i >= 2 {
                j - 1
            } else {
                j
            }
        } else {
            debug_assert!(lead <= 1);
            run_end(body, class)
        };
        pieces.push(&text[start..end_of(j)]);
        i = j;
    }
    pieces
}
