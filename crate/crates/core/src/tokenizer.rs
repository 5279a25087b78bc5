//! Word/punctuation tokenizer and `[BOS] user [SEP] service [EOS]` assembly.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";

const SPECIALS: [&str; 5] = [PAD, UNK, BOS, SEP, EOS];

// Signed decimals and dotted quads stay whole, as do words joined by `.`, `&` or `-`.
static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)*|\w+(?:[.&\-]\w+)*|[^\w\s]").expect("token regex"));

pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    TOKEN_RE.find_iter(text).map(|m| m.as_str())
}

/// Anything that can map text to ids and name the marker ids.
pub trait TextTokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> u32;
    fn bos_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn eos_id(&self) -> u32;
}

/// Frequency-ranked vocabulary over [`split_words`] tokens.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!(
                    "vocabulary must start with the special tokens {SPECIALS:?}"
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(Error::Config("vocabulary contains duplicate tokens".into()));
        }
        Ok(Tokenizer { tokens, index })
    }

    /// Builds a vocabulary from a corpus. Tokens are ranked by descending
    /// frequency, ties broken lexicographically; `max_size` includes the
    /// special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(SPECIALS.len()));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("specials are prepended")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn unk_id(&self) -> u32 {
        1
    }
}

impl TextTokenizer for Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.id(w).unwrap_or(self.unk_id())).collect()
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn pad_id(&self) -> u32 {
        0
    }

    fn bos_id(&self) -> u32 {
        2
    }

    fn sep_id(&self) -> u32 {
        3
    }

    fn eos_id(&self) -> u32 {
        4
    }
}

/// Fixed-length id sequence; `mask[i] == 1` marks a real token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn block_size(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (unmasked) tokens; they always form a prefix.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.real_len()]
    }
}

/// Lays out `[BOS] user [SEP] service [EOS]` and pads to `block_size`.
/// Over-long inputs lose service tokens from the right first, then user tokens.
pub fn assemble_sequence(
    user_text: &str,
    service_text: &str,
    tokenizer: &dyn TextTokenizer,
    block_size: usize,
) -> Result<TokenSequence> {
    if block_size < 4 {
        return Err(Error::Config(format!(
            "block size {block_size} cannot hold the three markers plus one token"
        )));
    }
    let mut user = tokenizer.encode(user_text);
    let mut service = tokenizer.encode(service_text);
    let budget = block_size - 3;
    if user.len() + service.len() > budget {
        service.truncate(budget.saturating_sub(user.len()));
        user.truncate(budget - service.len());
    }
    let mut ids = Vec::with_capacity(block_size);
    ids.push(tokenizer.bos_id());
    ids.extend(user);
    ids.push(tokenizer.sep_id());
    ids.extend(service);
    ids.push(tokenizer.eos_id());
    let real = ids.len();
    ids.resize(block_size, tokenizer.pad_id());
    let mut mask = vec![1u8; real];
    mask.resize(block_size, 0);
    Ok(TokenSequence { ids, mask })
}
