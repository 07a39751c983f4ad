//! Filter-based tokenization, vocabulary and fixed-length framing.

use std::collections::HashMap;

use regex::Regex;

use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Number of reserved ids; corpus tokens start here.
pub const SPECIAL_COUNT: usize = 4;

pub const SPECIAL_TOKENS: [&str; SPECIAL_COUNT] = ["<CLS>", "<MASK>", "<PAD>", "<UNK>"];

/// Splits log content at every match of a filter pattern.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    filter: Regex,
}

impl Tokenizer {
    pub fn new(filter: &str) -> Result<Self> {
        let filter = Regex::new(filter)
            .map_err(|e| Error::Config(format!("invalid tokenization filter {filter:?}: {e}")))?;
        Ok(Tokenizer { filter })
    }

    pub fn pattern(&self) -> &str {
        self.filter.as_str()
    }

    /// Matched delimiters are discarded and empty fragments dropped.
    pub fn tokenize(&self, content: &str) -> Vec<String> {
        self.filter
            .split(content)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// One-shot helper that compiles `filter` and splits `content`.
pub fn tokenize(content: &str, filter: &str) -> Result<Vec<String>> {
    Ok(Tokenizer::new(filter)?.tokenize(content))
}

/// Bijective token ↔ id mapping with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids are assigned in order of first appearance.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut vocab = Self::specials_only();
        for token in corpus.iter().flatten() {
            vocab.insert(token.as_ref());
        }
        Ok(vocab)
    }

    fn specials_only() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tokens, ids }
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_COUNT
            || tokens[..SPECIAL_COUNT]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Validation(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK` when out of vocabulary.
    pub fn encode(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Payload budget `M` = longest message + 1; framed length is `M + 1`.
pub fn compute_frame_length<S>(corpus: &[Vec<S>]) -> Result<usize> {
    let longest = corpus
        .iter()
        .map(Vec::len)
        .max()
        .ok_or_else(|| Error::Validation("cannot size frames for an empty corpus".into()))?;
    Ok(longest + 1)
}

/// A tokenized message and its framed id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub message_index: usize,
    pub tokens: Vec<String>,
    /// `[CLS] ids… PAD…`, always `M + 1` long.
    pub framed_ids: Vec<usize>,
    /// Set when the message had more than `M − 1` tokens and was cut.
    pub truncated: bool,
}

impl TokenSequence {
    /// Number of token ids in the frame (excludes CLS and padding).
    pub fn real_len(&self) -> usize {
        self.tokens.len().min(self.framed_ids.len().saturating_sub(2))
    }

    pub fn frame_len(&self) -> usize {
        self.framed_ids.len()
    }
}

/// Frames `tokens` to length `payload + 1`: CLS, encoded tokens, then padding.
///
/// Messages longer than `payload − 1` tokens are truncated with a warning so
/// at least one PAD always remains.
pub fn frame(
    message_index: usize,
    tokens: Vec<String>,
    payload: usize,
    vocab: &Vocabulary,
) -> TokenSequence {
    let budget = payload.saturating_sub(1);
    let truncated = tokens.len() > budget;
    if truncated {
        log::warn!(
            "message {message_index}: {} tokens exceed the frame budget of {budget}; truncating",
            tokens.len()
        );
    }
    let mut framed_ids = Vec::with_capacity(payload + 1);
    framed_ids.push(CLS_ID);
    framed_ids.extend(tokens.iter().take(budget).map(|t| vocab.encode(t)));
    framed_ids.resize(payload + 1, PAD_ID);
    TokenSequence {
        message_index,
        tokens,
        framed_ids,
        truncated,
    }
}
