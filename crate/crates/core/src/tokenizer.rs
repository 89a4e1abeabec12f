//! Word-level vocabulary and `[CLS] question [SEP] response [SEP]` pair packing
//! with token-to-character alignment into the raw response.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{AnswerSpan, QAExample};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// WordPiece vocabulary size of the full-scale pretrained encoder. Reference only.
pub const REFERENCE_VOCAB_SIZE: usize = 30_522;

pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("vocabulary max_size must be at least 5, got {0}")]
    VocabTooSmall(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_len must be at least {MIN_MAX_LEN}, got {0}")]
    MaxLenTooSmall(usize),
    #[error("{0} is empty after tokenization")]
    EmptyText(&'static str),
    #[error("vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("answer span {start}..{end} is not covered by any response token")]
    SpanLost { start: usize, end: usize },
}

/// A surface token: lowercased text plus its `[start, end)` char offsets in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn basic_tokenize(text: &str) -> Vec<RawToken> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let flush = |current: &mut Option<(usize, String)>, end: usize, out: &mut Vec<RawToken>| {
        if let Some((start, text)) = current.take() {
            out.push(RawToken { text, start, end });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, i, &mut out);
        } else if c.is_alphanumeric() {
            current
                .get_or_insert_with(|| (i, String::new()))
                .1
                .extend(c.to_lowercase());
        } else {
            flush(&mut current, i, &mut out);
            out.push(RawToken {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        }
    }
    flush(&mut current, text.chars().count(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(TokenizerError::BadVocabFile(format!(
                    "line {} must be {reserved}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabFile(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total lookup: unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number (0-based) is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Result<Self, TokenizerError>> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }

    /// Hex SHA-256 of the vocabulary file contents; checkpoints record it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Keeps the `max_size - 4` most frequent tokens of all questions and
/// responses; equal counts are ordered lexicographically.
pub fn build_vocab(corpus: &[QAExample], max_size: usize) -> Result<Vocab, TokenizerError> {
    if max_size < 5 {
        return Err(TokenizerError::VocabTooSmall(max_size));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in corpus {
        for text in [&ex.question, &ex.response] {
            for tok in basic_tokenize(text) {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Packed model input for one question/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub token_ids: Vec<u32>,
    /// 0 for `[CLS]`, question and the first `[SEP]`; 1 for the response and final `[SEP]`.
    pub segment_ids: Vec<u8>,
    /// `true` marks padding.
    pub pad_mask: Vec<bool>,
    /// Char offsets into the raw response, present exactly for response tokens.
    pub response_char_spans: Vec<Option<(usize, usize)>>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_response_token(&self, i: usize) -> bool {
        self.response_char_spans[i].is_some()
    }

    pub fn response_token_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_response_token(i))
    }

    /// Count of non-pad positions.
    pub fn content_len(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }

    /// Char span in the response covered by tokens `start..=end`.
    pub fn token_span_to_char_span(&self, start: usize, end: usize) -> Option<AnswerSpan> {
        let (s, _) = (*self.response_char_spans.get(start)?)?;
        let (_, e) = (*self.response_char_spans.get(end)?)?;
        (start <= end).then_some(AnswerSpan::new(s, e))
    }

    /// Substring of the raw response covered by tokens `start..=end`.
    pub fn token_span_to_substring<'a>(&self, response: &'a str, start: usize, end: usize) -> Option<&'a str> {
        self.token_span_to_char_span(start, end)?.slice(response)
    }

    /// First and last response tokens whose char range intersects `span`.
    pub fn char_span_to_token_span(&self, span: AnswerSpan) -> Result<(usize, usize), TokenizerError> {
        let mut hit = self
            .response_char_spans
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.filter(|&(s, e)| s < span.end && span.start < e).map(|_| i));
        let first = hit.next().ok_or(TokenizerError::SpanLost {
            start: span.start,
            end: span.end,
        })?;
        let last = hit.next_back().unwrap_or(first);
        Ok((first, last))
    }
}

/// Packs `[CLS] q [SEP] r [SEP] [PAD]...` to exactly `max_len` positions.
///
/// Overlong pairs lose response tokens from the tail first (down to one),
/// then question tokens from the tail (down to one).
pub fn encode_pair(
    question: &str,
    response: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedInput, TokenizerError> {
    if max_len < MIN_MAX_LEN {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let mut q = basic_tokenize(question);
    let mut r = basic_tokenize(response);
    if q.is_empty() {
        return Err(TokenizerError::EmptyText("question"));
    }
    if r.is_empty() {
        return Err(TokenizerError::EmptyText("response"));
    }
    let budget = max_len - 3;
    if q.len() + r.len() > budget {
        let r_keep = budget.saturating_sub(q.len()).max(1);
        r.truncate(r_keep);
        q.truncate(budget - r.len());
    }

    let mut input = TokenizedInput {
        token_ids: Vec::with_capacity(max_len),
        segment_ids: Vec::with_capacity(max_len),
        pad_mask: Vec::with_capacity(max_len),
        response_char_spans: Vec::with_capacity(max_len),
    };
    let mut push = |id: u32, segment: u8, span: Option<(usize, usize)>| {
        input.token_ids.push(id);
        input.segment_ids.push(segment);
        input.pad_mask.push(id == PAD_ID);
        input.response_char_spans.push(span);
    };
    push(CLS_ID, 0, None);
    for t in &q {
        push(vocab.id(&t.text), 0, None);
    }
    push(SEP_ID, 0, None);
    for t in &r {
        push(vocab.id(&t.text), 1, Some((t.start, t.end)));
    }
    push(SEP_ID, 1, None);
    for _ in q.len() + r.len() + 3..max_len {
        push(PAD_ID, 0, None);
    }
    Ok(input)
}
