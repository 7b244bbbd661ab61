//! Word-level tokenizer.
//!
//! Text is normalized (see [`crate::text::normalize`]) and split on
//! whitespace; every punctuation or symbol character becomes its own token.
//! An apostrophe that follows a letter or digit stays inside the word, so
//! elisions like `vo'a` and `pa'` survive as single tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Song;
use crate::store::write_atomic;
use crate::text::normalize;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["⟨pad⟩", "⟨unk⟩", "⟨bos⟩", "⟨eos⟩"];

pub const DEFAULT_MAX_VOCAB: usize = 8192;
pub const DEFAULT_MIN_FREQ: usize = 1;
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

const VOCAB_HEADER: &str = "# mcar-vocab";
const VOCAB_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_vocab must be at least {min}, got {got}")]
    VocabTooSmall { min: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(&'static str),
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Split already-normalized text into word and punctuation tokens.
pub fn split_tokens(normalized: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in normalized.char_indices() {
        let in_word = start.is_some();
        if ch.is_alphanumeric() || (in_word && (ch == '\'' || ch == '’')) {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            tokens.push(&normalized[s..i]);
        }
        if !ch.is_whitespace() {
            tokens.push(&normalized[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        tokens.push(&normalized[s..]);
    }
    tokens
}

/// Normalize and tokenize raw text.
pub fn tokenize(text: &str) -> Vec<String> {
    split_tokens(&normalize(text))
        .into_iter()
        .map(str::to_owned)
        .collect()
}

/// Bijective token/id map with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self, TokenizerError> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Write the plain-text vocabulary file.
    ///
    /// The header line carries the schema version and counts; each following
    /// line holds one token, whose id is its line offset plus the specials.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{VOCAB_HEADER} schema={VOCAB_SCHEMA} size={} specials={NUM_SPECIALS}",
            self.size()
        );
        for tok in &self.id_to_token[NUM_SPECIALS..] {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Format("missing header".into()))?;
        let rest = header
            .strip_prefix(VOCAB_HEADER)
            .ok_or_else(|| TokenizerError::Format("bad header".into()))?;
        let mut size = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("schema", v)) if v != VOCAB_SCHEMA.to_string() => {
                    return Err(TokenizerError::Format(format!("unsupported schema {v}")));
                }
                Some(("size", v)) => {
                    size = Some(
                        v.parse::<usize>()
                            .map_err(|_| TokenizerError::Format("bad size".into()))?,
                    )
                }
                Some(("specials", v)) if v != NUM_SPECIALS.to_string() => {
                    return Err(TokenizerError::Format(format!("unexpected specials {v}")));
                }
                _ => {}
            }
        }
        let vocab = Vocabulary::from_tokens(lines.map(str::to_owned))?;
        if size != Some(vocab.size()) {
            return Err(TokenizerError::Format(format!(
                "header size {size:?} but {} tokens",
                vocab.size()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Vocabulary::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Build a vocabulary ranked by descending frequency, ties broken
/// lexicographically; tokens seen fewer than `min_freq` times are dropped and
/// the total size including specials is capped at `max_vocab`.
pub fn build_vocab<'a, I>(songs: I, max_vocab: usize, min_freq: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = &'a Song>,
{
    if max_vocab < NUM_SPECIALS + 1 {
        return Err(TokenizerError::VocabTooSmall {
            min: NUM_SPECIALS + 1,
            got: max_vocab,
        });
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_songs = 0;
    for song in songs {
        n_songs += 1;
        for tok in split_tokens(&normalize(&song.lyrics)) {
            *counts.entry(tok.to_owned()).or_default() += 1;
        }
    }
    if n_songs == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - NUM_SPECIALS);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Token ids starting with BOS, PAD only as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Validate raw ids against a vocabulary size.
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self, TokenizerError> {
        if ids.first() != Some(&BOS) {
            return Err(TokenizerError::InvalidSequence("must start with BOS"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(TokenizerError::IdOutOfRange {
                id,
                size: vocab_size,
            });
        }
        if let Some(first_pad) = ids.iter().position(|&id| id == PAD) {
            if ids[first_pad..].iter().any(|&id| id != PAD) {
                return Err(TokenizerError::InvalidSequence("PAD must be a suffix"));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the last non-PAD position.
    pub fn last_content_position(&self) -> usize {
        self.ids.iter().rposition(|&id| id != PAD).unwrap_or(0)
    }
}

/// Encode text into at most `max_seq_len` ids: BOS, the (possibly truncated)
/// tokens, then EOS. `max_seq_len` below 2 is raised to 2.
pub fn encode(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> TokenSequence {
    let max_seq_len = max_seq_len.max(2);
    let normalized = normalize(text);
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(BOS);
    for tok in split_tokens(&normalized) {
        if ids.len() == max_seq_len - 1 {
            break;
        }
        ids.push(vocab.id(tok).unwrap_or(UNK));
    }
    ids.push(EOS);
    TokenSequence { ids }
}

/// Decode ids back to space-joined tokens; PAD/BOS/EOS are dropped and UNK
/// renders as `⟨unk⟩`.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut words = Vec::with_capacity(seq.len());
    for &id in seq.ids() {
        let tok = vocab.token(id).ok_or(TokenizerError::IdOutOfRange {
            id,
            size: vocab.size(),
        })?;
        if matches!(id, PAD | BOS | EOS) {
            continue;
        }
        words.push(tok);
    }
    Ok(words.join(" "))
}
