use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ApeError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PLH: TokenId = 3;
pub const UNK: TokenId = 4;

/// Number of reserved ids at the start of every vocabulary.
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[BOS]", "[EOS]", "[PLH]", "[UNK]"];

/// Bidirectional token/id map. Ids `0..5` are always the reserved symbols
/// `[PAD] [BOS] [EOS] [PLH] [UNK]`, in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary (non-reserved) tokens, in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(ApeError::InvalidArgument(format!(
                    "vocabulary id {i} must be {reserved}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(ApeError::InvalidArgument(format!(
                    "vocabulary token {id} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(ApeError::InvalidArgument(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Closed synthetic vocabulary of `size` ids: the reserved block followed
    /// by content tokens `w005`, `w006`, ...
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_RESERVED {
            return Err(ApeError::InvalidArgument(format!(
                "synthetic vocabulary needs more than {NUM_RESERVED} ids, got {size}"
            )));
        }
        Self::from_tokens((NUM_RESERVED..size).map(|id| format!("w{id:03}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps tokens to ids, sending unknown tokens to `[UNK]`. Returns the ids
    /// and the number of unknown tokens.
    pub fn encode<'a, I>(&self, tokens: I) -> (Vec<TokenId>, usize)
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut unknown = 0;
        let ids = tokens
            .into_iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for tok in &self.tokens {
            writeln!(out, "{tok}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| ApeError::io(path, e))
    }

    /// Reads a vocabulary file: one token per line, line index = id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ApeError::io(path, e))?;
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }
}

/// Builds a vocabulary of at most `max_size` ids (reserved ids included)
/// keeping the most frequent tokens. Frequency ties are broken
/// lexicographically.
pub fn build_vocab<I, S, T>(sentences: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if max_size <= NUM_RESERVED {
        return Err(ApeError::InvalidArgument(format!(
            "max_size must exceed {NUM_RESERVED}, got {max_size}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut seen_any = false;
    for sentence in sentences {
        seen_any = true;
        for tok in sentence {
            let tok = tok.as_ref();
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(ApeError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
