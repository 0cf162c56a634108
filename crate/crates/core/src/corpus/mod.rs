//! Vocabulary, sentences and triplets, the synthetic cipher corpus, and the
//! tab-separated triplet file format.

mod synthetic;
mod tsv;
mod vocab;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

pub use synthetic::{
    corrupt, gen_synthetic_triplets, oversample_merge, Cipher, NoiseSpec, NoiseStats,
};
pub use tsv::{load_triplets, save_triplets, write_pseudo_dump, LoadedTriplets};
pub(crate) use synthetic::item_seed;
pub use vocab::{
    build_vocab, TokenId, Vocabulary, BOS, EOS, NUM_RESERVED, PAD, PLH, RESERVED_TOKENS, UNK,
};

/// A sequence of token ids. BOS/EOS framing is added only when a sentence
/// enters a network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sentence(pub Vec<TokenId>);

impl Sentence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Sentence(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    pub fn placeholder_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == PLH).count()
    }

    /// The sentence with every `[PLH]` removed.
    pub fn without_placeholders(&self) -> Sentence {
        Sentence(self.0.iter().copied().filter(|&t| t != PLH).collect())
    }
}

impl Deref for Sentence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl AsRef<[TokenId]> for Sentence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Sentence {
    fn from(ids: Vec<TokenId>) -> Self {
        Sentence(ids)
    }
}

impl<const N: usize> From<[TokenId; N]> for Sentence {
    fn from(ids: [TokenId; N]) -> Self {
        Sentence(ids.to_vec())
    }
}

/// Source sentence, machine translation, post-edit, and an optional golden
/// reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub src: Sentence,
    pub mt: Sentence,
    pub pe: Sentence,
    pub reference: Option<Sentence>,
}

impl Triplet {
    pub fn new(src: impl Into<Sentence>, mt: impl Into<Sentence>, pe: impl Into<Sentence>) -> Self {
        Triplet {
            src: src.into(),
            mt: mt.into(),
            pe: pe.into(),
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: impl Into<Sentence>) -> Self {
        self.reference = Some(reference.into());
        self
    }
}
