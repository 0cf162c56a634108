use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, NUM_RESERVED};
use super::{Sentence, Triplet};
use crate::error::{ApeError, Result};

/// Seed of the cipher permutation. Fixed so that every split generated for a
/// given vocabulary size speaks the same "source language".
const CIPHER_SEED: u64 = 0x5eed_c1f3_0000_0001;

/// Per-token corruption rates applied to a post-edit to produce a machine
/// translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p_delete: f64,
    pub p_substitute: f64,
    pub p_insert: f64,
    pub p_swap: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none(seed: u64) -> Self {
        NoiseSpec {
            p_delete: 0.0,
            p_substitute: 0.0,
            p_insert: 0.0,
            p_swap: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_delete, self.p_substitute, self.p_insert, self.p_swap];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ApeError::InvalidArgument(
                "noise probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.p_delete + self.p_substitute + self.p_swap > 1.0 + 1e-12 {
            return Err(ApeError::InvalidArgument(
                "p_delete + p_substitute + p_swap must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// Counts of the corruption events drawn by [`corrupt`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoiseStats {
    pub tokens: usize,
    pub deleted: usize,
    pub substituted: usize,
    pub swapped: usize,
    pub inserted: usize,
}

impl std::ops::AddAssign for NoiseStats {
    fn add_assign(&mut self, o: Self) {
        self.tokens += o.tokens;
        self.deleted += o.deleted;
        self.substituted += o.substituted;
        self.swapped += o.swapped;
        self.inserted += o.inserted;
    }
}

/// Fixed permutation of the content ids of a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cipher {
    forward: Vec<TokenId>,
    inverse: Vec<TokenId>,
}

impl Cipher {
    pub fn new(vocab_size: usize) -> Self {
        let mut forward: Vec<TokenId> = (0..vocab_size as TokenId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(CIPHER_SEED ^ vocab_size as u64);
        forward[NUM_RESERVED.min(vocab_size)..].shuffle(&mut rng);
        let mut inverse = vec![0; vocab_size];
        for (plain, &coded) in forward.iter().enumerate() {
            inverse[coded as usize] = plain as TokenId;
        }
        Cipher { forward, inverse }
    }

    /// Maps a target-side sentence to its source-side rendering: permute
    /// every id, then reverse the order.
    pub fn encipher(&self, plain: &[TokenId]) -> Sentence {
        Sentence(plain.iter().rev().map(|&t| self.forward[t as usize]).collect())
    }

    pub fn decipher(&self, coded: &[TokenId]) -> Sentence {
        Sentence(coded.iter().rev().map(|&t| self.inverse[t as usize]).collect())
    }
}

pub(crate) fn item_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer so that nearby corpus seeds do not share items
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) ^ index
}

fn content_token<R: Rng>(rng: &mut R, vocab_size: usize) -> TokenId {
    rng.gen_range(NUM_RESERVED..vocab_size) as TokenId
}

/// Corrupts `pe` into a machine-translation-like sentence.
///
/// Every token is independently deleted, substituted by a different content
/// token, or swapped with its right neighbour; every one of the `|pe| + 1`
/// gaps independently receives a random inserted token.
pub fn corrupt<R: Rng>(
    pe: &[TokenId],
    noise: &NoiseSpec,
    vocab_size: usize,
    rng: &mut R,
) -> (Sentence, NoiseStats) {
    let mut out = Vec::with_capacity(pe.len() + 2);
    let mut stats = NoiseStats {
        tokens: pe.len(),
        ..Default::default()
    };
    let mut i = 0;
    while i < pe.len() {
        if rng.gen::<f64>() < noise.p_insert {
            out.push(content_token(rng, vocab_size));
            stats.inserted += 1;
        }
        let r: f64 = rng.gen();
        if r < noise.p_delete {
            stats.deleted += 1;
        } else if r < noise.p_delete + noise.p_substitute {
            let mut t = content_token(rng, vocab_size);
            while t == pe[i] && vocab_size > NUM_RESERVED + 1 {
                t = content_token(rng, vocab_size);
            }
            out.push(t);
            stats.substituted += 1;
        } else if r < noise.p_delete + noise.p_substitute + noise.p_swap && i + 1 < pe.len() {
            out.push(pe[i + 1]);
            out.push(pe[i]);
            stats.swapped += 1;
            i += 1;
        } else {
            out.push(pe[i]);
        }
        i += 1;
    }
    if rng.gen::<f64>() < noise.p_insert {
        out.push(content_token(rng, vocab_size));
        stats.inserted += 1;
    }
    (Sentence(out), stats)
}

/// Generates `n` cipher-corpus triplets.
///
/// `pe` is uniform over content ids with a length drawn from `len_range`
/// (inclusive), `src` is the enciphered `pe`, `mt` is `pe` passed through
/// [`corrupt`], and the reference equals `pe`. Item `i` draws from its own
/// stream, so the output is a pure function of the arguments.
pub fn gen_synthetic_triplets(
    n: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if vocab_size < 10 {
        return Err(ApeError::InvalidArgument(format!(
            "vocab_size must be at least 10, got {vocab_size}"
        )));
    }
    let (min_len, max_len) = len_range;
    if min_len < 1 || max_len < min_len {
        return Err(ApeError::InvalidArgument(format!(
            "invalid length range ({min_len}, {max_len})"
        )));
    }
    noise.validate()?;
    let cipher = Cipher::new(vocab_size);
    let triplets = (0..n as u64)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, index));
            let len = rng.gen_range(min_len..=max_len);
            let pe: Vec<TokenId> = (0..len).map(|_| content_token(&mut rng, vocab_size)).collect();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(item_seed(noise.seed, index));
            let (mt, _) = corrupt(&pe, noise, vocab_size, &mut noise_rng);
            let src = cipher.encipher(&pe);
            let pe = Sentence(pe);
            Triplet {
                src,
                mt,
                reference: Some(pe.clone()),
                pe,
            }
        })
        .collect();
    Ok(triplets)
}

/// Concatenates `synthetic` with `factor` copies of `real` and shuffles the
/// result deterministically.
pub fn oversample_merge(
    real: &[Triplet],
    synthetic: &[Triplet],
    factor: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if factor < 1 {
        return Err(ApeError::InvalidArgument("oversample factor must be at least 1".into()));
    }
    let mut merged = Vec::with_capacity(synthetic.len() + factor * real.len());
    merged.extend_from_slice(synthetic);
    for _ in 0..factor {
        merged.extend_from_slice(real);
    }
    merged.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(p_delete: f64, p_substitute: f64, p_insert: f64, p_swap: f64) -> NoiseSpec {
        NoiseSpec {
            p_delete,
            p_substitute,
            p_insert,
            p_swap,
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_copies_pe() {
        let data = gen_synthetic_triplets(200, 20, (1, 12), &NoiseSpec::none(3), 5).unwrap();
        assert!(data.iter().all(|t| t.mt == t.pe));
        assert!(data.iter().all(|t| t.reference.as_ref() == Some(&t.pe)));
    }

    #[test]
    fn cipher_inverts() {
        let cipher = Cipher::new(30);
        let data = gen_synthetic_triplets(300, 30, (1, 15), &noise(0.1, 0.1, 0.1, 0.1), 9).unwrap();
        for t in &data {
            assert_eq!(cipher.decipher(&t.src), t.pe);
            assert_eq!(t.src.len(), t.pe.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = noise(0.1, 0.2, 0.05, 0.05);
        let a = gen_synthetic_triplets(50, 25, (2, 9), &spec, 1).unwrap();
        let b = gen_synthetic_triplets(50, 25, (2, 9), &spec, 1).unwrap();
        let c = gen_synthetic_triplets(50, 25, (2, 9), &spec, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ids_stay_in_vocabulary_content_range() {
        let data = gen_synthetic_triplets(100, 12, (1, 10), &noise(0.2, 0.2, 0.2, 0.2), 4).unwrap();
        for t in &data {
            for s in [&t.src, &t.mt, &t.pe] {
                assert!(s.iter().all(|&id| (NUM_RESERVED as TokenId..12).contains(&id)));
            }
            assert!(!t.pe.is_empty());
        }
    }

    #[test]
    fn noise_rates_match_spec_within_twenty_percent() {
        let spec = noise(0.1, 0.15, 0.05, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut total = NoiseStats::default();
        while total.tokens < 20_000 {
            let pe: Vec<TokenId> = (0..10).map(|_| content_token(&mut rng, 40)).collect();
            total += corrupt(&pe, &spec, 40, &mut rng).1;
        }
        let rate = |k: usize| k as f64 / total.tokens as f64;
        assert!((rate(total.deleted) / 0.1 - 1.0).abs() < 0.2);
        assert!((rate(total.substituted) / 0.15 - 1.0).abs() < 0.2);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_synthetic_triplets(1, 9, (1, 2), &NoiseSpec::none(0), 0).is_err());
        assert!(gen_synthetic_triplets(1, 10, (0, 2), &NoiseSpec::none(0), 0).is_err());
        assert!(gen_synthetic_triplets(1, 10, (1, 2), &noise(0.6, 0.6, 0.0, 0.0), 0).is_err());
        assert!(gen_synthetic_triplets(1, 10, (1, 2), &noise(-0.1, 0.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn oversampling_sizes() {
        let synth = gen_synthetic_triplets(500, 20, (1, 5), &NoiseSpec::none(0), 1).unwrap();
        let real = gen_synthetic_triplets(23, 20, (1, 5), &NoiseSpec::none(0), 2).unwrap();
        assert_eq!(oversample_merge(&real, &synth, 20, 3).unwrap().len(), 960);

        let mut only_synth = oversample_merge(&[], &synth, 20, 3).unwrap();
        assert_eq!(only_synth.len(), synth.len());
        let mut expected = synth.clone();
        only_synth.sort_by(|a, b| (&a.src, &a.mt, &a.pe).cmp(&(&b.src, &b.mt, &b.pe)));
        expected.sort_by(|a, b| (&a.src, &a.mt, &a.pe).cmp(&(&b.src, &b.mt, &b.pe)));
        assert_eq!(only_synth, expected);

        assert!(oversample_merge(&real, &synth, 0, 3).is_err());
    }

    #[test]
    fn factor_one_is_a_permutation_of_the_union() {
        let synth = gen_synthetic_triplets(40, 20, (1, 5), &NoiseSpec::none(0), 1).unwrap();
        let real = gen_synthetic_triplets(7, 20, (1, 5), &NoiseSpec::none(0), 2).unwrap();
        let key = |t: &Triplet| (t.src.clone(), t.mt.clone(), t.pe.clone());
        let mut merged: Vec<_> = oversample_merge(&real, &synth, 1, 8).unwrap().iter().map(key).collect();
        let mut union: Vec<_> = synth.iter().chain(real.iter()).map(key).collect();
        merged.sort();
        union.sort();
        assert_eq!(merged, union);
    }
}
