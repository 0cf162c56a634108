//! Corpus-level evaluation: BLEU-4, shift-free TER, per-class tag F1, and
//! Pearson correlation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{ApeError, Result};

/// Plain Levenshtein distance with unit costs.
pub fn levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_lengths(candidates: usize, references: usize) -> Result<()> {
    if candidates != references {
        return Err(ApeError::LengthMismatch(format!(
            "{candidates} candidates for {references} references"
        )));
    }
    if candidates == 0 {
        return Err(ApeError::InvalidArgument("empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts(s: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if s.len() >= n {
        for g in s.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 without smoothing, in `[0, 100]`.
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[R]) -> Result<f64>
where
    C: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    check_lengths(candidates.len(), references.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(r, n);
            for (g, count) in ngram_counts(c, n) {
                matches[n - 1] += count.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || (0..4).any(|k| matches[k] == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4)
        .map(|k| (matches[k] as f64 / totals[k] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Shift-free translation edit rate, scaled by 100: total Levenshtein distance
/// over total reference length.
pub fn corpus_ter<C, R>(candidates: &[C], references: &[R]) -> Result<f64>
where
    C: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    check_lengths(candidates.len(), references.len())?;
    let mut edits = 0usize;
    let mut length = 0usize;
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        let r = r.as_ref();
        if r.is_empty() {
            return Err(ApeError::InvalidArgument(format!("reference {i} is empty")));
        }
        edits += levenshtein(c.as_ref(), r);
        length += r.len();
    }
    Ok(100.0 * edits as f64 / length as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// One-vs-rest precision, recall and F1 per class over aligned positions.
/// Classes absent from both sequences are left out.
pub fn tag_prf<T: Ord + Copy>(pred: &[T], gold: &[T]) -> Result<BTreeMap<T, Prf>> {
    if pred.len() != gold.len() {
        return Err(ApeError::LengthMismatch(format!(
            "{} predicted tags for {} gold tags",
            pred.len(),
            gold.len()
        )));
    }
    // (true positives, predicted, gold)
    let mut counts: BTreeMap<T, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(g).or_default();
        e.2 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(class, (tp, p, g))| (class, Prf::from_counts(tp, p, g)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// Set when either input has zero variance; `r` is then 0.
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson> {
    if x.len() != y.len() {
        return Err(ApeError::LengthMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(ApeError::InvalidArgument(
            "pearson needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Summary numbers for one system output. `ter` is shift-free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub ter: f64,
    #[serde(rename = "f1")]
    pub per_class_f1: BTreeMap<String, Prf>,
    pub pearson: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identity_and_empty() {
        let refs = vec![vec![5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5, 4]];
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
        let empty: Vec<Vec<TokenId>> = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&empty, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_zero_fourgram_precision_is_zero() {
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1
        assert_eq!(corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 5]]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_counted_with_brevity_penalty() {
        // candidate 5 tokens, reference 6: every n-gram of the candidate matches
        let c = vec![vec![1, 2, 3, 4, 5]];
        let r = vec![vec![1, 2, 3, 4, 5, 6]];
        let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp();
        assert!((corpus_bleu(&c, &r).unwrap() - expected).abs() < 1e-9);
        // one substituted token in eight: p1=7/8 p2=5/7 p3=3/6 p4=1/5
        let c = vec![vec![1, 2, 3, 4, 9, 6, 7, 8]];
        let r = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let p: f64 = (7.0f64 / 8.0) * (5.0 / 7.0) * (3.0 / 6.0) * (1.0 / 5.0);
        assert!((corpus_bleu(&c, &r).unwrap() - 100.0 * p.powf(0.25)).abs() < 1e-9);
    }

    #[test]
    fn bleu_length_mismatch() {
        assert!(corpus_bleu(&[vec![1]], &[vec![1], vec![2]]).is_err());
    }

    #[test]
    fn ter_examples() {
        let r = vec![vec![1, 2, 3]];
        assert_eq!(corpus_ter(&r, &r).unwrap(), 0.0);
        let c = vec![vec![1, 9, 3, 4]];
        assert!((corpus_ter(&c, &r).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let c2 = vec![vec![1, 9, 3, 4], vec![1, 9, 3, 4]];
        let r2 = vec![vec![1, 2, 3], vec![1, 2, 3]];
        assert_eq!(corpus_ter(&c2, &r2).unwrap(), corpus_ter(&c, &r).unwrap());
        assert!(corpus_ter(&[vec![1]], &[Vec::<TokenId>::new()]).is_err());
    }

    #[test]
    fn prf_examples() {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
        enum T {
            K,
            E,
            M,
        }
        let all = tag_prf(&[T::K, T::E], &[T::K, T::E]).unwrap();
        assert!(all.values().all(|p| p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0));
        let m = tag_prf(&[T::K, T::K], &[T::K, T::E]).unwrap();
        assert_eq!(m[&T::K].precision, 0.5);
        assert_eq!(m[&T::K].recall, 1.0);
        assert!((m[&T::K].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m[&T::E], Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!(!m.contains_key(&T::M));
        assert!(tag_prf(&[T::K], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().r - 0.5).abs() < 1e-12);
        let flat = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flat, Pearson { r: 0.0, degenerate: true });
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let report = EvalReport {
            bleu: 50.0,
            ter: 20.0,
            per_class_f1: BTreeMap::new(),
            pearson: 0.5,
        };
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in ["bleu", "ter", "f1", "pearson"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
