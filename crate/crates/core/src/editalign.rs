//! Edit algebra over token sequences: fine-grained quality-estimation tags,
//! placeholder insertion, HTER, and tag-class conversions.
//!
//! A tag `q_i` describes what happens to machine-translation token `m_i`:
//!
//! | tag      | meaning                                 |
//! |----------|-----------------------------------------|
//! | `k > 1`  | keep `m_i`, insert `k - 1` tokens after |
//! | `1`      | keep                                    |
//! | `0`      | delete                                  |
//! | `-1`     | replace                                 |
//!
//! Insertions in front of the first token live in a separate sentinel slot
//! with the same `k > 1` semantics.

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TokenId, PLH};
use crate::error::{ApeError, Result};

pub type Tag = i32;

pub const KEEP: Tag = 1;
pub const DELETE: Tag = 0;
pub const REPLACE: Tag = -1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QeTagSequence {
    /// Insert `sentinel - 1` tokens before the first token.
    pub sentinel: Tag,
    /// One tag per machine-translation token.
    pub body: Vec<Tag>,
}

impl QeTagSequence {
    pub fn new(sentinel: Tag, body: Vec<Tag>) -> Self {
        QeTagSequence { sentinel, body }
    }

    pub fn all_keep(len: usize) -> Self {
        QeTagSequence {
            sentinel: KEEP,
            body: vec![KEEP; len],
        }
    }

    /// Number of `[PLH]` tokens that [`plh_insert`] emits for these tags.
    pub fn placeholder_count(&self) -> usize {
        let lead = (self.sentinel - 1).max(0) as usize;
        lead + self
            .body
            .iter()
            .map(|&q| match q {
                REPLACE => 1,
                q if q > 1 => (q - 1) as usize,
                _ => 0,
            })
            .sum::<usize>()
    }

    /// Clips every tag into `[-1, k_max]` (sentinel into `[1, k_max]`) and
    /// returns the clipped tags with the number of positions that changed.
    pub fn clipped(&self, k_max: Tag) -> (QeTagSequence, usize) {
        let mut changed = 0;
        let mut clip = |q: Tag, lo: Tag| {
            let c = q.clamp(lo, k_max);
            if c != q {
                changed += 1;
            }
            c
        };
        let sentinel = clip(self.sentinel, KEEP);
        let body = self.body.iter().map(|&q| clip(q, REPLACE)).collect();
        (QeTagSequence { sentinel, body }, changed)
    }

    /// Tags rendered as in the `tag-oracle` output: sentinel first.
    pub fn to_line(&self) -> String {
        std::iter::once(self.sentinel)
            .chain(self.body.iter().copied())
            .map(|q| q.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Computes the tags that turn `mt` into `pe` with a minimal edit script.
///
/// Fills the usual Levenshtein table and walks back from the bottom-right
/// corner, taking the first applicable branch among substitution, insertion,
/// deletion and match, in that order.
pub fn qe_tags(mt: &[TokenId], pe: &[TokenId]) -> QeTagSequence {
    let (m, n) = (mt.len(), pe.len());
    let w = n + 1;
    let mut d = vec![0u32; (m + 1) * w];
    for j in 0..=n {
        d[j] = j as u32;
    }
    for i in 1..=m {
        d[i * w] = i as u32;
        for j in 1..=n {
            let sub = d[(i - 1) * w + j - 1] + u32::from(mt[i - 1] != pe[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }

    // slot 0 is the sentinel, slot i is m_i
    let mut q = vec![KEEP; m + 1];
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && d[(i - 1) * w + j - 1] + 1 == here {
            q[i] = REPLACE;
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            q[i] += 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            q[i] = DELETE;
            i -= 1;
        } else {
            i -= 1;
            j -= 1;
        }
    }
    let sentinel = q[0];
    q.remove(0);
    QeTagSequence { sentinel, body: q }
}

/// Aligns `mt` to the post-edit length by inserting, deleting and blanking
/// tokens as the tags direct, leaving `[PLH]` wherever a token must be
/// predicted.
pub fn plh_insert(mt: &[TokenId], q: &QeTagSequence) -> Result<Sentence> {
    if q.body.len() != mt.len() {
        return Err(ApeError::LengthMismatch(format!(
            "{} tags for a sentence of {} tokens",
            q.body.len(),
            mt.len()
        )));
    }
    let mut out = Vec::with_capacity(mt.len() + q.placeholder_count());
    for _ in 1..q.sentinel {
        out.push(PLH);
    }
    for (&tok, &tag) in mt.iter().zip(&q.body) {
        match tag {
            REPLACE => out.push(PLH),
            DELETE => {}
            k => {
                out.push(tok);
                for _ in 1..k {
                    out.push(PLH);
                }
            }
        }
    }
    Ok(Sentence(out))
}

/// Runs [`plh_insert`] and then fills the placeholders left to right.
pub fn apply_edit_script(mt: &[TokenId], q: &QeTagSequence, fill: &[TokenId]) -> Result<Sentence> {
    let mut out = plh_insert(mt, q)?;
    let slots = out.placeholder_count();
    if slots != fill.len() {
        return Err(ApeError::LengthMismatch(format!(
            "{} fill tokens for {slots} placeholders",
            fill.len()
        )));
    }
    let mut fill = fill.iter();
    for tok in out.0.iter_mut().filter(|t| **t == PLH) {
        *tok = *fill.next().expect("counted above");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hter {
    pub value: f64,
    pub edits: u64,
    pub predicted_length: u64,
}

/// Translation edit rate implied by a tag sequence: predicted edits over
/// predicted post-edit length. Leading insertions count toward both.
pub fn hter(q: &QeTagSequence) -> Hter {
    let lead = (q.sentinel - 1).max(0) as u64;
    let mut edits = lead;
    let mut length = lead;
    for &tag in &q.body {
        edits += if tag < 1 { 1 } else { (tag - 1) as u64 };
        length += tag.unsigned_abs() as u64;
    }
    let value = match (length, edits) {
        (0, 0) => 0.0,
        (0, _) => 1.0,
        (l, e) => e as f64 / l as f64,
    };
    Hter {
        value,
        edits,
        predicted_length: length,
    }
}

/// Per-token tag classes: Kept, Erroneous, Redundant, Missing-after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineClass {
    K,
    E,
    R,
    M,
}

impl FineClass {
    pub fn label(self) -> &'static str {
        match self {
            FineClass::K => "K",
            FineClass::E => "E",
            FineClass::R => "R",
            FineClass::M => "M",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OkBad {
    Ok,
    Bad,
}

pub fn to_fine_classes(q: &QeTagSequence) -> Vec<FineClass> {
    q.body
        .iter()
        .map(|&tag| match tag {
            KEEP => FineClass::K,
            DELETE => FineClass::R,
            t if t > 1 => FineClass::M,
            _ => FineClass::E,
        })
        .collect()
}

/// Kept and missing-after tokens are themselves correct; the other two are
/// not.
pub fn to_ok_bad(classes: &[FineClass]) -> Vec<OkBad> {
    classes
        .iter()
        .map(|c| match c {
            FineClass::K | FineClass::M => OkBad::Ok,
            FineClass::E | FineClass::R => OkBad::Bad,
        })
        .collect()
}
