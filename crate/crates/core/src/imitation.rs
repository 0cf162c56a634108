//! Pseudo-triplets that isolate the insertion, substitution and deletion
//! skills, built partly from the model's own fills.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Triplet, PLH};
use crate::editalign::{plh_insert, qe_tags};
use crate::error::{ApeError, Result};
use crate::models::Editor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationConfig {
    /// Probability of masking the post-edit instead of using oracle tags.
    pub beta: f64,
    /// Per-token masking rate of the random-mask branch.
    pub mask_rate: f64,
    /// Per-gap probability of one spurious placeholder.
    pub gap_one: f64,
    /// Per-gap probability of two spurious placeholders.
    pub gap_two: f64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            beta: 0.5,
            mask_rate: 0.2,
            gap_one: 0.15,
            gap_two: 0.025,
        }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(ApeError::InvalidArgument(format!("beta {} is not in (0, 1)", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(ApeError::InvalidArgument(format!("mask rate {} is not in [0, 1]", self.mask_rate)));
        }
        if self.gap_one < 0.0 || self.gap_two < 0.0 || self.gap_one + self.gap_two > 1.0 {
            return Err(ApeError::InvalidArgument("gap probabilities must sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    OracleTags,
    RandomMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Orig,
    Ins,
    Sub,
    Del,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Orig => "orig",
            Provenance::Ins => "ins",
            Provenance::Sub => "sub",
            Provenance::Del => "del",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch {
    pub insertion: Triplet,
    pub substitution: Triplet,
    pub deletion: Triplet,
    pub branch_taken: Branch,
    /// The placeholder sentence both the insertion and substitution samples
    /// come from.
    pub m_tilde: Sentence,
}

fn triplet(src: &Sentence, mt: Sentence, pe: &Sentence) -> Triplet {
    Triplet::new(src.clone(), mt, pe.clone())
}

/// Drops placeholders, last first, until `m` is at most `limit` long.
pub fn cap_placeholders(m: Sentence, limit: Option<usize>) -> Sentence {
    let Some(limit) = limit else { return m };
    let mut excess = m.len().saturating_sub(limit);
    if excess == 0 {
        return m;
    }
    let mut out: Vec<_> = m.0;
    let mut i = out.len();
    while excess > 0 && i > 0 {
        i -= 1;
        if out[i] == PLH {
            out.remove(i);
            excess -= 1;
        }
    }
    Sentence(out)
}

/// `e` with zero, one or two placeholders drawn independently for each of
/// its `|e| + 1` gaps.
pub fn gap_placeholders<R: Rng>(e: &Sentence, cfg: &ImitationConfig, rng: &mut R) -> Sentence {
    let mut out = Vec::with_capacity(e.len() + 4);
    let gap = |out: &mut Vec<_>, rng: &mut R| {
        let r: f64 = rng.gen();
        let n = if r < cfg.gap_one {
            1
        } else if r < cfg.gap_one + cfg.gap_two {
            2
        } else {
            0
        };
        out.extend(std::iter::repeat_n(PLH, n));
    };
    for &t in e.iter() {
        gap(&mut out, rng);
        out.push(t);
    }
    gap(&mut out, rng);
    Sentence(out)
}

pub fn make_pseudo<E: Editor + ?Sized, R: Rng>(
    model: &E,
    s: &Sentence,
    m: &Sentence,
    e: &Sentence,
    cfg: &ImitationConfig,
    rng: &mut R,
) -> Result<PseudoBatch> {
    let r: f64 = rng.gen();
    let (m_tilde, branch_taken) = if r > cfg.beta {
        (plh_insert(m, &qe_tags(m, e))?, Branch::OracleTags)
    } else {
        let masked = e
            .iter()
            .map(|&t| if rng.gen::<f64>() < cfg.mask_rate { PLH } else { t })
            .collect();
        (Sentence(masked), Branch::RandomMask)
    };
    let m_tilde = cap_placeholders(m_tilde, model.max_input_len());
    let insertion = m_tilde.without_placeholders();
    let substitution = model.aom_fill(s, &m_tilde)?;
    let spurious = cap_placeholders(gap_placeholders(e, cfg, rng), model.max_input_len());
    let deletion = model.aom_fill(s, &spurious)?;
    Ok(PseudoBatch {
        insertion: triplet(s, insertion, e),
        substitution: triplet(s, substitution, e),
        deletion: triplet(s, deletion, e),
        branch_taken,
        m_tilde,
    })
}

/// `[original, insertion, substitution, deletion]`, all sharing `s` and `e`.
pub fn expand_training_tuple<E: Editor + ?Sized, R: Rng>(
    model: &E,
    tuple: &Triplet,
    cfg: &ImitationConfig,
    rng: &mut R,
) -> Result<[(Provenance, Triplet); 4]> {
    let p = make_pseudo(model, &tuple.src, &tuple.mt, &tuple.pe, cfg, rng)?;
    Ok([
        (Provenance::Orig, triplet(&tuple.src, tuple.mt.clone(), &tuple.pe)),
        (Provenance::Ins, p.insertion),
        (Provenance::Sub, p.substitution),
        (Provenance::Del, p.deletion),
    ])
}
