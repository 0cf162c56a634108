//! Task heads over the shared network: the fine-grained tagger, the
//! placeholder filler, and the generative rewriter.
//!
//! Framing: the source enters the encoder as `s EOS`, a translation enters
//! the memory encoder as `BOS m` (the `BOS` slot predicts the sentinel tag),
//! and the decoder reads `BOS e` and predicts `e EOS`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TokenId, BOS, EOS, PAD, PLH};
use crate::editalign::{hter, plh_insert, qe_tags, Hter, QeTagSequence, Tag};
use crate::error::{ApeError, Result};
use crate::nn::layers::Ctx;
use crate::nn::loss::{cross_entropy, softmax_rows};
use crate::nn::{Grads, MemoryRef, Network, StackCache, Tensor};

/// Tag `t ∈ {-1, 0, 1, …, k_max}` is class `t + 1`.
pub fn tag_class(tag: Tag) -> usize {
    (tag + 1) as usize
}

pub fn class_tag(class: usize) -> Tag {
    class as Tag - 1
}

/// Largest tag the network can predict.
pub fn k_max(net: &Network) -> Tag {
    net.cfg.qe_classes as Tag - 2
}

/// Longest output the generative decoder may emit for a translation of
/// `mt_len` tokens.
pub fn gm_max_len(mt_len: usize) -> usize {
    2 * mt_len + 8
}

#[derive(Clone, Debug, PartialEq)]
pub struct QePrediction {
    pub tags: QeTagSequence,
    /// Tag distributions, `(|m| + 1, k_max + 2)`, sentinel row first.
    pub probs: Option<Tensor>,
    pub hter: Hter,
}

impl QePrediction {
    pub fn from_tags(tags: QeTagSequence) -> Self {
        let hter = hter(&tags);
        QePrediction { tags, probs: None, hter }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceModel {
    Aom,
    Gm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApeOutput {
    pub tokens: Sentence,
    pub source_model: SourceModel,
    pub iterations_used: usize,
    /// Refinement stopped because an iteration left the sentence unchanged.
    pub converged: bool,
    /// The generative decoder stopped at its length bound.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmOutput {
    pub tokens: Sentence,
    pub truncated: bool,
}

/// The three inference operations the hierarchical loop needs.
pub trait Editor {
    fn qe(&self, s: &Sentence, m: &Sentence) -> Result<QePrediction>;
    fn aom_fill(&self, s: &Sentence, m_tilde: &Sentence) -> Result<Sentence>;
    fn gm_decode(&self, s: &Sentence, m: &Sentence) -> Result<GmOutput>;

    /// Longest sentence the editor accepts, if bounded.
    fn max_input_len(&self) -> Option<usize> {
        None
    }
}

impl Editor for Network {
    fn qe(&self, s: &Sentence, m: &Sentence) -> Result<QePrediction> {
        qe_forward(self, s, m)
    }

    fn aom_fill(&self, s: &Sentence, m_tilde: &Sentence) -> Result<Sentence> {
        aom_fill(self, s, m_tilde)
    }

    fn gm_decode(&self, s: &Sentence, m: &Sentence) -> Result<GmOutput> {
        gm_decode(self, s, m, gm_max_len(m.len()))
    }

    fn max_input_len(&self) -> Option<usize> {
        Some(self.cfg.max_len - 1)
    }
}

/// Whether every framed sequence of the triplet fits the position table.
pub fn fits(net: &Network, s: &[TokenId], m: &[TokenId], e: &[TokenId]) -> bool {
    let limit = net.cfg.max_len;
    s.len() < limit && m.len() < limit && e.len() < limit
}

fn frame_source(s: &[TokenId]) -> Vec<TokenId> {
    s.iter().copied().chain([EOS]).collect()
}

fn frame_bos(m: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(m.iter().copied()).collect()
}

fn argmax_allowed(row: &[f64], banned: &[TokenId]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if banned.contains(&(i as TokenId)) {
            continue;
        }
        if best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best.expect("some class is allowed")
}

struct Source {
    states: Vec<f64>,
    valid: Vec<bool>,
    cache: StackCache,
}

impl Source {
    fn memory(&self) -> MemoryRef<'_> {
        MemoryRef {
            states: &self.states,
            valid: &self.valid,
        }
    }

    fn len(&self) -> usize {
        self.valid.len()
    }
}

fn run_source(net: &Network, s: &[TokenId], ctx: &mut Ctx) -> Result<Source> {
    let ids = frame_source(s);
    let valid = vec![true; ids.len()];
    let (states, cache) = net.encoder_forward(&ids, &valid, ctx)?;
    Ok(Source { states, valid, cache })
}

fn run_memory(net: &Network, m: &[TokenId], src: &Source, ctx: &mut Ctx) -> Result<(Vec<f64>, Vec<bool>, StackCache)> {
    let ids = frame_bos(m);
    let valid = vec![true; ids.len()];
    let (states, cache) = net.memory_forward(&ids, &valid, src.memory(), ctx)?;
    Ok((states, valid, cache))
}

/// Fine-grained tags for `m` given `s`. The body takes the argmax over every
/// class; the sentinel only over classes that keep the sentence start.
pub fn qe_forward(net: &Network, s: &Sentence, m: &Sentence) -> Result<QePrediction> {
    let mut ctx = Ctx::eval();
    let src = run_source(net, s, &mut ctx)?;
    let (states, _, _) = run_memory(net, m, &src, &mut ctx)?;
    let c = net.cfg.qe_classes;
    let rows = m.len() + 1;
    let logits = net.qe_head.forward(&net.params, &states, rows);
    let probs = softmax_rows(&logits, c);
    let best = |row: &[f64], lo: usize| (lo..c).fold(lo, |b, i| if row[i] > row[b] { i } else { b });
    let sentinel = class_tag(best(&probs[..c], tag_class(1)));
    let body = probs[c..].chunks_exact(c).map(|row| class_tag(best(row, 0))).collect();
    let tags = QeTagSequence::new(sentinel, body);
    let hter = hter(&tags);
    Ok(QePrediction {
        tags,
        probs: Some(Tensor::from_vec(&[rows, c], probs)),
        hter,
    })
}

/// Vocabulary logits `(|m̃|, vocab)` for every position of `m_tilde`.
pub fn aom_forward(net: &Network, s: &Sentence, m_tilde: &Sentence) -> Result<Tensor> {
    let mut ctx = Ctx::eval();
    let src = run_source(net, s, &mut ctx)?;
    let (states, _, _) = run_memory(net, m_tilde, &src, &mut ctx)?;
    let d = net.d_model();
    let n = m_tilde.len();
    let logits = net.pe_head.forward(&net.params, &states[d..], n);
    Ok(Tensor::from_vec(&[n, net.cfg.vocab_size], logits))
}

/// Replaces each `[PLH]` of `m_tilde` with its most likely token and copies
/// every other token.
pub fn aom_fill(net: &Network, s: &Sentence, m_tilde: &Sentence) -> Result<Sentence> {
    if m_tilde.placeholder_count() == 0 {
        return Ok(m_tilde.clone());
    }
    let logits = aom_forward(net, s, m_tilde)?;
    let v = net.cfg.vocab_size;
    let filled = m_tilde
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t == PLH {
                argmax_allowed(&logits.data()[i * v..(i + 1) * v], &[PAD, BOS, EOS, PLH]) as TokenId
            } else {
                t
            }
        })
        .collect();
    Ok(Sentence(filled))
}

/// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
pub fn gm_decode(net: &Network, s: &Sentence, m: &Sentence, max_len: usize) -> Result<GmOutput> {
    let mut ctx = Ctx::eval();
    let src = run_source(net, s, &mut ctx)?;
    let (joint, joint_valid, _) = run_memory(net, m, &src, &mut ctx)?;
    let joint = MemoryRef {
        states: &joint,
        valid: &joint_valid,
    };
    let d = net.d_model();
    let limit = max_len.min(net.cfg.max_len.saturating_sub(1));
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    loop {
        if out.len() >= limit {
            return Ok(GmOutput {
                tokens: Sentence(out),
                truncated: true,
            });
        }
        let valid = vec![true; prefix.len()];
        let (hidden, _) = net.decoder_forward(&prefix, &valid, joint, src.memory(), net.cfg.shortcut, &mut ctx)?;
        let last = &hidden[(prefix.len() - 1) * d..];
        let logits = net.gen_head.forward(&net.params, last, 1);
        let next = argmax_allowed(&logits, &[PAD, BOS, PLH]) as TokenId;
        if next == EOS {
            return Ok(GmOutput {
                tokens: Sentence(out),
                truncated: false,
            });
        }
        out.push(next);
        prefix.push(next);
    }
}

/// Replaces each position by `[PLH]` with probability `rate`. The mask marks
/// exactly the replaced positions.
pub fn pretrain_mask<R: Rng>(target: &Sentence, rate: f64, rng: &mut R) -> (Sentence, Vec<bool>) {
    let mask: Vec<bool> = target.iter().map(|_| rng.gen::<f64>() < rate).collect();
    let masked = target
        .iter()
        .zip(&mask)
        .map(|(&t, &m)| if m { PLH } else { t })
        .collect();
    (Sentence(masked), mask)
}

/// Placeholder-filling inputs derived from oracle tags. `m̃` is built from
/// the unclipped tags so that it stays aligned with the post-edit.
#[derive(Clone, Debug, PartialEq)]
pub struct AomTargets {
    pub m_tilde: Sentence,
    pub supervised: Vec<bool>,
}

pub fn aom_targets(m: &[TokenId], pe: &[TokenId]) -> Result<AomTargets> {
    let m_tilde = plh_insert(m, &qe_tags(m, pe))?;
    debug_assert_eq!(m_tilde.len(), pe.len());
    let supervised = m_tilde.iter().map(|&t| t == PLH).collect();
    Ok(AomTargets { m_tilde, supervised })
}

fn scaled(mut g: Vec<f64>, weight: f64) -> Vec<f64> {
    if weight != 1.0 {
        g.iter_mut().for_each(|v| *v *= weight);
    }
    g
}

fn add(acc: &mut [f64], other: &[f64]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// Token cross-entropy of the placeholder-filling head at the supervised
/// positions of `m_tilde`. Pretraining and the atomic editor both use it.
///
/// Returns `None`, with no gradient, when no position is supervised. When
/// `grads` is given, `weight` times the gradient is added to it.
#[allow(clippy::too_many_arguments)]
pub fn aom_loss(
    net: &Network,
    grads: Option<&mut Grads>,
    s: &Sentence,
    m_tilde: &Sentence,
    targets: &[TokenId],
    supervised: &[bool],
    weight: f64,
    ctx: &mut Ctx,
) -> Result<Option<f64>> {
    check_aligned(m_tilde, targets, supervised)?;
    if !supervised.iter().any(|&x| x) {
        return Ok(None);
    }
    let src = run_source(net, s, ctx)?;
    let (states, _, cache) = run_memory(net, m_tilde, &src, ctx)?;
    let (loss, dmem) = pe_head_loss(net, &states, targets, supervised)?;
    if let Some(grads) = grads {
        let dmem = pe_head_backward(net, grads, &states, dmem, weight);
        let dsrc = net.memory_backward(grads, &cache, &dmem, src.len());
        net.encoder_backward(grads, &src.cache, &dsrc);
    }
    Ok(Some(loss))
}

fn check_aligned(m_tilde: &Sentence, targets: &[TokenId], supervised: &[bool]) -> Result<()> {
    if m_tilde.len() != targets.len() || m_tilde.len() != supervised.len() {
        return Err(ApeError::LengthMismatch(format!(
            "{} inputs, {} targets, {} mask entries",
            m_tilde.len(),
            targets.len(),
            supervised.len()
        )));
    }
    Ok(())
}

/// Loss and logit gradient of the fill head over memory rows `1..`.
fn pe_head_loss(
    net: &Network,
    states: &[f64],
    targets: &[TokenId],
    supervised: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let d = net.d_model();
    let logits = net.pe_head.forward(&net.params, &states[d..], targets.len());
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    cross_entropy(&logits, net.cfg.vocab_size, &targets, supervised)
}

fn pe_head_backward(net: &Network, grads: &mut Grads, states: &[f64], dlogits: Vec<f64>, weight: f64) -> Vec<f64> {
    let d = net.d_model();
    let n = states.len() / d - 1;
    let dh = net
        .pe_head
        .backward(&net.params, grads, &states[d..], &scaled(dlogits, weight), n);
    let mut dmem = vec![0.0; states.len()];
    dmem[d..].copy_from_slice(&dh);
    dmem
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub qe: f64,
    /// Absent when the oracle tags call for no placeholder.
    pub aom: Option<f64>,
    /// Tags that exceeded the largest class and were clipped.
    pub clipped: usize,
}

impl JointLoss {
    pub fn total(&self) -> f64 {
        self.qe + self.aom.unwrap_or(0.0)
    }
}

/// Tagging loss on `(s, m)` plus the fill loss on the placeholders that the
/// oracle tags of `(m, e)` call for. Both terms flow into the shared encoder.
pub fn joint_qe_aom_loss(
    net: &Network,
    grads: Option<&mut Grads>,
    s: &Sentence,
    m: &Sentence,
    e: &Sentence,
    weight: f64,
    ctx: &mut Ctx,
) -> Result<JointLoss> {
    let oracle = qe_tags(m, e);
    let (clipped_tags, clipped) = oracle.clipped(k_max(net));
    let aom = aom_targets(m, e)?;

    let src = run_source(net, s, ctx)?;
    let (qe_states, _, qe_cache) = run_memory(net, m, &src, ctx)?;
    let c = net.cfg.qe_classes;
    let rows = m.len() + 1;
    let qe_logits = net.qe_head.forward(&net.params, &qe_states, rows);
    let classes: Vec<usize> = std::iter::once(clipped_tags.sentinel)
        .chain(clipped_tags.body.iter().copied())
        .map(tag_class)
        .collect();
    let (qe_loss, dqe) = cross_entropy(&qe_logits, c, &classes, &vec![true; rows])?;

    let fill = if aom.supervised.iter().any(|&x| x) {
        let (states, _, cache) = run_memory(net, &aom.m_tilde, &src, ctx)?;
        let (loss, dlogits) = pe_head_loss(net, &states, e, &aom.supervised)?;
        Some((loss, states, cache, dlogits))
    } else {
        None
    };

    if let Some(grads) = grads {
        let dh = net
            .qe_head
            .backward(&net.params, grads, &qe_states, &scaled(dqe, weight), rows);
        let mut dsrc = net.memory_backward(grads, &qe_cache, &dh, src.len());
        if let Some((_, states, cache, dlogits)) = &fill {
            let dmem = pe_head_backward(net, grads, states, dlogits.clone(), weight);
            add(&mut dsrc, &net.memory_backward(grads, cache, &dmem, src.len()));
        }
        net.encoder_backward(grads, &src.cache, &dsrc);
    }
    Ok(JointLoss {
        qe: qe_loss,
        aom: fill.map(|f| f.0),
        clipped,
    })
}

/// Teacher-forced cross-entropy of `e EOS` under the generative decoder.
pub fn gm_loss(
    net: &Network,
    grads: Option<&mut Grads>,
    s: &Sentence,
    m: &Sentence,
    e: &Sentence,
    weight: f64,
    ctx: &mut Ctx,
) -> Result<f64> {
    let src = run_source(net, s, ctx)?;
    let (joint, joint_valid, mem_cache) = run_memory(net, m, &src, ctx)?;
    let input = frame_bos(e);
    let valid = vec![true; input.len()];
    let joint_ref = MemoryRef {
        states: &joint,
        valid: &joint_valid,
    };
    let (hidden, dec_cache) = net.decoder_forward(&input, &valid, joint_ref, src.memory(), net.cfg.shortcut, ctx)?;
    let n = input.len();
    let logits = net.gen_head.forward(&net.params, &hidden, n);
    let targets: Vec<usize> = e.iter().copied().chain([EOS]).map(|t| t as usize).collect();
    let (loss, dlogits) = cross_entropy(&logits, net.cfg.vocab_size, &targets, &vec![true; n])?;
    if let Some(grads) = grads {
        let dh = net
            .gen_head
            .backward(&net.params, grads, &hidden, &scaled(dlogits, weight), n);
        let (djoint, mut dsrc) = net.decoder_backward(grads, &dec_cache, &dh, joint_valid.len(), src.len());
        add(&mut dsrc, &net.memory_backward(grads, &mem_cache, &djoint, src.len()));
        net.encoder_backward(grads, &src.cache, &dsrc);
    }
    Ok(loss)
}

/// Per-position accuracies used to judge memorization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Accuracy) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Predicted tags against the clipped oracle tags, sentinel included.
pub fn qe_accuracy(net: &Network, s: &Sentence, m: &Sentence, e: &Sentence) -> Result<Accuracy> {
    let (gold, _) = qe_tags(m, e).clipped(k_max(net));
    let pred = qe_forward(net, s, m)?.tags;
    let correct = usize::from(pred.sentinel == gold.sentinel)
        + pred.body.iter().zip(&gold.body).filter(|(a, b)| a == b).count();
    Ok(Accuracy {
        correct,
        total: gold.body.len() + 1,
    })
}

/// Filled placeholders that match the post-edit.
pub fn aom_accuracy(net: &Network, s: &Sentence, m: &Sentence, e: &Sentence) -> Result<Accuracy> {
    let t = aom_targets(m, e)?;
    let filled = aom_fill(net, s, &t.m_tilde)?;
    let mut acc = Accuracy::default();
    for ((&sup, f), g) in t.supervised.iter().zip(filled.iter()).zip(e.iter()) {
        if sup {
            acc.total += 1;
            acc.correct += usize::from(f == g);
        }
    }
    Ok(acc)
}

/// Teacher-forced next-token accuracy over `e EOS`.
pub fn gm_accuracy(net: &Network, s: &Sentence, m: &Sentence, e: &Sentence) -> Result<Accuracy> {
    let src = net.encode(std::slice::from_ref(s))?;
    let joint = net.memory_encode(std::slice::from_ref(m), &src)?;
    let logits = net.decode_step(&[frame_bos(e)], &joint, &src, net.cfg.shortcut)?;
    let v = net.cfg.vocab_size;
    let correct = e
        .iter()
        .copied()
        .chain([EOS])
        .enumerate()
        .filter(|&(i, t)| argmax_allowed(&logits.data()[i * v..(i + 1) * v], &[]) == t as usize)
        .count();
    Ok(Accuracy {
        correct,
        total: e.len() + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamConfig, Group, NetConfig, OptimizerState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network {
        Network::new(NetConfig::tiny(20), 3)
    }

    fn s(ids: &[TokenId]) -> Sentence {
        Sentence(ids.to_vec())
    }

    #[test]
    fn qe_distributions_are_normalized() {
        let net = net();
        let p = qe_forward(&net, &s(&[5, 6, 7]), &s(&[8, 9])).unwrap();
        let probs = p.probs.unwrap();
        assert_eq!(probs.shape(), &[3, 6]);
        for row in probs.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.tags.body.len(), 2);
        assert!(p.tags.sentinel >= 1);
        assert_eq!(p.hter, hter(&p.tags));
    }

    #[test]
    fn fill_copies_non_placeholders() {
        let net = net();
        let src = s(&[5, 6]);
        let plain = s(&[7, 8, 9]);
        assert_eq!(aom_fill(&net, &src, &plain).unwrap(), plain);
        let holes = s(&[7, PLH, 9, PLH]);
        let filled = aom_fill(&net, &src, &holes).unwrap();
        assert_eq!(filled.len(), 4);
        assert_eq!((filled[0], filled[2]), (7, 9));
        assert!(filled.iter().all(|&t| t != PLH && t != PAD && t != BOS && t != EOS));
    }

    #[test]
    fn decode_respects_length_bound() {
        let net = net();
        for max_len in [0, 1, 3] {
            let out = gm_decode(&net, &s(&[5, 6]), &s(&[7]), max_len).unwrap();
            assert!(out.tokens.len() <= max_len);
        }
        assert_eq!(gm_max_len(4), 16);
    }

    #[test]
    fn mask_rate_and_determinism() {
        let target = Sentence((0..100_000).map(|i| 5 + (i % 10) as TokenId).collect());
        let (masked, mask) = pretrain_mask(&target, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
        let rate = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((rate - 0.2).abs() < 0.01, "rate {rate}");
        for ((&m, &t), &orig) in mask.iter().zip(masked.iter()).zip(target.iter()) {
            assert_eq!(m, t == PLH);
            if !m {
                assert_eq!(t, orig);
            }
        }
        let again = pretrain_mask(&target, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(again, (masked, mask));
    }

    #[test]
    fn nothing_masked_means_nothing_to_learn() {
        let net = net();
        let mut grads = net.params.zero_grads();
        let e = s(&[5, 6]);
        let out = aom_loss(&net, Some(&mut grads), &s(&[7]), &e, &e, &[false, false], 1.0, &mut Ctx::eval()).unwrap();
        assert_eq!(out, None);
        assert_eq!(grads, net.params.zero_grads());
    }

    #[test]
    fn identical_translation_trains_only_the_tagger() {
        let net = net();
        let m = s(&[5, 6, 7]);
        let loss = joint_qe_aom_loss(&net, None, &s(&[8]), &m, &m, 1.0, &mut Ctx::eval()).unwrap();
        assert_eq!(loss.aom, None);
        assert_eq!(loss.total(), loss.qe);
        assert_eq!(loss.clipped, 0);
    }

    #[test]
    fn oversized_insertions_are_clipped_for_tagging() {
        let net = net();
        let m = s(&[5]);
        let e = s(&[5, 6, 7, 8, 9, 10, 11]);
        let loss = joint_qe_aom_loss(&net, None, &s(&[8]), &m, &e, 1.0, &mut Ctx::eval()).unwrap();
        assert_eq!(loss.clipped, 1);
        assert!(loss.aom.is_some());
        let t = aom_targets(&m, &e).unwrap();
        assert_eq!(t.m_tilde.len(), e.len());
        assert_eq!(t.m_tilde.placeholder_count(), 6);
    }

    #[test]
    fn gradient_weight_scales_linearly() {
        let net = net();
        let (src, m, e) = (s(&[5, 6]), s(&[7, 8]), s(&[7, 9, 8]));
        let mut one = net.params.zero_grads();
        let mut half = net.params.zero_grads();
        gm_loss(&net, Some(&mut one), &src, &m, &e, 1.0, &mut Ctx::eval()).unwrap();
        gm_loss(&net, Some(&mut half), &src, &m, &e, 0.5, &mut Ctx::eval()).unwrap();
        one.scale(0.5);
        for i in 0..one.len() {
            for (a, b) in one.by_index(i).iter().zip(half.by_index(i)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn generative_step_changes_the_shared_encoder() {
        let mut net = net();
        let before: Vec<u64> = net.params.iter().map(|p| p.version).collect();
        let mut opt = OptimizerState::new(AdamConfig::default(), &net.params);
        let mut grads = net.params.zero_grads();
        gm_loss(&net, Some(&mut grads), &s(&[5, 6]), &s(&[7]), &s(&[7, 8]), 1.0, &mut Ctx::eval()).unwrap();
        opt.step(&mut net.params, &grads, |g| matches!(g, Group::Shared | Group::Decoder))
            .unwrap();
        for (p, v0) in net.params.iter().zip(before) {
            if p.name.starts_with("encoder.") || p.name == "embed.tokens" {
                assert!(p.version > v0, "{} not updated", p.name);
            }
            if p.group == Group::QeHead || p.group == Group::PeHead {
                assert_eq!(p.version, v0);
            }
        }
    }

    #[test]
    fn accuracy_counts() {
        let net = net();
        let (src, m, e) = (s(&[5]), s(&[6, 7]), s(&[6, 8, 7]));
        assert_eq!(qe_accuracy(&net, &src, &m, &e).unwrap().total, 3);
        assert_eq!(aom_accuracy(&net, &src, &m, &e).unwrap().total, 1);
        assert_eq!(gm_accuracy(&net, &src, &m, &e).unwrap().total, 4);
    }
}
