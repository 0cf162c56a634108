//! Hierarchical inference, corpus evaluation and threshold selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Triplet};
use crate::editalign::{plh_insert, qe_tags, to_fine_classes, to_ok_bad, OkBad, QeTagSequence};
use crate::error::{ApeError, Result};
use crate::metrics::{corpus_bleu, corpus_ter, levenshtein, pearson, tag_prf, EvalReport, Prf};
use crate::models::{ApeOutput, Editor, QePrediction, SourceModel};

/// Whether an estimated edit rate `h` sends a sentence to the generative
/// model. Rates above 1 count as 1, and `tau = 0` rewrites everything.
pub fn routes_to_gm(h: f64, tau: f64) -> bool {
    tau <= 0.0 || h.min(1.0) > tau
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub output: ApeOutput,
    /// Tags predicted for the unedited translation.
    pub qe: QePrediction,
}

fn validate(tau: f64, iterations: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ApeError::InvalidArgument(format!("tau {tau} is outside [0, 1]")));
    }
    if iterations == 0 {
        return Err(ApeError::InvalidArgument("at least one iteration is required".into()));
    }
    Ok(())
}

fn generative<E: Editor + ?Sized>(editor: &E, s: &Sentence, m: &Sentence) -> Result<ApeOutput> {
    let out = editor.gm_decode(s, m)?;
    Ok(ApeOutput {
        tokens: out.tokens,
        source_model: SourceModel::Gm,
        iterations_used: 1,
        converged: false,
        truncated: out.truncated,
    })
}

/// Tag-then-fill refinement from `m`, reusing `first` as the tags of `m`.
fn refine<E: Editor + ?Sized>(
    editor: &E,
    s: &Sentence,
    m: &Sentence,
    first: &QeTagSequence,
    iterations: usize,
) -> Result<ApeOutput> {
    let limit = editor.max_input_len();
    let mut current = m.clone();
    let mut tags = first.clone();
    for i in 1..=iterations {
        if i > 1 {
            tags = editor.qe(s, &current)?.tags;
        }
        let m_tilde = plh_insert(&current, &tags)?;
        if limit.is_some_and(|l| m_tilde.len() > l) {
            return Ok(aom_output(current, i - 1, false));
        }
        let next = editor.aom_fill(s, &m_tilde)?;
        if next == current {
            return Ok(aom_output(current, i, true));
        }
        current = next;
    }
    Ok(aom_output(current, iterations, false))
}

fn aom_output(tokens: Sentence, iterations_used: usize, converged: bool) -> ApeOutput {
    ApeOutput {
        tokens,
        source_model: SourceModel::Aom,
        iterations_used,
        converged,
        truncated: false,
    }
}

/// Post-edits `m`: tags it, rewrites it with the generative model if the
/// estimated edit rate exceeds `tau`, and otherwise refines it with the
/// atomic editor for up to `iterations` rounds, stopping at a fixpoint.
pub fn infer<E: Editor + ?Sized>(editor: &E, s: &Sentence, m: &Sentence, tau: f64, iterations: usize) -> Result<Inference> {
    validate(tau, iterations)?;
    let qe = editor.qe(s, m)?;
    let output = if routes_to_gm(qe.hter.value, tau) {
        generative(editor, s, m)?
    } else {
        refine(editor, s, m, &qe.tags, iterations)?
    };
    Ok(Inference { output, qe })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub gm: usize,
    pub aom: usize,
    pub gm_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub report: EvalReport,
    pub baseline_bleu: f64,
    pub baseline_ter: f64,
    pub routing: Routing,
    /// Mean refinement rounds over sentences the atomic editor handled.
    pub mean_iterations: f64,
    /// Share of those sentences that reached a fixpoint.
    pub fixpoint_rate: f64,
    pub truncated: usize,
    pub pearson_degenerate: bool,
    #[serde(skip)]
    pub outputs: Vec<ApeOutput>,
    #[serde(skip)]
    pub predicted_hter: Vec<f64>,
}

/// Per-sentence edit rate of `mt` against `pe`.
pub fn sentence_ter(mt: &[u32], pe: &[u32]) -> f64 {
    let edits = levenshtein(mt, pe);
    match (pe.len(), edits) {
        (0, 0) => 0.0,
        (0, _) => 1.0,
        (n, e) => e as f64 / n as f64,
    }
}

fn tag_scores(test: &[Triplet], predictions: &[&QePrediction], k_max: i32) -> Result<BTreeMap<String, Prf>> {
    let mut pred_fine = Vec::new();
    let mut gold_fine = Vec::new();
    for (t, p) in test.iter().zip(predictions) {
        let (gold, _) = qe_tags(&t.mt, &t.pe).clipped(k_max);
        pred_fine.extend(to_fine_classes(&p.tags));
        gold_fine.extend(to_fine_classes(&gold));
    }
    let mut out: BTreeMap<String, Prf> = tag_prf(&pred_fine, &gold_fine)?
        .into_iter()
        .map(|(c, prf)| (c.label().to_string(), prf))
        .collect();
    for (c, prf) in tag_prf(&to_ok_bad(&pred_fine), &to_ok_bad(&gold_fine))? {
        let name = match c {
            OkBad::Ok => "OK",
            OkBad::Bad => "BAD",
        };
        out.insert(name.to_string(), prf);
    }
    Ok(out)
}

/// Corpus scores of a set of inference results.
pub fn summarize(test: &[Triplet], results: &[Inference], k_max: i32) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(ApeError::EmptyCorpus);
    }
    if results.len() != test.len() {
        return Err(ApeError::LengthMismatch(format!(
            "{} results for {} triplets",
            results.len(),
            test.len()
        )));
    }
    let refs: Vec<&[u32]> = test.iter().map(|t| &t.pe[..]).collect();
    let hyps: Vec<&[u32]> = results.iter().map(|r| &r.output.tokens[..]).collect();
    let mts: Vec<&[u32]> = test.iter().map(|t| &t.mt[..]).collect();
    let predicted_hter: Vec<f64> = results.iter().map(|r| r.qe.hter.value).collect();
    let true_ter: Vec<f64> = test.iter().map(|t| sentence_ter(&t.mt, &t.pe)).collect();
    let corr = if test.len() >= 2 {
        pearson(&predicted_hter, &true_ter)?
    } else {
        crate::metrics::Pearson {
            r: 0.0,
            degenerate: true,
        }
    };
    let qes: Vec<&QePrediction> = results.iter().map(|r| &r.qe).collect();
    let gm = results
        .iter()
        .filter(|r| r.output.source_model == SourceModel::Gm)
        .count();
    let aom: Vec<&ApeOutput> = results
        .iter()
        .map(|r| &r.output)
        .filter(|o| o.source_model == SourceModel::Aom)
        .collect();
    let (mean_iterations, fixpoint_rate) = if aom.is_empty() {
        (0.0, 1.0)
    } else {
        let n = aom.len() as f64;
        (
            aom.iter().map(|o| o.iterations_used as f64).sum::<f64>() / n,
            aom.iter().filter(|o| o.converged).count() as f64 / n,
        )
    };
    Ok(Evaluation {
        report: EvalReport {
            bleu: corpus_bleu(&hyps, &refs)?,
            ter: corpus_ter(&hyps, &refs)?,
            per_class_f1: tag_scores(test, &qes, k_max)?,
            pearson: corr.r,
        },
        baseline_bleu: corpus_bleu(&mts, &refs)?,
        baseline_ter: corpus_ter(&mts, &refs)?,
        routing: Routing {
            gm,
            aom: aom.len(),
            gm_fraction: gm as f64 / test.len() as f64,
        },
        mean_iterations,
        fixpoint_rate,
        truncated: results.iter().filter(|r| r.output.truncated).count(),
        pearson_degenerate: corr.degenerate,
        outputs: results.iter().map(|r| r.output.clone()).collect(),
        predicted_hter,
    })
}

/// Runs [`infer`] over `test` and scores the outputs against the post-edits.
/// `k_max` is the largest tag the editor predicts; gold tags are clipped to it.
pub fn evaluate<E: Editor + ?Sized>(
    editor: &E,
    test: &[Triplet],
    tau: f64,
    iterations: usize,
    k_max: i32,
) -> Result<Evaluation> {
    let results = test
        .iter()
        .map(|t| infer(editor, &t.src, &t.mt, tau, iterations))
        .collect::<Result<Vec<_>>>()?;
    summarize(test, &results, k_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub ter: f64,
    pub bleu: f64,
    pub gm_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub best_tau: f64,
    pub table: Vec<SweepRow>,
}

/// Both candidate outputs for every triplet. Routing depends only on the
/// first tags, so any threshold's result can be assembled from these.
pub struct RoutedPair {
    pub qe: QePrediction,
    pub gm: ApeOutput,
    pub aom: ApeOutput,
}

pub fn both_routes<E: Editor + ?Sized>(editor: &E, test: &[Triplet], iterations: usize) -> Result<Vec<RoutedPair>> {
    validate(0.0, iterations)?;
    test.iter()
        .map(|t| {
            let qe = editor.qe(&t.src, &t.mt)?;
            let gm = generative(editor, &t.src, &t.mt)?;
            let aom = refine(editor, &t.src, &t.mt, &qe.tags, iterations)?;
            Ok(RoutedPair { qe, gm, aom })
        })
        .collect()
}

/// The results [`infer`] would give at threshold `tau`.
pub fn select_route(pairs: &[RoutedPair], tau: f64) -> Vec<Inference> {
    pairs
        .iter()
        .map(|p| Inference {
            output: if routes_to_gm(p.qe.hter.value, tau) {
                p.gm.clone()
            } else {
                p.aom.clone()
            },
            qe: p.qe.clone(),
        })
        .collect()
}

/// Scores every threshold in `grid` on `dev` and picks the lowest TER,
/// preferring the smallest threshold on ties.
pub fn sweep_tau<E: Editor + ?Sized>(
    editor: &E,
    dev: &[Triplet],
    grid: &[f64],
    iterations: usize,
    k_max: i32,
) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(ApeError::InvalidArgument("empty threshold grid".into()));
    }
    for &tau in grid {
        validate(tau, iterations)?;
    }
    let pairs = both_routes(editor, dev, iterations)?;
    let mut taus = grid.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut table = Vec::with_capacity(taus.len());
    for tau in taus {
        let ev = summarize(dev, &select_route(&pairs, tau), k_max)?;
        table.push(SweepRow {
            tau,
            ter: ev.report.ter,
            bleu: ev.report.bleu,
            gm_fraction: ev.routing.gm_fraction,
        });
    }
    let best = table
        .iter()
        .fold(&table[0], |b, r| if r.ter < b.ter { r } else { b });
    Ok(Sweep {
        best_tau: best.tau,
        table,
    })
}
