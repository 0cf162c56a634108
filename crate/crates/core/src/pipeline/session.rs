//! Training state, the pretraining and joint training loops, and
//! checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::Config;
use super::infer::evaluate;
use super::runlog::RunLog;
use crate::corpus::{item_seed, write_pseudo_dump, Sentence, Triplet, Vocabulary};
use crate::error::{ApeError, Result};
use crate::imitation::{expand_training_tuple, Provenance};
use crate::models::{aom_loss, gm_loss, joint_qe_aom_loss, fits, k_max, pretrain_mask};
use crate::nn::layers::Ctx;
use crate::nn::{Checkpoint, Group, NetConfig, Network, OptimizerState, ParamStore};

const ORDER_STREAM: u64 = 0x6f72_6465_7200;
const STEP_STREAM: u64 = 0x7374_6570_0000;
const INIT_STREAM: u64 = 0x696e_6974_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: String,
    net: NetConfig,
    phase: Phase,
    step: u64,
    cursor: u64,
}

/// A network with its optimizer and position in the data stream.
pub struct Session {
    pub cfg: Config,
    pub net: Network,
    pub opt: OptimizerState,
    pub phase: Phase,
    /// Completed steps of the current phase.
    pub step: u64,
    /// Examples consumed from the shuffled data stream of the current phase.
    pub cursor: u64,
    order: Option<(u64, Vec<usize>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub qe: f64,
    pub aom: f64,
    pub gm: f64,
    pub clipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub optimizer_steps: u64,
    pub last: StepLosses,
    pub best_dev_ter: Option<f64>,
    pub stopped_early: bool,
}

/// Where training writes checkpoints and debug dumps.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub run_dir: Option<PathBuf>,
    pub vocab: Option<Vocabulary>,
}

impl Outputs {
    pub fn in_dir(run_dir: impl Into<PathBuf>) -> Self {
        Outputs {
            run_dir: Some(run_dir.into()),
            vocab: None,
        }
    }
}

fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ApeError::Divergence { step, loss })
    }
}

fn shared_or(other: Group) -> impl Fn(Group) -> bool {
    move |g| g == Group::Shared || g == other
}

impl Session {
    pub fn new(cfg: Config, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.net_config(vocab_size), item_seed(cfg.seed, INIT_STREAM));
        let opt = OptimizerState::new(cfg.adam(), &net.params);
        Ok(Session {
            cfg,
            net,
            opt,
            phase: Phase::Pretrain,
            step: 0,
            cursor: 0,
            order: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            config: self.cfg.to_text(),
            net: self.net.cfg.clone(),
            phase: self.phase,
            step: self.step,
            cursor: self.cursor,
        };
        let header = serde_json::to_string(&header).expect("header serializes");
        Checkpoint::capture(header, &self.net.params, Some(&self.opt)).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let header: Header = serde_json::from_str(&ckpt.config)
            .map_err(|e| ApeError::Checkpoint(format!("header: {e}")))?;
        let cfg = Config::parse(&header.config)?;
        let mut net = Network::new(header.net, 0);
        ckpt.restore_params(&mut net.params)?;
        let opt = match ckpt.restore_optimizer(&net.params)? {
            Some(opt) => opt,
            None => OptimizerState::new(cfg.adam(), &net.params),
        };
        Ok(Session {
            cfg,
            net,
            opt,
            phase: header.phase,
            step: header.step,
            cursor: header.cursor,
            order: None,
        })
    }

    fn step_rng(&self, phase: Phase) -> ChaCha8Rng {
        let stream = match phase {
            Phase::Pretrain => STEP_STREAM,
            Phase::Train => STEP_STREAM + 1,
        };
        ChaCha8Rng::seed_from_u64(item_seed(item_seed(self.cfg.seed, stream), self.step))
    }

    /// Next example index from a stream that reshuffles every epoch.
    fn next_index(&mut self, n: usize) -> usize {
        let epoch = self.cursor / n as u64;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let stream = item_seed(self.cfg.seed, ORDER_STREAM + self.phase as u64);
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(stream, epoch)));
            self.order = Some((epoch, perm));
        }
        let index = self.order.as_ref().expect("order set").1[(self.cursor % n as u64) as usize];
        self.cursor += 1;
        index
    }

    /// Draws examples until their post-edit tokens reach `budget`.
    fn next_batch(&mut self, lengths: &[usize], budget: usize) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while batch.is_empty() || tokens < budget {
            let i = self.next_index(lengths.len());
            tokens += lengths[i].max(1);
            batch.push(i);
        }
        batch
    }

    fn enter(&mut self, phase: Phase) {
        if self.phase != phase {
            self.phase = phase;
            self.step = 0;
            self.cursor = 0;
            self.order = None;
            self.opt = OptimizerState::new(self.cfg.adam(), &self.net.params);
        }
    }

    /// Masked-fill pretraining on `(source, target)` pairs until
    /// `pretrain.steps` steps are complete. Only the shared stacks and the
    /// fill head change.
    pub fn pretrain(&mut self, pairs: &[(Sentence, Sentence)], log: &mut RunLog) -> Result<()> {
        if pairs.is_empty() {
            return Err(ApeError::EmptyCorpus);
        }
        if self.phase == Phase::Train {
            return Err(ApeError::InvalidArgument("pretraining after joint training has started".into()));
        }
        let lengths: Vec<usize> = pairs.iter().map(|(_, t)| t.len()).collect();
        let rate = self.cfg.train.mask_rate;
        let dropout = self.cfg.model.dropout;
        while self.step < self.cfg.pretrain.steps {
            let batch = self.next_batch(&lengths, self.cfg.pretrain.batch_tokens);
            let mut rng = self.step_rng(Phase::Pretrain);
            self.step += 1;
            let masked: Vec<_> = batch
                .iter()
                .filter(|&&i| fits(&self.net, &pairs[i].0, &[], &pairs[i].1))
                .map(|&i| {
                    let (m, sup) = pretrain_mask(&pairs[i].1, rate, &mut rng);
                    (i, m, sup)
                })
                .filter(|(_, _, sup)| sup.iter().any(|&x| x))
                .collect();
            if masked.is_empty() {
                log.record("pretrain", &json!({"step": self.step, "skipped": true}))?;
                continue;
            }
            let weight = 1.0 / masked.len() as f64;
            let mut grads = self.net.params.zero_grads();
            let mut total = 0.0;
            for (b, (i, m, sup)) in masked.iter().enumerate() {
                let mut ctx = Ctx::train(dropout, item_seed(rng_seed(&mut rng), b as u64));
                let (src, tgt) = &pairs[*i];
                let loss = aom_loss(&self.net, Some(&mut grads), src, m, tgt, sup, weight, &mut ctx)?
                    .expect("supervised positions present");
                total += loss * weight;
            }
            check_finite(self.step, total)?;
            self.opt
                .step(&mut self.net.params, &grads, shared_or(Group::PeHead))?;
            log.record(
                "pretrain",
                &json!({"step": self.step, "loss": total, "lr": self.cfg.adam().learning_rate(self.opt.step)}),
            )?;
        }
        Ok(())
    }

    /// Joint training: every batch of tuples is expanded with pseudo
    /// triplets, and each of the (up to four) slots gets one step on the
    /// tagging and filling loss followed by one step on the generative loss.
    pub fn train(&mut self, data: &[Triplet], dev: &[Triplet], log: &mut RunLog, out: &Outputs) -> Result<TrainSummary> {
        if data.is_empty() {
            return Err(ApeError::EmptyCorpus);
        }
        self.enter(Phase::Train);
        let lengths: Vec<usize> = data.iter().map(|t| t.pe.len()).collect();
        let imitation = self.cfg.imitation();
        let dropout = self.cfg.model.dropout;
        let dev = &dev[..dev.len().min(self.cfg.train.dev_limit)];
        let mut best: Option<(f64, ParamStore)> = None;
        let mut stale = 0;
        let mut stopped_early = false;
        let mut last = StepLosses::default();
        let dump = match (&out.run_dir, &out.vocab) {
            (Some(dir), Some(v)) if self.cfg.train.dump_pseudo => Some((dir.join("pseudo.tsv"), v)),
            _ => None,
        };

        while self.step < self.cfg.train.steps {
            let batch = self.next_batch(&lengths, self.cfg.train.batch_tokens);
            let mut rng = self.step_rng(Phase::Train);
            self.step += 1;
            let step = self.step;

            let mut slots: Vec<Vec<(Provenance, Triplet)>> = Vec::new();
            let mut skipped = 0;
            for &i in &batch {
                let t = &data[i];
                if !fits(&self.net, &t.src, &t.mt, &t.pe) {
                    skipped += 1;
                    continue;
                }
                let rows: Vec<(Provenance, Triplet)> = if self.cfg.train.augment {
                    expand_training_tuple(&self.net, &data[i], &imitation, &mut rng)?.into()
                } else {
                    vec![(Provenance::Orig, data[i].clone())]
                };
                for (k, row) in rows.into_iter().enumerate() {
                    if slots.len() <= k {
                        slots.push(Vec::new());
                    }
                    slots[k].push(row);
                }
            }
            if let Some((path, vocab)) = &dump {
                write_pseudo_dump(path, slots.iter().flatten().map(|(p, t)| (p.label(), t)), vocab)?;
            }

            if slots.is_empty() {
                log.record("train", &json!({"step": step, "skipped": skipped}))?;
                continue;
            }
            let mut losses = StepLosses::default();
            for slot in &slots {
                let weight = 1.0 / slot.len() as f64;
                let mut grads = self.net.params.zero_grads();
                for (b, (_, t)) in slot.iter().enumerate() {
                    let mut ctx = Ctx::train(dropout, item_seed(rng_seed(&mut rng), b as u64));
                    let l = joint_qe_aom_loss(&self.net, Some(&mut grads), &t.src, &t.mt, &t.pe, weight, &mut ctx)?;
                    losses.qe += l.qe * weight;
                    losses.aom += l.aom.unwrap_or(0.0) * weight;
                    losses.clipped += l.clipped;
                }
                check_finite(step, losses.qe + losses.aom)?;
                self.opt.step(&mut self.net.params, &grads, |g| g != Group::Decoder)?;

                let mut grads = self.net.params.zero_grads();
                for (b, (_, t)) in slot.iter().enumerate() {
                    let mut ctx = Ctx::train(dropout, item_seed(rng_seed(&mut rng), b as u64));
                    losses.gm += gm_loss(&self.net, Some(&mut grads), &t.src, &t.mt, &t.pe, weight, &mut ctx)? * weight;
                }
                check_finite(step, losses.gm)?;
                self.opt
                    .step(&mut self.net.params, &grads, shared_or(Group::Decoder))?;
            }
            let n = slots.len() as f64;
            losses.qe /= n;
            losses.aom /= n;
            losses.gm /= n;
            log.record(
                "train",
                &json!({
                    "step": step,
                    "tuples": batch.len(),
                    "qe": losses.qe,
                    "aom": losses.aom,
                    "gm": losses.gm,
                    "clipped": losses.clipped,
                    "skipped": skipped,
                    "optimizer_steps": self.opt.step,
                    "lr": self.cfg.adam().learning_rate(self.opt.step),
                }),
            )?;
            last = losses;

            let every = self.cfg.train.eval_every;
            if every > 0 && step.is_multiple_of(every) {
                if let Some(dir) = &out.run_dir {
                    self.save(dir.join("checkpoint.bin"))?;
                }
                if !dev.is_empty() {
                    let ev = evaluate(&self.net, dev, self.cfg.infer.tau, self.cfg.infer.iterations, k_max(&self.net))?;
                    log.record(
                        "dev",
                        &json!({"step": step, "bleu": ev.report.bleu, "ter": ev.report.ter, "routing": ev.routing}),
                    )?;
                    if best.as_ref().is_none_or(|(b, _)| ev.report.ter < *b) {
                        best = Some((ev.report.ter, self.net.params.clone()));
                        stale = 0;
                        if let Some(dir) = &out.run_dir {
                            self.save(dir.join("best.bin"))?;
                        }
                    } else {
                        stale += 1;
                        let patience = self.cfg.train.patience;
                        if patience > 0 && stale >= patience {
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }

        let best_dev_ter = best.as_ref().map(|(t, _)| *t);
        if let Some((ter, params)) = best {
            self.net.params = params;
            log.record("restore_best", &json!({"dev_ter": ter}))?;
        }
        if let Some(dir) = &out.run_dir {
            self.save(dir.join("checkpoint.bin"))?;
        }
        Ok(TrainSummary {
            steps: self.step,
            optimizer_steps: self.opt.step,
            last,
            best_dev_ter,
            stopped_early,
        })
    }
}

fn rng_seed(rng: &mut ChaCha8Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}

/// Pretraining pairs: each source with its golden reference when present,
/// otherwise with its post-edit.
pub fn pretraining_pairs(data: &[Triplet]) -> Vec<(Sentence, Sentence)> {
    data.iter()
        .map(|t| (t.src.clone(), t.reference.clone().unwrap_or_else(|| t.pe.clone())))
        .collect()
}
