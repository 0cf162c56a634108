//! Pre-norm transformer stacks: the source encoder, the memory encoder (a
//! decoder block without the future mask), and the generative decoder that
//! attends to two memories in turn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttnCache, AttnMask, MultiHeadAttention};
use super::layers::{add_into, apply_mask, Ctx, FeedForward, FfnCache, LayerNorm, Linear, LnCache};
use super::params::{Grads, Group, Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::corpus::{Sentence, TokenId, BOS, EOS, PAD};
use crate::error::{ApeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Longest sequence any stack accepts, framing tokens included.
    pub max_len: usize,
    /// Number of QE tag classes, `k_max + 2`.
    pub qe_classes: usize,
    pub dropout: f64,
    /// Whether decoder blocks also attend to the source memory.
    #[serde(default = "enabled")]
    pub shortcut: bool,
}

fn enabled() -> bool {
    true
}

impl NetConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        NetConfig {
            vocab_size,
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            max_len: 24,
            qe_classes: 6,
            dropout: 0.0,
            shortcut: true,
        }
    }
}

/// `x + dropout(attn(ln(x), memory))`
#[derive(Clone, Debug)]
struct AttnBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

struct AttnBlockCache {
    ln: LnCache,
    attn: AttnCache,
    drop: Option<Vec<f64>>,
}

impl AttnBlock {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &NetConfig, group: Group, rng: &mut R) -> Self {
        AttnBlock {
            ln: LayerNorm::new(ps, &format!("{name}.norm"), cfg.d_model, group, rng),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), cfg.d_model, cfg.heads, group, rng),
        }
    }

    fn forward(
        &self,
        ps: &ParamStore,
        x: &[f64],
        memory: Option<&[f64]>,
        mask: AttnMask<'_>,
        ctx: &mut Ctx,
    ) -> (Vec<f64>, AttnBlockCache) {
        let (normed, ln) = self.ln.forward(ps, x);
        let (mut a, attn) = self.attn.forward(ps, &normed, memory, mask);
        let drop = ctx.dropout(&mut a);
        add_into(&mut a, x);
        (a, AttnBlockCache { ln, attn, drop })
    }

    /// Returns `(dx, dmemory)`; `dmemory` is empty for self-attention.
    fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &AttnBlockCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let da = apply_mask(dy, &cache.drop);
        let (dnormed, dmem) = self.attn.backward(ps, grads, &cache.attn, &da);
        let mut dx = self.ln.backward(ps, grads, &cache.ln, &dnormed);
        add_into(&mut dx, dy);
        (dx, dmem)
    }
}

/// `x + dropout(ffn(ln(x)))`
#[derive(Clone, Debug)]
struct FfnBlock {
    ln: LayerNorm,
    ffn: FeedForward,
}

struct FfnBlockCache {
    ln: LnCache,
    ffn: FfnCache,
    drop: Option<Vec<f64>>,
}

impl FfnBlock {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &NetConfig, group: Group, rng: &mut R) -> Self {
        FfnBlock {
            ln: LayerNorm::new(ps, &format!("{name}.norm"), cfg.d_model, group, rng),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg.d_model, cfg.ffn, group, rng),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &[f64], ctx: &mut Ctx) -> (Vec<f64>, FfnBlockCache) {
        let n = x.len() / self.ln.d;
        let (normed, ln) = self.ln.forward(ps, x);
        let (mut f, ffn) = self.ffn.forward(ps, &normed, n);
        let drop = ctx.dropout(&mut f);
        add_into(&mut f, x);
        (f, FfnBlockCache { ln, ffn, drop })
    }

    fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &FfnBlockCache, dy: &[f64]) -> Vec<f64> {
        let df = apply_mask(dy, &cache.drop);
        let dnormed = self.ffn.backward(ps, grads, &cache.ffn, &df);
        let mut dx = self.ln.backward(ps, grads, &cache.ln, &dnormed);
        add_into(&mut dx, dy);
        dx
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttnBlock,
    ffn: FfnBlock,
}

/// Memory-encoder layer: bidirectional self-attention over the translation,
/// cross-attention to the source memory, feed-forward.
#[derive(Clone, Debug)]
struct MemoryLayer {
    attn: AttnBlock,
    cross: AttnBlock,
    ffn: FfnBlock,
}

/// Decoder layer: causal self-attention, attention to the joint memory, then
/// attention to the source memory, feed-forward.
#[derive(Clone, Debug)]
struct DecoderLayer {
    attn: AttnBlock,
    joint: AttnBlock,
    src: AttnBlock,
    ffn: FfnBlock,
}

enum LayerCache {
    Encoder(AttnBlockCache, FfnBlockCache),
    Memory(AttnBlockCache, AttnBlockCache, FfnBlockCache),
    Decoder(AttnBlockCache, AttnBlockCache, Option<AttnBlockCache>, FfnBlockCache),
}

/// Intermediate values of one stack pass over a single sequence.
pub struct StackCache {
    ids: Vec<TokenId>,
    embed_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

impl StackCache {
    /// Every attention map computed in the pass, in layer order.
    pub fn attention_maps(&self) -> Vec<&AttnCache> {
        let mut maps = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerCache::Encoder(a, _) => maps.push(&a.attn),
                LayerCache::Memory(a, c, _) => {
                    maps.push(&a.attn);
                    maps.push(&c.attn);
                }
                LayerCache::Decoder(a, j, s, _) => {
                    maps.push(&a.attn);
                    maps.push(&j.attn);
                    if let Some(s) = s {
                        maps.push(&s.attn);
                    }
                }
            }
        }
        maps
    }
}

/// A sequence of hidden states with its key-validity mask.
#[derive(Clone, Copy, Debug)]
pub struct MemoryRef<'a> {
    pub states: &'a [f64],
    pub valid: &'a [bool],
}

/// Every trainable array of the post-editing network.
///
/// One token embedding table and the two encoder stacks are shared by the
/// tagging head, the placeholder-filling head and the generative decoder.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetConfig,
    pub params: ParamStore,
    tok_emb: ParamId,
    enc_pos: ParamId,
    mem_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    memory: Vec<MemoryLayer>,
    mem_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    pub qe_head: Linear,
    pub pe_head: Linear,
    pub gen_head: Linear,
}

impl Network {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let d = cfg.d_model;
        let glorot = |a, b| Init::Glorot { fan_in: a, fan_out: b };
        let tok_emb = ps.add("embed.tokens", &[cfg.vocab_size, d], Group::Shared, glorot(cfg.vocab_size, d), rng);
        let enc_pos = ps.add("encoder.positions", &[cfg.max_len, d], Group::Shared, glorot(cfg.max_len, d), rng);
        let mem_pos = ps.add("memory.positions", &[cfg.max_len, d], Group::Shared, glorot(cfg.max_len, d), rng);
        let dec_pos = ps.add("decoder.positions", &[cfg.max_len, d], Group::Decoder, glorot(cfg.max_len, d), rng);

        let encoder = (0..cfg.layers)
            .map(|l| EncoderLayer {
                attn: AttnBlock::new(&mut ps, &format!("encoder.{l}.self"), &cfg, Group::Shared, rng),
                ffn: FfnBlock::new(&mut ps, &format!("encoder.{l}"), &cfg, Group::Shared, rng),
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut ps, "encoder.final_norm", d, Group::Shared, rng);
        let memory = (0..cfg.layers)
            .map(|l| MemoryLayer {
                attn: AttnBlock::new(&mut ps, &format!("memory.{l}.self"), &cfg, Group::Shared, rng),
                cross: AttnBlock::new(&mut ps, &format!("memory.{l}.cross"), &cfg, Group::Shared, rng),
                ffn: FfnBlock::new(&mut ps, &format!("memory.{l}"), &cfg, Group::Shared, rng),
            })
            .collect();
        let mem_norm = LayerNorm::new(&mut ps, "memory.final_norm", d, Group::Shared, rng);
        let decoder = (0..cfg.layers)
            .map(|l| DecoderLayer {
                attn: AttnBlock::new(&mut ps, &format!("decoder.{l}.self"), &cfg, Group::Decoder, rng),
                joint: AttnBlock::new(&mut ps, &format!("decoder.{l}.joint"), &cfg, Group::Decoder, rng),
                src: AttnBlock::new(&mut ps, &format!("decoder.{l}.source"), &cfg, Group::Decoder, rng),
                ffn: FfnBlock::new(&mut ps, &format!("decoder.{l}"), &cfg, Group::Decoder, rng),
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "decoder.final_norm", d, Group::Decoder, rng);
        let qe_head = Linear::new(&mut ps, "qe_head", d, cfg.qe_classes, Group::QeHead, rng);
        let pe_head = Linear::new(&mut ps, "pe_head", d, cfg.vocab_size, Group::PeHead, rng);
        let gen_head = Linear::new(&mut ps, "decoder.head", d, cfg.vocab_size, Group::Decoder, rng);
        Network {
            cfg,
            params: ps,
            tok_emb,
            enc_pos,
            mem_pos,
            dec_pos,
            encoder,
            enc_norm,
            memory,
            mem_norm,
            decoder,
            dec_norm,
            qe_head,
            pe_head,
            gen_head,
        }
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(ApeError::OverLength {
                len,
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], pos: ParamId, ctx: &mut Ctx) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_len(ids.len())?;
        let d = self.cfg.d_model;
        let table = self.params.value(self.tok_emb);
        let positions = self.params.value(pos);
        let mut x = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.cfg.vocab_size {
                return Err(ApeError::InvalidArgument(format!(
                    "token id {id} outside a vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            x.extend(
                table[id * d..(id + 1) * d]
                    .iter()
                    .zip(&positions[i * d..(i + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        let drop = ctx.dropout(&mut x);
        Ok((x, drop))
    }

    fn embed_backward(&self, grads: &mut Grads, ids: &[TokenId], pos: ParamId, drop: &Option<Vec<f64>>, dx: &[f64]) {
        let d = self.cfg.d_model;
        let dx = apply_mask(dx, drop);
        {
            let dt = grads.get_mut(self.tok_emb);
            for (i, &id) in ids.iter().enumerate() {
                add_into(&mut dt[id as usize * d..(id as usize + 1) * d], &dx[i * d..(i + 1) * d]);
            }
        }
        let dp = grads.get_mut(pos);
        add_into(&mut dp[..dx.len()], &dx);
    }

    /// Source encoder over one framed sequence.
    pub fn encoder_forward(&self, ids: &[TokenId], valid: &[bool], ctx: &mut Ctx) -> Result<(Vec<f64>, StackCache)> {
        let ps = &self.params;
        let (mut x, embed_drop) = self.embed(ids, self.enc_pos, ctx)?;
        let mask = AttnMask {
            key_valid: valid,
            causal: false,
        };
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (x1, a) = layer.attn.forward(ps, &x, None, mask, ctx);
            let (x2, f) = layer.ffn.forward(ps, &x1, ctx);
            layers.push(LayerCache::Encoder(a, f));
            x = x2;
        }
        let (out, final_ln) = self.enc_norm.forward(ps, &x);
        Ok((
            out,
            StackCache {
                ids: ids.to_vec(),
                embed_drop,
                layers,
                final_ln,
            },
        ))
    }

    pub fn encoder_backward(&self, grads: &mut Grads, cache: &StackCache, dout: &[f64]) {
        let ps = &self.params;
        let mut dx = self.enc_norm.backward(ps, grads, &cache.final_ln, dout);
        for (layer, lc) in self.encoder.iter().zip(&cache.layers).rev() {
            let LayerCache::Encoder(a, f) = lc else {
                unreachable!("encoder cache holds encoder layers")
            };
            let d1 = layer.ffn.backward(ps, grads, f, &dx);
            dx = layer.attn.backward(ps, grads, a, &d1).0;
        }
        self.embed_backward(grads, &cache.ids, self.enc_pos, &cache.embed_drop, &dx);
    }

    /// Memory encoder over one framed translation, reading `src`.
    pub fn memory_forward(
        &self,
        ids: &[TokenId],
        valid: &[bool],
        src: MemoryRef<'_>,
        ctx: &mut Ctx,
    ) -> Result<(Vec<f64>, StackCache)> {
        let ps = &self.params;
        let (mut x, embed_drop) = self.embed(ids, self.mem_pos, ctx)?;
        let self_mask = AttnMask {
            key_valid: valid,
            causal: false,
        };
        let cross_mask = AttnMask {
            key_valid: src.valid,
            causal: false,
        };
        let mut layers = Vec::with_capacity(self.memory.len());
        for layer in &self.memory {
            let (x1, a) = layer.attn.forward(ps, &x, None, self_mask, ctx);
            let (x2, c) = layer.cross.forward(ps, &x1, Some(src.states), cross_mask, ctx);
            let (x3, f) = layer.ffn.forward(ps, &x2, ctx);
            layers.push(LayerCache::Memory(a, c, f));
            x = x3;
        }
        let (out, final_ln) = self.mem_norm.forward(ps, &x);
        Ok((
            out,
            StackCache {
                ids: ids.to_vec(),
                embed_drop,
                layers,
                final_ln,
            },
        ))
    }

    /// Returns the gradient with respect to the source memory.
    pub fn memory_backward(&self, grads: &mut Grads, cache: &StackCache, dout: &[f64], src_len: usize) -> Vec<f64> {
        let ps = &self.params;
        let mut dsrc = vec![0.0; src_len * self.cfg.d_model];
        let mut dx = self.mem_norm.backward(ps, grads, &cache.final_ln, dout);
        for (layer, lc) in self.memory.iter().zip(&cache.layers).rev() {
            let LayerCache::Memory(a, c, f) = lc else {
                unreachable!("memory cache holds memory layers")
            };
            let d2 = layer.ffn.backward(ps, grads, f, &dx);
            let (d1, dm) = layer.cross.backward(ps, grads, c, &d2);
            add_into(&mut dsrc, &dm);
            dx = layer.attn.backward(ps, grads, a, &d1).0;
        }
        self.embed_backward(grads, &cache.ids, self.mem_pos, &cache.embed_drop, &dx);
        dsrc
    }

    /// Causal decoder over one framed prefix. With `shortcut` off the
    /// source-memory attention sublayers are skipped.
    pub fn decoder_forward(
        &self,
        ids: &[TokenId],
        valid: &[bool],
        joint: MemoryRef<'_>,
        src: MemoryRef<'_>,
        shortcut: bool,
        ctx: &mut Ctx,
    ) -> Result<(Vec<f64>, StackCache)> {
        let ps = &self.params;
        let (mut x, embed_drop) = self.embed(ids, self.dec_pos, ctx)?;
        let self_mask = AttnMask {
            key_valid: valid,
            causal: true,
        };
        let joint_mask = AttnMask {
            key_valid: joint.valid,
            causal: false,
        };
        let src_mask = AttnMask {
            key_valid: src.valid,
            causal: false,
        };
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (x1, a) = layer.attn.forward(ps, &x, None, self_mask, ctx);
            let (mut x2, j) = layer.joint.forward(ps, &x1, Some(joint.states), joint_mask, ctx);
            let s = if shortcut {
                let (x3, s) = layer.src.forward(ps, &x2, Some(src.states), src_mask, ctx);
                x2 = x3;
                Some(s)
            } else {
                None
            };
            let (x4, f) = layer.ffn.forward(ps, &x2, ctx);
            layers.push(LayerCache::Decoder(a, j, s, f));
            x = x4;
        }
        let (out, final_ln) = self.dec_norm.forward(ps, &x);
        Ok((
            out,
            StackCache {
                ids: ids.to_vec(),
                embed_drop,
                layers,
                final_ln,
            },
        ))
    }

    /// Returns gradients with respect to the joint and source memories.
    pub fn decoder_backward(
        &self,
        grads: &mut Grads,
        cache: &StackCache,
        dout: &[f64],
        joint_len: usize,
        src_len: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let ps = &self.params;
        let d = self.cfg.d_model;
        let mut djoint = vec![0.0; joint_len * d];
        let mut dsrc = vec![0.0; src_len * d];
        let mut dx = self.dec_norm.backward(ps, grads, &cache.final_ln, dout);
        for (layer, lc) in self.decoder.iter().zip(&cache.layers).rev() {
            let LayerCache::Decoder(a, j, s, f) = lc else {
                unreachable!("decoder cache holds decoder layers")
            };
            let mut d3 = layer.ffn.backward(ps, grads, f, &dx);
            if let Some(s) = s {
                let (d2, dm) = layer.src.backward(ps, grads, s, &d3);
                add_into(&mut dsrc, &dm);
                d3 = d2;
            }
            let (d1, dm) = layer.joint.backward(ps, grads, j, &d3);
            add_into(&mut djoint, &dm);
            dx = layer.attn.backward(ps, grads, a, &d1).0;
        }
        self.embed_backward(grads, &cache.ids, self.dec_pos, &cache.embed_drop, &dx);
        (djoint, dsrc)
    }

    /// Encodes a batch of source sentences, each framed as `s EOS` and padded
    /// to the longest row. Returns `(batch, len, d_model)` states.
    pub fn encode(&self, src: &[Sentence]) -> Result<BatchMemory> {
        let framed: Vec<Vec<TokenId>> = src
            .iter()
            .map(|s| s.iter().copied().chain([EOS]).collect())
            .collect();
        self.run_padded(&framed, |ids, valid| {
            Ok(self.encoder_forward(ids, valid, &mut Ctx::eval())?.0)
        })
    }

    /// Runs the memory encoder over a batch of translations (framed as
    /// `BOS m`) against the matching rows of `src`.
    pub fn memory_encode(&self, mt: &[Sentence], src: &BatchMemory) -> Result<BatchMemory> {
        if mt.len() != src.batch() {
            return Err(ApeError::LengthMismatch(format!(
                "{} translations for {} source rows",
                mt.len(),
                src.batch()
            )));
        }
        let framed: Vec<Vec<TokenId>> = mt
            .iter()
            .map(|m| std::iter::once(BOS).chain(m.iter().copied()).collect())
            .collect();
        let mut row = 0;
        self.run_padded(&framed, |ids, valid| {
            let r = row;
            row += 1;
            Ok(self.memory_forward(ids, valid, src.row(r), &mut Ctx::eval())?.0)
        })
    }

    /// Next-token logits `(batch, prefix_len, vocab)` for prefixes that start
    /// with `BOS`.
    pub fn decode_step(
        &self,
        prefixes: &[Vec<TokenId>],
        joint: &BatchMemory,
        src: &BatchMemory,
        shortcut: bool,
    ) -> Result<Tensor> {
        if prefixes.len() != joint.batch() || prefixes.len() != src.batch() {
            return Err(ApeError::LengthMismatch("prefix and memory batch sizes differ".into()));
        }
        if prefixes.iter().any(|p| p.first() != Some(&BOS)) {
            return Err(ApeError::InvalidArgument("every prefix must start with BOS".into()));
        }
        let mut row = 0;
        let hidden = self.run_padded(prefixes, |ids, valid| {
            let r = row;
            row += 1;
            Ok(self
                .decoder_forward(ids, valid, joint.row(r), src.row(r), shortcut, &mut Ctx::eval())?
                .0)
        })?;
        let (b, len, d) = (hidden.batch(), hidden.len(), self.cfg.d_model);
        let v = self.cfg.vocab_size;
        let mut logits = Vec::with_capacity(b * len * v);
        for r in 0..b {
            logits.extend(self.gen_head.forward(&self.params, hidden.row(r).states, len));
        }
        debug_assert_eq!(hidden.states.data().len(), b * len * d);
        Ok(Tensor::from_vec(&[b, len, v], logits))
    }

    fn run_padded<F>(&self, rows: &[Vec<TokenId>], mut f: F) -> Result<BatchMemory>
    where
        F: FnMut(&[TokenId], &[bool]) -> Result<Vec<f64>>,
    {
        if rows.is_empty() {
            return Err(ApeError::InvalidArgument("empty batch".into()));
        }
        if rows.iter().any(Vec::is_empty) {
            return Err(ApeError::InvalidArgument("empty sequence in batch".into()));
        }
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        self.check_len(len)?;
        let d = self.cfg.d_model;
        let mut states = Vec::with_capacity(rows.len() * len * d);
        let mut valid = Vec::with_capacity(rows.len());
        for row in rows {
            let mut ids = row.clone();
            ids.resize(len, PAD);
            let v: Vec<bool> = (0..len).map(|i| i < row.len()).collect();
            states.extend(f(&ids, &v)?);
            valid.push(v);
        }
        Ok(BatchMemory {
            states: Tensor::from_vec(&[rows.len(), len, d], states),
            valid,
        })
    }

    /// Names of the parameters whose values differ between two networks of
    /// the same architecture.
    pub fn changed_params(&self, other: &Network) -> Vec<String> {
        self.params
            .iter()
            .zip(other.params.iter())
            .filter(|(a, b)| a.value != b.value)
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }
}

/// Padded batch of hidden states with per-row validity masks.
#[derive(Clone, Debug)]
pub struct BatchMemory {
    pub states: Tensor,
    pub valid: Vec<Vec<bool>>,
}

impl BatchMemory {
    pub fn batch(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> MemoryRef<'_> {
        MemoryRef {
            states: self.states.slice(&[r]),
            valid: &self.valid[r],
        }
    }
}
