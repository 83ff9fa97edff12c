use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Batch, ModelConfig, Seq2SeqError};
use crate::autodiff::{Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::corpus::{TokenId, TokenSequence, Vocabulary, BOS, PAD};

/// Logit given to masked attention positions.
const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    in_proj: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<ParamId, Seq2SeqError> {
        let t = if std == 0.0 { Tensor::zeros(shape)? } else { Tensor::randn(shape, std, &mut self.rng)? };
        Ok(self.store.insert(name, t.tracked())?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<Linear, Seq2SeqError> {
        Ok(Linear {
            w: self.tensor(format!("{name}.w"), vec![fan_in, fan_out], std)?,
            b: self.tensor(format!("{name}.b"), vec![fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm, Seq2SeqError> {
        let g = self.store.insert(format!("{name}.g"), Tensor::new(vec![d], vec![T::one(); d])?.tracked())?;
        Ok(Norm { g, b: self.tensor(format!("{name}.b"), vec![d], 0.0)? })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention, Seq2SeqError> {
        let std = (d as f64).powf(-0.5);
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, std)?,
            k: self.linear(&format!("{name}.k"), d, d, std)?,
            v: self.linear(&format!("{name}.v"), d, d, std)?,
            o: self.linear(&format!("{name}.o"), d, d, std)?,
        })
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> Result<FeedForward, Seq2SeqError> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, ff, (d as f64).powf(-0.5))?,
            down: self.linear(&format!("{name}.down"), ff, d, (ff as f64).powf(-0.5))?,
        })
    }
}

/// Encoder output prepared for cross-attention: per decoder layer, keys and
/// values shaped `[batch, heads, src_len, d_head]`.
pub struct Memory {
    kv: Vec<(Var, Var)>,
    key_pad: Vec<Vec<bool>>,
    src_len: usize,
}

impl Memory {
    pub fn batch(&self) -> usize {
        self.key_pad.len()
    }
}

/// Pre-LN Transformer encoder-decoder with sinusoidal positions.
///
/// Parameters live in a [`ParamStore`]; every forward method records onto
/// a caller-supplied [`Tape`] over that store, so the same code serves
/// training (gradient tape) and decoding (inference tape).
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T: Scalar = f32> {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore<T>,
    layout: Layout,
    positions: Vec<T>,
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, Seq2SeqError> {
        config.validate()?;
        if vocab_size <= BOS {
            return Err(Seq2SeqError::InvalidConfig(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let (dt, d) = (config.d_tok, config.d_hid);
        let embedding = init.tensor("embedding".into(), vec![vocab_size, dt], (dt as f64).powf(-0.5))?;
        let in_proj = if dt != d { Some(init.linear("in_proj", dt, d, (dt as f64).powf(-0.5))?) } else { None };
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            encoder.push(EncoderLayer {
                ln_attn: init.norm(&format!("enc{l}.ln_attn"), d)?,
                attn: init.attention(&format!("enc{l}.attn"), d)?,
                ln_ff: init.norm(&format!("enc{l}.ln_ff"), d)?,
                ff: init.feed_forward(&format!("enc{l}.ff"), d, config.d_ff)?,
            });
        }
        let encoder_norm = init.norm("enc.ln", d)?;
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            decoder.push(DecoderLayer {
                ln_self: init.norm(&format!("dec{l}.ln_self"), d)?,
                self_attn: init.attention(&format!("dec{l}.self"), d)?,
                ln_cross: init.norm(&format!("dec{l}.ln_cross"), d)?,
                cross: init.attention(&format!("dec{l}.cross"), d)?,
                ln_ff: init.norm(&format!("dec{l}.ln_ff"), d)?,
                ff: init.feed_forward(&format!("dec{l}.ff"), d, config.d_ff)?,
            });
        }
        let decoder_norm = init.norm("dec.ln", d)?;
        // Small output weights keep the initial distribution close to uniform.
        let out_w = if config.tie_embeddings {
            None
        } else {
            Some(init.tensor("out.w".into(), vec![d, vocab_size], 0.1 * (d as f64).powf(-0.5))?)
        };
        let out_b = init.tensor("out.b".into(), vec![vocab_size], 0.0)?;
        let positions = sinusoid_table(config.max_len, dt);
        let layout = Layout { embedding, in_proj, encoder, encoder_norm, decoder, decoder_norm, out_w, out_b };
        Ok(Self { config, vocab_size, params, layout, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_len(&self, which: &'static str, len: usize) -> Result<(), Seq2SeqError> {
        if len == 0 || len > self.config.max_len {
            return Err(Seq2SeqError::Length { which, len, max: self.config.max_len });
        }
        Ok(())
    }

    /// Token embedding scaled by sqrt(d_tok), plus positions, projected to d_hid.
    fn embed(&self, tape: &mut Tape<'_, T>, ids: &[TokenId], n: usize, len: usize) -> Result<Var, Seq2SeqError> {
        let dt = self.config.d_tok;
        let table = tape.param(self.layout.embedding);
        let e = tape.embedding(table, ids)?;
        let e = tape.scale(e, T::from_f64_lossy((dt as f64).sqrt()));
        let e = tape.reshape(e, vec![n, len, dt])?;
        let pos = tape.constant(Tensor::new(vec![len, dt], self.positions[..len * dt].to_vec())?);
        let e = tape.add(e, pos)?;
        let e = tape.reshape(e, vec![n * len, dt])?;
        match self.layout.in_proj {
            Some(p) => self.linear(tape, e, p),
            None => Ok(e),
        }
    }

    fn linear(&self, tape: &mut Tape<'_, T>, x: Var, p: Linear) -> Result<Var, Seq2SeqError> {
        let (w, b) = (tape.param(p.w), tape.param(p.b));
        Ok(tape.linear(x, w, b)?)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var, p: Norm) -> Result<Var, Seq2SeqError> {
        let (g, b) = (tape.param(p.g), tape.param(p.b));
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn feed_forward(&self, tape: &mut Tape<'_, T>, x: Var, p: FeedForward) -> Result<Var, Seq2SeqError> {
        let h = self.linear(tape, x, p.up)?;
        let h = tape.gelu(h);
        self.linear(tape, h, p.down)
    }

    /// `[n * len, d]` to `[n * heads, len, d_head]`.
    fn split_heads(&self, tape: &mut Tape<'_, T>, x: Var, n: usize, len: usize) -> Result<Var, Seq2SeqError> {
        let (h, dh) = (self.config.heads, self.config.d_hid / self.config.heads);
        let x = tape.reshape(x, vec![n, len, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, vec![n * h, len, dh])?)
    }

    fn merge_heads(&self, tape: &mut Tape<'_, T>, x: Var, n: usize, len: usize) -> Result<Var, Seq2SeqError> {
        let (h, dh) = (self.config.heads, self.config.d_hid / self.config.heads);
        let x = tape.reshape(x, vec![n, h, len, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, vec![n * len, h * dh])?)
    }

    /// Scaled dot-product attention; `mask[((r * lq) + i) * lk + j]` hides key `j` from query `i`.
    fn attend(&self, tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var, Seq2SeqError> {
        let dh = self.config.d_hid / self.config.heads;
        let s = tape.batch_matmul(q, k, true)?;
        let s = tape.scale(s, T::from_f64_lossy((dh as f64).powf(-0.5)));
        let s = tape.mask_fill(s, mask, T::from_f64_lossy(MASK_FILL))?;
        let p = tape.softmax(s);
        Ok(tape.batch_matmul(p, v, false)?)
    }

    fn self_attention(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        p: Attention,
        n: usize,
        len: usize,
        mask: &[bool],
    ) -> Result<Var, Seq2SeqError> {
        let q = self.linear(tape, x, p.q)?;
        let k = self.linear(tape, x, p.k)?;
        let v = self.linear(tape, x, p.v)?;
        let (q, k, v) = (self.split_heads(tape, q, n, len)?, self.split_heads(tape, k, n, len)?, self.split_heads(tape, v, n, len)?);
        let ctx = self.attend(tape, q, k, v, mask)?;
        let ctx = self.merge_heads(tape, ctx, n, len)?;
        self.linear(tape, ctx, p.o)
    }

    /// Pads and encodes a batch of sources, returning per-layer cross-attention memory.
    pub fn encode(&self, tape: &mut Tape<'_, T>, sources: &[&[TokenId]]) -> Result<Memory, Seq2SeqError> {
        let n = sources.len();
        let len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        for s in sources {
            self.check_len("source", s.len())?;
        }
        let mut ids = Vec::with_capacity(n * len);
        let mut key_pad = Vec::with_capacity(n);
        for s in sources {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            key_pad.push((0..len).map(|j| j >= s.len()).collect::<Vec<bool>>());
        }
        let h = self.config.heads;
        let mut mask = Vec::with_capacity(n * h * len * len);
        for pad in &key_pad {
            for _ in 0..h * len {
                mask.extend_from_slice(pad);
            }
        }
        let mut x = self.embed(tape, &ids, n, len)?;
        for layer in &self.layout.encoder {
            let y = self.norm(tape, x, layer.ln_attn)?;
            let y = self.self_attention(tape, y, layer.attn, n, len, &mask)?;
            x = tape.add(x, y)?;
            let y = self.norm(tape, x, layer.ln_ff)?;
            let y = self.feed_forward(tape, y, layer.ff)?;
            x = tape.add(x, y)?;
        }
        let memory = self.norm(tape, x, self.layout.encoder_norm)?;
        let (heads, dh) = (self.config.heads, self.config.d_hid / self.config.heads);
        let mut kv = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let mut pair = [memory; 2];
            for (slot, p) in pair.iter_mut().zip([layer.cross.k, layer.cross.v]) {
                let t = self.linear(tape, memory, p)?;
                let t = tape.reshape(t, vec![n, len, heads, dh])?;
                *slot = tape.permute(t, &[0, 2, 1, 3])?;
            }
            kv.push((pair[0], pair[1]));
        }
        Ok(Memory { kv, key_pad, src_len: len })
    }

    /// Final decoder states `[n * len, d_hid]` for equal-length prefixes.
    /// `rows[i]` names the memory entry prefix `i` attends to.
    pub fn decode_states(
        &self,
        tape: &mut Tape<'_, T>,
        memory: &Memory,
        rows: &[usize],
        prefixes: &[&[TokenId]],
    ) -> Result<Var, Seq2SeqError> {
        let n = prefixes.len();
        let len = prefixes.first().map_or(0, |p| p.len());
        self.check_len("target", len)?;
        if rows.len() != n || prefixes.iter().any(|p| p.len() != len) {
            return Err(Seq2SeqError::InvalidConfig("decoder prefixes must share one length and have one row each".into()));
        }
        let (h, dh, sl) = (self.config.heads, self.config.d_hid / self.config.heads, memory.src_len);
        let identity = rows.len() == memory.batch() && rows.iter().enumerate().all(|(i, &r)| i == r);
        let mut cross = Vec::with_capacity(memory.kv.len());
        for &(k, v) in &memory.kv {
            let (k, v) = if identity { (k, v) } else { (tape.gather_rows(k, rows)?, tape.gather_rows(v, rows)?) };
            cross.push((tape.reshape(k, vec![n * h, sl, dh])?, tape.reshape(v, vec![n * h, sl, dh])?));
        }
        let causal: Vec<bool> = (0..len).flat_map(|i| (0..len).map(move |j| j > i)).collect();
        let self_mask: Vec<bool> = causal.iter().copied().cycle().take(n * h * len * len).collect();
        let mut cross_mask = Vec::with_capacity(n * h * len * sl);
        for &r in rows {
            for _ in 0..h * len {
                cross_mask.extend_from_slice(&memory.key_pad[r]);
            }
        }
        let ids: Vec<TokenId> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let mut x = self.embed(tape, &ids, n, len)?;
        for (layer, &(ck, cv)) in self.layout.decoder.iter().zip(&cross) {
            let y = self.norm(tape, x, layer.ln_self)?;
            let y = self.self_attention(tape, y, layer.self_attn, n, len, &self_mask)?;
            x = tape.add(x, y)?;
            let y = self.norm(tape, x, layer.ln_cross)?;
            let q = self.linear(tape, y, layer.cross.q)?;
            let q = self.split_heads(tape, q, n, len)?;
            let ctx = self.attend(tape, q, ck, cv, &cross_mask)?;
            let ctx = self.merge_heads(tape, ctx, n, len)?;
            let y = self.linear(tape, ctx, layer.cross.o)?;
            x = tape.add(x, y)?;
            let y = self.norm(tape, x, layer.ln_ff)?;
            let y = self.feed_forward(tape, y, layer.ff)?;
            x = tape.add(x, y)?;
        }
        self.norm(tape, x, self.layout.decoder_norm)
    }

    /// Output logits `[rows, |V|]` from decoder states `[rows, d_hid]`.
    pub fn project(&self, tape: &mut Tape<'_, T>, states: Var) -> Result<Var, Seq2SeqError> {
        let b = tape.param(self.layout.out_b);
        let logits = match self.layout.out_w {
            Some(w) => {
                let w = tape.param(w);
                tape.matmul(states, w)?
            }
            None => {
                let rows = tape.shape(states)[0];
                let table = tape.param(self.layout.embedding);
                let t = tape.reshape(table, vec![1, self.vocab_size, self.config.d_tok])?;
                let s = tape.reshape(states, vec![1, rows, self.config.d_hid])?;
                let l = tape.batch_matmul(s, t, true)?;
                tape.reshape(l, vec![rows, self.vocab_size])?
            }
        };
        Ok(tape.add(logits, b)?)
    }

    /// Teacher-forced logits `[batch * tgt_len, |V|]` for a padded batch.
    pub fn batch_logits(&self, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var, Seq2SeqError> {
        let sources: Vec<&[TokenId]> = batch.sources.iter().map(Vec::as_slice).collect();
        let memory = self.encode(tape, &sources)?;
        let rows: Vec<usize> = (0..batch.len()).collect();
        let prefixes: Vec<&[TokenId]> = batch.decoder_inputs.iter().map(Vec::as_slice).collect();
        let states = self.decode_states(tape, &memory, &rows, &prefixes)?;
        self.project(tape, states)
    }

    /// Mean cross-entropy over non-pad target positions.
    pub fn batch_loss(&self, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var, Seq2SeqError> {
        let logits = self.batch_logits(tape, batch)?;
        Ok(tape.softmax_cross_entropy(logits, &batch.flat_targets(), Some(PAD))?)
    }

    /// Loss of a single (source, target) pair, without gradients.
    pub fn forward_teacher_forced(&self, source: &TokenSequence, target: &TokenSequence) -> Result<f64, Seq2SeqError> {
        let batch = Batch::from_pairs(&[(source, target)], self.config.max_len)?;
        let mut tape = Tape::inference(&self.params);
        let loss = self.batch_loss(&mut tape, &batch)?;
        Ok(tape.item(loss).as_f64())
    }

    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint<T> {
        Checkpoint::from_store(&self.params, json!({ "kind": "seq2seq", "model": self.config, "vocab": vocab }))
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), Seq2SeqError> {
        Ok(self.checkpoint(vocab).save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, Vocabulary), Seq2SeqError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("seq2seq") {
            return Err(Seq2SeqError::Checkpoint("not a seq2seq checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Seq2SeqError::Checkpoint(format!("model config: {e}")))?;
        let vocab: Vocabulary =
            serde_json::from_value(ck.meta["vocab"].clone()).map_err(|e| Seq2SeqError::Checkpoint(format!("vocab: {e}")))?;
        let mut model = Self::new(config, vocab.len(), 0)?;
        ck.load_into(&mut model.params)?;
        Ok((model, vocab))
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary), Seq2SeqError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn sinusoid_table<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out.push(T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}
