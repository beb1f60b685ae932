//! Conditional clause generation with a small transformer decoder.
//!
//! The condition is one vector (the mean of the contract and target-type
//! representations). It is projected to the model width and used as a
//! length-1 memory that every layer cross-attends to. Layers are pre-norm:
//! causal self-attention, cross-attention and a feed-forward block, each in
//! a residual branch.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ClauseTypeRep, ContractRep, Embedding};
use crate::error::{Error, Result};
use crate::nn::{Adam, Embedding as EmbeddingLayer, FeedForward, LayerNorm, Linear, ModelArtifact, MultiHeadAttention};
use crate::nn::{ParamStore, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

pub const DECODER_KIND: &str = "clause-decoder";

/// Token ↔ id bijection. Ids `0..4` are the specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.min_frequency)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            min_frequency: v.min_frequency,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_frequency` times, ordered by
    /// descending frequency then lexicographically.
    pub fn build<'a, I>(clauses: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tokens in clauses {
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_frequency && !SPECIALS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, min_frequency)
    }

    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Joins content tokens with single spaces; PAD, SOS and EOS are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != SOS && i != EOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The decoder's memory vector: elementwise mean of the two representations.
pub fn condition(rep_c: &ContractRep, rep_t: &ClauseTypeRep) -> Result<Embedding> {
    rep_c.0.midpoint(&rep_t.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; 0 means `4 * hidden`.
    pub ff_hidden: usize,
    pub dropout: f64,
    /// Maximum sequence length including SOS and EOS.
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub min_frequency: usize,
    pub decoding: Decoding,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden: 128,
            layers: 3,
            heads: 4,
            ff_hidden: 0,
            dropout: 0.1,
            max_len: 400,
            lr: 1e-5,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            min_frequency: 2,
            decoding: Decoding::Greedy,
        }
    }
}

impl GeneratorConfig {
    /// Longest clause (in tokens) that fits between SOS and EOS.
    pub fn content_capacity(&self) -> usize {
        self.max_len.saturating_sub(2)
    }

    pub fn arch(&self) -> DecoderArch {
        DecoderArch {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ff_hidden: if self.ff_hidden == 0 {
                4 * self.hidden
            } else {
                self.ff_hidden
            },
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    arch: DecoderArch,
    memory_dim: usize,
    vocab: Vocabulary,
    store: ParamStore,
    embed: EmbeddingLayer,
    memory_proj: Linear,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    out: Linear,
}

/// One training pair: condition vector and content token ids (no specials).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationExample {
    pub memory: Embedding,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub ids: Vec<usize>,
    pub text: String,
    /// Decoding stopped at the length bound rather than at EOS.
    pub truncated: bool,
}

/// Sinusoidal position code for positions `0..len`, `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            pe[pos * dim + i] = angle.sin();
            if i + 1 < dim {
                pe[pos * dim + i + 1] = angle.cos();
            }
        }
    }
    pe
}

struct Batch {
    memory: Tensor,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    active: Vec<bool>,
    size: usize,
}

impl DecoderModel {
    pub fn new(arch: DecoderArch, memory_dim: usize, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.hidden == 0 || arch.heads == 0 || !arch.hidden.is_multiple_of(arch.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                arch.hidden, arch.heads
            )));
        }
        let h = arch.hidden;
        let v = vocab.len();
        let mut store = ParamStore::new();
        let embed = EmbeddingLayer::new(&mut store, "embed", v, h, 0.02, rng);
        let memory_proj = Linear::new(&mut store, "memory_proj", memory_dim, h, rng);
        let layers = (0..arch.layers)
            .map(|i| DecoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("layer{i}.ln_self"), h),
                self_attn: MultiHeadAttention::new(&mut store, &format!("layer{i}.self_attn"), h, arch.heads, rng),
                ln_cross: LayerNorm::new(&mut store, &format!("layer{i}.ln_cross"), h),
                cross_attn: MultiHeadAttention::new(&mut store, &format!("layer{i}.cross_attn"), h, arch.heads, rng),
                ln_ff: LayerNorm::new(&mut store, &format!("layer{i}.ln_ff"), h),
                ff: FeedForward::new(&mut store, &format!("layer{i}.ff"), h, arch.ff_hidden, rng),
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "ln_out", h);
        let out = Linear::zeroed(&mut store, "out", h, v);
        // small output weights keep the initial next-token distribution near uniform
        let normal = Normal::new(0.0, 0.02).expect("finite std");
        store
            .get_mut(out.weight)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = normal.sample(rng));
        Ok(DecoderModel {
            arch,
            memory_dim,
            vocab,
            store,
            embed,
            memory_proj,
            layers,
            ln_out,
            out,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.arch
    }

    pub fn memory_dim(&self) -> usize {
        self.memory_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `[batch * len, vocab]` for `inputs` laid out as `batch` rows of
    /// `len` ids, conditioned on `memory` `[batch, memory_dim]`.
    pub fn forward(&self, tape: &mut Tape, memory: Var, inputs: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || !inputs.len().is_multiple_of(batch) {
            return Err(Error::ShapeMismatch {
                op: "decoder",
                left: vec![inputs.len()],
                right: vec![batch],
            });
        }
        let len = inputs.len() / batch;
        let h = self.arch.hidden;
        let p = self.arch.dropout;

        let tok = self.embed.forward(tape, inputs)?;
        let pe_one = positional_encoding(len, h);
        let pe = tape.constant(Tensor::new(vec![batch * len, h], pe_one.repeat(batch))?);
        let mut x = tape.add(tok, pe)?;
        x = tape.dropout(x, p);
        let mem = self.memory_proj.forward(tape, memory)?;

        for layer in &self.layers {
            let n = layer.ln_self.forward(tape, x)?;
            let a = layer.self_attn.forward(tape, n, n, batch, true)?;
            let a = tape.dropout(a, p);
            x = tape.add(x, a)?;

            let n = layer.ln_cross.forward(tape, x)?;
            let c = layer.cross_attn.forward(tape, n, mem, batch, false)?;
            let c = tape.dropout(c, p);
            x = tape.add(x, c)?;

            let n = layer.ln_ff.forward(tape, x)?;
            let f = layer.ff.forward(tape, n, p)?;
            let f = tape.dropout(f, p);
            x = tape.add(x, f)?;
        }
        let x = self.ln_out.forward(tape, x)?;
        self.out.forward(tape, x)
    }

    fn batch(&self, examples: &[&GenerationExample]) -> Result<Batch> {
        let size = examples.len();
        let len = examples.iter().map(|e| e.tokens.len() + 1).max().unwrap_or(1);
        let mut memory = Vec::with_capacity(size * self.memory_dim);
        let mut inputs = vec![PAD; size * len];
        let mut targets = vec![PAD; size * len];
        let mut active = vec![false; size * len];
        for (b, e) in examples.iter().enumerate() {
            if e.memory.dim() != self.memory_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.memory_dim,
                    actual: e.memory.dim(),
                });
            }
            if let Some(&bad) = e.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(Error::InvalidArgument(format!("token id {bad} outside the vocabulary")));
            }
            memory.extend_from_slice(e.memory.as_slice());
            let row = b * len;
            inputs[row] = SOS;
            for (i, &t) in e.tokens.iter().enumerate() {
                inputs[row + i + 1] = t;
                targets[row + i] = t;
                active[row + i] = true;
            }
            targets[row + e.tokens.len()] = EOS;
            active[row + e.tokens.len()] = true;
        }
        Ok(Batch {
            memory: Tensor::new(vec![size, self.memory_dim], memory)?,
            inputs,
            targets,
            active,
            size,
        })
    }

    /// Teacher-forced mean token cross-entropy over non-PAD targets.
    pub fn batch_loss(&self, tape: &mut Tape, examples: &[&GenerationExample]) -> Result<Var> {
        if examples.is_empty() {
            return Err(Error::Empty("generation batch"));
        }
        let b = self.batch(examples)?;
        let memory = tape.constant(b.memory);
        let logits = self.forward(tape, memory, &b.inputs, b.size)?;
        tape.cross_entropy(logits, &b.targets, &b.active)
    }

    /// Mean loss over `data` (evaluation mode), weighted by target count.
    pub fn loss(&self, data: &[GenerationExample], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in data.chunks(batch_size.max(1)) {
            let refs: Vec<&GenerationExample> = chunk.iter().collect();
            let n: usize = chunk.iter().map(|e| e.tokens.len() + 1).sum();
            let mut tape = Tape::eval(&self.store);
            let l = self.batch_loss(&mut tape, &refs)?;
            total += tape.scalar(l) * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::Empty("generation examples"));
        }
        Ok(total / count as f64)
    }

    /// Fraction of non-PAD target positions whose argmax prediction is correct
    /// under teacher forcing.
    pub fn teacher_forced_accuracy(&self, data: &[GenerationExample]) -> Result<f64> {
        let v = self.vocab.len();
        let (mut correct, mut total) = (0usize, 0usize);
        for chunk in data.chunks(32) {
            let refs: Vec<&GenerationExample> = chunk.iter().collect();
            let b = self.batch(&refs)?;
            let mut tape = Tape::eval(&self.store);
            let memory = tape.constant(b.memory);
            let logits = self.forward(&mut tape, memory, &b.inputs, b.size)?;
            let values = tape.value(logits);
            for (r, row) in values.chunks(v).enumerate().filter(|(r, _)| b.active[*r]) {
                total += 1;
                if argmax(row, &[]) == b.targets[r] {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Empty("generation examples"));
        }
        Ok(correct as f64 / total as f64)
    }

    /// Autoregressive decoding from SOS until EOS or the length bound.
    /// PAD and SOS are never emitted.
    pub fn generate(&self, memory: &Embedding, max_len: usize, decoding: &Decoding) -> Result<Generated> {
        if memory.dim() != self.memory_dim {
            return Err(Error::DimensionMismatch {
                expected: self.memory_dim,
                actual: memory.dim(),
            });
        }
        if max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        let mut rng = match decoding {
            Decoding::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            Decoding::Greedy => None,
        };
        let capacity = max_len - 2;
        let v = self.vocab.len();
        let mut seq = vec![SOS];
        let mut content = Vec::new();
        let mut truncated = true;
        while content.len() < capacity {
            let mut tape = Tape::eval(&self.store);
            let mem = tape.constant(Tensor::new(vec![1, self.memory_dim], memory.0.clone())?);
            let logits = self.forward(&mut tape, mem, &seq, 1)?;
            let values = tape.value(logits);
            let last = &values[(seq.len() - 1) * v..seq.len() * v];
            let next = match (decoding, rng.as_mut()) {
                (Decoding::TopK { k, .. }, Some(rng)) => sample_top_k(last, *k, rng),
                _ => argmax(last, &[PAD, SOS]),
            };
            if next == EOS {
                truncated = false;
                break;
            }
            content.push(next);
            seq.push(next);
        }
        Ok(Generated {
            text: self.vocab.decode(&content),
            ids: content,
            truncated,
        })
    }

    pub fn to_artifact(&self, encoder_fingerprint: &str, best_val_loss: f64) -> ModelArtifact<DecoderMeta> {
        ModelArtifact::new(
            DECODER_KIND,
            encoder_fingerprint,
            self.memory_dim,
            DecoderMeta {
                arch: self.arch.clone(),
                vocab: self.vocab.clone(),
                best_val_loss,
            },
            self.store.to_named(),
        )
    }

    pub fn from_artifact(art: &ModelArtifact<DecoderMeta>) -> Result<Self> {
        let mut model = DecoderModel::new(
            art.config.arch.clone(),
            art.input_dim,
            art.config.vocab.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        model.store.load_named(&art.params)?;
        Ok(model)
    }
}

/// Stored with decoder weights; the vocabulary travels inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub arch: DecoderArch,
    pub vocab: Vocabulary,
    pub best_val_loss: f64,
}

fn argmax(row: &[f64], banned: &[usize]) -> usize {
    let mut best = None;
    for (i, &x) in row.iter().enumerate() {
        if banned.contains(&i) {
            continue;
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map_or(EOS, |(i, _)| i)
}

fn sample_top_k(row: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut cands: Vec<(usize, f64)> = row
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| *i != PAD && *i != SOS)
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k.max(1));
    let max = cands[0].1;
    let weights: Vec<f64> = cands.iter().map(|(_, x)| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for ((i, _), w) in cands.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    cands[cands.len() - 1].0
}

/// Mini-batch Adam on the teacher-forced loss.
pub struct DecoderTrainer {
    adam: Adam,
    rng: ChaCha8Rng,
}

impl DecoderTrainer {
    pub fn new(lr: f64, seed: u64) -> Self {
        DecoderTrainer {
            adam: Adam::new(lr),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, model: &mut DecoderModel, batch: &[&GenerationExample]) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::train(&model.store, &mut self.rng);
            let l = model.batch_loss(&mut tape, batch)?;
            (tape.scalar(l), tape.backward(l)?)
        };
        model.store.accumulate(&grads);
        self.adam.step(&mut model.store);
        Ok(loss)
    }

    pub fn shuffle(&mut self, order: &mut [usize]) {
        order.shuffle(&mut self.rng);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training examples dropped for exceeding the content capacity.
    pub dropped_long: usize,
}

/// Trains a decoder with a constant learning rate and keeps the epoch with
/// the lowest validation loss. Examples longer than the content capacity are
/// dropped. Without validation data the last epoch is kept.
pub fn train_decoder(
    train: &[GenerationExample],
    validation: &[GenerationExample],
    vocab: Vocabulary,
    memory_dim: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(DecoderModel, GeneratorHistory)> {
    let cap = cfg.content_capacity();
    let fits = |e: &&GenerationExample| e.tokens.len() <= cap;
    let before = train.len();
    let train: Vec<GenerationExample> = train.iter().filter(fits).cloned().collect();
    let validation: Vec<GenerationExample> = validation.iter().filter(fits).cloned().collect();
    let dropped_long = before - train.len();
    if train.is_empty() {
        return Err(Error::Empty("generator training set"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DecoderModel::new(cfg.arch(), memory_dim, vocab, &mut init_rng)?;
    let mut trainer = DecoderTrainer::new(cfg.lr, seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = GeneratorHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        dropped_long,
    };
    let mut best = model.store.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        trainer.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&GenerationExample> = chunk.iter().map(|&i| &train[i]).collect();
            sum += trainer.step(&mut model, &batch)? * chunk.len() as f64;
        }
        history.train_loss.push(sum / train.len() as f64);
        let val = if validation.is_empty() {
            *history.train_loss.last().expect("pushed")
        } else {
            model.loss(&validation, cfg.batch_size)?
        };
        history.val_loss.push(val);
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch;
            best = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store = best;
    Ok((model, history))
}
