//! Transformer encoder with learned positions, MLM head, replaced-token
//! detection generator/discriminator and contrastive sentence objective.

use candle_core::{Tensor, D};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ops, LayerNorm, Linear, Mode, ParamStore, TransformerLayer};
use crate::prompting::{UnitKind, WrappedSequence};
use crate::tokenizer::{MaskPlan, Replacement, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_generator_layers")]
    pub generator_layers: usize,
}

fn default_generator_layers() -> usize {
    2
}

impl EncoderConfig {
    /// Desk-scale defaults.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 128,
            ffn_dim: 512,
            vocab_size,
            max_len: 128,
            dropout_rate: 0.1,
            generator_layers: 2,
        }
    }

    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size,
            max_len: 512,
            dropout_rate: 0.1,
            generator_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size == 0 || self.max_len < 2 || self.num_layers == 0 {
            return Err(Error::Config(
                "vocab_size, max_len and num_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A numeric anchor inside a batch, in batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSlot {
    pub row: usize,
    pub pos: usize,
    pub tag: String,
    pub value: f64,
}

/// Padded id matrix plus per-position bookkeeping.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    /// True at text-token positions, the only ones scored by RTD.
    pub text_positions: Vec<Vec<bool>>,
    pub anchors: Vec<AnchorSlot>,
    pad_id: u32,
}

fn truncate<T: Clone>(items: &[T], max_len: usize) -> Vec<T> {
    if items.len() <= max_len {
        return items.to_vec();
    }
    let mut out = items[..max_len - 1].to_vec();
    out.push(items[items.len() - 1].clone());
    out
}

impl TokenBatch {
    /// Sequences longer than `max_len` keep their first `max_len - 1` units
    /// and their final `[SEP]`.
    pub fn from_sequences(seqs: &[WrappedSequence], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return invalid("empty batch");
        }
        let mut rows = Vec::with_capacity(seqs.len());
        let mut text = Vec::with_capacity(seqs.len());
        let mut anchors = Vec::new();
        for (row, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return invalid("empty sequence");
            }
            if s.len() > max_len {
                log::warn!(
                    "sequence {:?} of length {} truncated to {max_len}",
                    s.source_id,
                    s.len()
                );
            }
            let units = truncate(&s.units, max_len);
            rows.push(units.iter().map(|u| vocab.id(&u.surface)).collect::<Vec<_>>());
            text.push(units.iter().map(|u| u.kind == UnitKind::TextToken).collect::<Vec<_>>());
            for (pos, u) in units.iter().enumerate() {
                if let Some(slot) = &u.numeric {
                    anchors.push(AnchorSlot {
                        row,
                        pos,
                        tag: slot.tag.clone(),
                        value: slot.value,
                    });
                }
            }
        }
        Ok(Self::assemble(rows, text, anchors, vocab.pad_id()))
    }

    /// Raw id rows with no anchors; every position except the first and last
    /// counts as text.
    pub fn from_ids(rows: &[Vec<u32>], pad_id: u32, max_len: usize) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return invalid("empty batch or row");
        }
        let rows: Vec<Vec<u32>> = rows.iter().map(|r| truncate(r, max_len)).collect();
        let text = rows
            .iter()
            .map(|r| (0..r.len()).map(|i| i > 0 && i + 1 < r.len()).collect())
            .collect();
        Ok(Self::assemble(rows, text, Vec::new(), pad_id))
    }

    fn assemble(rows: Vec<Vec<u32>>, text: Vec<Vec<bool>>, anchors: Vec<AnchorSlot>, pad_id: u32) -> Self {
        let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
        let seq_len = lengths.iter().copied().max().unwrap_or(0);
        let ids = rows
            .into_iter()
            .map(|mut r| {
                r.resize(seq_len, pad_id);
                r
            })
            .collect();
        let text_positions = text
            .into_iter()
            .map(|mut t| {
                t.resize(seq_len, false);
                t
            })
            .collect();
        Self {
            ids,
            lengths,
            seq_len,
            text_positions,
            anchors,
            pad_id,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn flat_index(&self, row: usize, pos: usize) -> usize {
        row * self.seq_len + pos
    }

    /// Same layout with different ids at real positions.
    pub fn with_ids(&self, ids: Vec<Vec<u32>>) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return invalid("row count mismatch");
        }
        let mut out = self.clone();
        for (r, row) in ids.into_iter().enumerate() {
            if row.len() < self.lengths[r] {
                return invalid("replacement row shorter than original");
            }
            let n = self.lengths[r];
            out.ids[r][..n].copy_from_slice(&row[..n]);
        }
        Ok(out)
    }

    /// Applies one mask plan per row; plan positions past truncation are dropped.
    pub fn masked(&self, plans: &[MaskPlan], mask_id: u32) -> Result<(Self, Vec<(usize, u32)>)> {
        if plans.len() != self.ids.len() {
            return invalid("one mask plan per row required");
        }
        let mut out = self.clone();
        let mut targets = Vec::new();
        for (r, plan) in plans.iter().enumerate() {
            // The final kept position holds [SEP], never a plan position.
            let len = self.lengths[r].saturating_sub(1);
            for (&p, rep) in plan.replacement.iter().filter(|(&p, _)| p < len) {
                match rep {
                    Replacement::Mask => out.ids[r][p] = mask_id,
                    Replacement::Random(id) => out.ids[r][p] = *id,
                    Replacement::Keep => {}
                }
            }
            for (&p, &t) in plan.targets.iter().filter(|(&p, _)| p < len) {
                targets.push((self.flat_index(r, p), t));
            }
        }
        Ok((out, targets))
    }

    fn flat_ids(&self) -> Vec<u32> {
        self.ids.iter().flatten().copied().collect()
    }

    fn valid_mask(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .lengths
            .iter()
            .flat_map(|&l| (0..self.seq_len).map(move |p| if p < l { 1.0 } else { 0.0 }))
            .collect();
        ops::mat(&data, self.ids.len(), self.seq_len)
    }

    fn is_pad(&self, row: usize, pos: usize) -> bool {
        pos >= self.lengths[row] && self.ids[row][pos] == self.pad_id
    }
}

/// Encoder result. `hidden` is `[B, T, d]`; `pooled` is the `[CLS]` row of each sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub pooled: Tensor,
    pub lengths: Vec<usize>,
}

impl EncoderOutput {
    /// Hidden states of one row restricted to its real length, `[n, d]`.
    pub fn row(&self, row: usize) -> Result<Tensor> {
        Ok(self.hidden.get(row)?.narrow(0, 0, self.lengths[row])?)
    }

    /// Flattened `[B*T, d]` hidden states.
    pub fn flat(&self) -> Result<Tensor> {
        let (b, t, d) = self.hidden.dims3()?;
        Ok(self.hidden.reshape((b * t, d))?)
    }
}

#[derive(Clone, Debug)]
pub struct Embeddings {
    pub word: Tensor,
    pub position: Tensor,
    pub ln: LayerNorm,
}

impl Embeddings {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            word: ps.normal(&format!("{name}.word"), &[cfg.vocab_size, cfg.hidden_dim], 0.02)?,
            position: ps.normal(&format!("{name}.position"), &[cfg.max_len, cfg.hidden_dim], 0.02)?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), cfg.hidden_dim)?,
        })
    }

    /// Mean of the word embeddings of `ids`, `[d]`.
    pub fn pooled_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return invalid("cannot pool zero tokens");
        }
        Ok(self.word.index_select(&ops::ids(ids)?, 0)?.mean(0)?)
    }
}

/// Stack of transformer layers over shared embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embeddings: Embeddings,
    layers: Vec<TransformerLayer>,
    dropout: f64,
    max_len: usize,
}

impl Encoder {
    fn with_layers(
        ps: &mut ParamStore,
        name: &str,
        embeddings: Embeddings,
        cfg: &EncoderConfig,
        num_layers: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| {
                TransformerLayer::new(
                    ps,
                    &format!("{name}.layer{i}"),
                    cfg.hidden_dim,
                    cfg.num_heads,
                    cfg.ffn_dim,
                    cfg.dropout_rate,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings,
            layers,
            dropout: cfg.dropout_rate,
            max_len: cfg.max_len,
        })
    }

    pub fn hidden_dim(&self) -> Result<usize> {
        Ok(self.embeddings.word.dim(1)?)
    }

    /// Forward pass. `anchor_vectors` is `[K, d]` in `batch.anchors` order and
    /// replaces the token embedding at each anchor; `None` keeps the `[NUM]`
    /// token embedding there.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        anchor_vectors: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        let (b, t) = (batch.batch_size(), batch.seq_len);
        if t > self.max_len {
            return invalid(format!("batch length {t} exceeds max_len {}", self.max_len));
        }
        let d = self.hidden_dim()?;
        let mut emb = self.embeddings.word.index_select(&ops::ids(&batch.flat_ids())?, 0)?;
        if let Some(anchor) = anchor_vectors {
            let k = batch.anchors.len();
            if anchor.dims() != [k, d] {
                return invalid(format!(
                    "anchor vectors {:?} but batch has {k} anchors of dim {d}",
                    anchor.dims()
                ));
            }
            if k > 0 {
                let mut select = vec![0.0; b * t * k];
                let mut keep = vec![1.0; b * t];
                for (j, a) in batch.anchors.iter().enumerate() {
                    let f = batch.flat_index(a.row, a.pos);
                    select[f * k + j] = 1.0;
                    keep[f] = 0.0;
                }
                let select = ops::mat(&select, b * t, k)?;
                let keep = ops::mat(&keep, b * t, 1)?;
                emb = (emb.broadcast_mul(&keep)? + select.matmul(anchor)?)?;
            }
        }
        let pos = self.embeddings.position.narrow(0, 0, t)?;
        let x = emb.reshape((b, t, d))?.broadcast_add(&pos)?;
        let x = self.embeddings.ln.forward(&x)?;
        let mut x = mode.dropout(&x, self.dropout)?;
        let bias = crate::nn::layers::key_bias_from_mask(&batch.valid_mask()?)?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias, mode)?;
        }
        let pooled = x.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        Ok(EncoderOutput {
            hidden: x,
            pooled,
            lengths: batch.lengths.clone(),
        })
    }
}

/// Dense + GELU + norm transform followed by a decoder tied to the word embeddings.
#[derive(Clone, Debug)]
pub struct MlmHead {
    dense: Linear,
    ln: LayerNorm,
    bias: Tensor,
    decoder: Tensor,
}

impl MlmHead {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, word: &Tensor) -> Result<Self> {
        Ok(Self {
            dense: Linear::new(ps, &format!("{name}.dense"), cfg.hidden_dim, cfg.hidden_dim, true)?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), cfg.hidden_dim)?,
            bias: ps.zeros(&format!("{name}.bias"), &[cfg.vocab_size])?,
            decoder: word.clone(),
        })
    }

    /// Vocabulary logits for `[n, d]` hidden rows.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(&ops::gelu(&self.dense.forward(hidden)?)?)?;
        Ok(h.matmul(&self.decoder.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Logits at the flat positions of `targets` together with the target ids.
    pub fn masked_logits(
        &self,
        output: &EncoderOutput,
        targets: &[(usize, u32)],
    ) -> Result<Option<(Tensor, Vec<u32>)>> {
        if targets.is_empty() {
            return Ok(None);
        }
        let idx: Vec<u32> = targets.iter().map(|&(f, _)| f as u32).collect();
        let rows = output.flat()?.index_select(&ops::ids(&idx)?, 0)?;
        Ok(Some((self.logits(&rows)?, targets.iter().map(|&(_, t)| t).collect())))
    }
}

/// Mean cross-entropy of the MLM head over the plan's targets; 0 when empty.
/// `targets` pairs flat batch positions with original ids.
pub fn mlm_loss(head: &MlmHead, output: &EncoderOutput, targets: &[(usize, u32)]) -> Result<Tensor> {
    match head.masked_logits(output, targets)? {
        None => ops::scalar(0.0),
        Some((logits, ids)) => ops::cross_entropy(&logits, &ids),
    }
}

/// Mean binary cross-entropy over the scored positions; 0 when none are scored.
pub fn rtd_loss(logits: &Tensor, labels: &[f64], scored: &[bool]) -> Result<Tensor> {
    let n = logits.elem_count();
    if labels.len() != n || scored.len() != n {
        return invalid("rtd logits, labels and mask must have equal length");
    }
    let count = scored.iter().filter(|&&s| s).count();
    if count == 0 {
        return ops::scalar(0.0);
    }
    let weight: Vec<f64> = scored.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let per = ops::bce_with_logits_elementwise(&logits.flatten_all()?, &ops::vec1(labels)?)?;
    Ok((per * ops::vec1(&weight)?)?
        .sum_all()?
        .affine(1.0 / count as f64, 0.0)?)
}

/// InfoNCE over in-batch pairs with cosine similarity; the denominator
/// includes the positive.
pub fn simcse_loss(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    let (n, _) = a.dims2()?;
    if n < 2 {
        return invalid("contrastive loss needs at least two rows");
    }
    if tau <= 0.0 {
        return invalid("temperature must be positive");
    }
    if a.dims() != b.dims() {
        return invalid("pooled batches differ in shape");
    }
    let sim = ops::l2_normalize_rows(a)?.matmul(&ops::l2_normalize_rows(b)?.t()?)?;
    let targets: Vec<u32> = (0..n as u32).collect();
    ops::cross_entropy(&(sim / tau)?, &targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneWeights {
    pub mlm: f64,
    pub rtd: f64,
    pub simcse: f64,
    pub tau: f64,
}

impl Default for StageOneWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            rtd: 1.0,
            simcse: 1.0,
            tau: 0.05,
        }
    }
}

/// Individual stage-one losses and their weighted total.
#[derive(Clone, Debug)]
pub struct StageOneLosses {
    pub mlm: Tensor,
    pub rtd: Tensor,
    pub simcse: Tensor,
    pub total: Tensor,
}

/// Discriminator encoder, its MLM head, a small generator sharing the
/// embeddings and the replaced-token detection head.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub encoder: Encoder,
    pub mlm: MlmHead,
    pub generator: Encoder,
    pub generator_mlm: MlmHead,
    pub rtd: Linear,
}

impl Backbone {
    /// Parameters are registered under `backbone.`, `mlm.`, `generator.` and `rtd.`.
    pub fn new(ps: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::new(ps, "backbone.embeddings", &config)?;
        let encoder = Encoder::with_layers(ps, "backbone", embeddings.clone(), &config, config.num_layers)?;
        let mlm = MlmHead::new(ps, "mlm", &config, &embeddings.word)?;
        let generator = Encoder::with_layers(ps, "generator", embeddings.clone(), &config, config.generator_layers)?;
        let generator_mlm = MlmHead::new(ps, "generator.mlm", &config, &embeddings.word)?;
        let rtd = Linear::new(ps, "rtd", config.hidden_dim, 1, true)?;
        Ok(Self {
            config,
            encoder,
            mlm,
            generator,
            generator_mlm,
            rtd,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn forward(
        &self,
        batch: &TokenBatch,
        anchor_vectors: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        self.encoder.forward(batch, anchor_vectors, mode)
    }

    /// Single-sequence evaluation-mode encoding.
    pub fn encode(
        &self,
        seq: &WrappedSequence,
        vocab: &Vocabulary,
        anchor_vectors: Option<&Tensor>,
    ) -> Result<EncoderOutput> {
        let batch = TokenBatch::from_sequences(std::slice::from_ref(seq), vocab, self.config.max_len)?;
        self.forward(&batch, anchor_vectors, &mut Mode::Eval)
    }

    /// Generator MLM, replaced-token detection and SimCSE on one batch.
    /// Generator samples are drawn from the detached generator distribution.
    pub fn stage_one_losses(
        &self,
        batch: &TokenBatch,
        plans: &[MaskPlan],
        mask_id: u32,
        weights: &StageOneWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageOneLosses> {
        let (masked, targets) = batch.masked(plans, mask_id)?;
        let gen_out = self.generator.forward(&masked, None, &mut Mode::Train(rng))?;
        let mut corrupted = batch.ids.clone();
        let mlm = match self.generator_mlm.masked_logits(&gen_out, &targets)? {
            None => ops::scalar(0.0)?,
            Some((logits, ids)) => {
                let probs = ops::to_rows(&ops::softmax_last(&logits.detach())?)?;
                for (&(flat, _), p) in targets.iter().zip(&probs) {
                    let sampled = WeightedIndex::new(p)
                        .map_err(|e| Error::InvalidArgument(format!("generator distribution: {e}")))?
                        .sample(rng) as u32;
                    corrupted[flat / batch.seq_len][flat % batch.seq_len] = sampled;
                }
                ops::cross_entropy(&logits, &ids)?
            }
        };
        let mut labels = Vec::with_capacity(batch.batch_size() * batch.seq_len);
        let mut scored = Vec::with_capacity(labels.capacity());
        for (r, (seen, original)) in corrupted.iter().zip(&batch.ids).enumerate() {
            for (p, (a, b)) in seen.iter().zip(original).enumerate() {
                labels.push(if a != b { 1.0 } else { 0.0 });
                scored.push(batch.text_positions[r][p] && !batch.is_pad(r, p));
            }
        }
        let disc_batch = batch.with_ids(corrupted)?;
        let disc = self.encoder.forward(&disc_batch, None, &mut Mode::Train(rng))?;
        let logits = self.rtd.forward(&disc.flat()?)?.squeeze(D::Minus1)?;
        let rtd = rtd_loss(&logits, &labels, &scored)?;
        let a = self.encoder.forward(batch, None, &mut Mode::Train(rng))?.pooled;
        let b = self.encoder.forward(batch, None, &mut Mode::Train(rng))?.pooled;
        let simcse = if batch.batch_size() >= 2 {
            simcse_loss(&a, &b, weights.tau)?
        } else {
            ops::scalar(0.0)?
        };
        let total =
            ((mlm.affine(weights.mlm, 0.0)? + rtd.affine(weights.rtd, 0.0)?)? + simcse.affine(weights.simcse, 0.0)?)?;
        Ok(StageOneLosses {
            mlm,
            rtd,
            simcse,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpecialTokenSet;
    use crate::nn::gradcheck::check_gradients;
    use crate::prompting::SequenceUnit;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn tiny_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: vocab,
            max_len: 12,
            dropout_rate: 0.1,
            generator_layers: 1,
        }
    }

    fn vocab() -> Vocabulary {
        let specials = SpecialTokenSet::new(BTreeSet::new(), &Default::default()).unwrap();
        Vocabulary::build(["alarm", "link", "down", "cpu", "high", "port"], &specials).unwrap()
    }

    fn seq(words: &[&str]) -> WrappedSequence {
        let mut units = vec![SequenceUnit {
            kind: UnitKind::Cls,
            surface: "[CLS]".into(),
            numeric: None,
        }];
        units.push(SequenceUnit::prompt("[DOC]"));
        units.extend(words.iter().map(|w| SequenceUnit::text(w)));
        units.push(SequenceUnit {
            kind: UnitKind::Sep,
            surface: "[SEP]".into(),
            numeric: None,
        });
        WrappedSequence {
            units,
            source_id: String::new(),
            source_modality: String::new(),
            unseen_tags: vec![],
        }
    }

    fn setup() -> (ParamStore, Backbone, Vocabulary) {
        let v = vocab();
        let mut ps = ParamStore::new(3);
        let bb = Backbone::new(&mut ps, tiny_config(v.len())).unwrap();
        (ps, bb, v)
    }

    #[test]
    fn shape_and_determinism() {
        let (_, bb, v) = setup();
        let s = seq(&["alarm", "link", "down"]);
        let a = bb.encode(&s, &v, None).unwrap();
        let b = bb.encode(&s, &v, None).unwrap();
        assert_eq!(a.row(0).unwrap().dims(), &[6, 8]);
        assert_eq!(
            ops::to_rows(&a.row(0).unwrap()).unwrap(),
            ops::to_rows(&b.row(0).unwrap()).unwrap()
        );
        assert_eq!(
            ops::to_f64_vec(&a.pooled.get(0).unwrap()).unwrap(),
            ops::to_f64_vec(&a.row(0).unwrap().get(0).unwrap()).unwrap()
        );
    }

    #[test]
    fn padding_does_not_change_rows() {
        let (_, bb, v) = setup();
        let short = seq(&["cpu"]);
        let long = seq(&["alarm", "link", "down", "port"]);
        let alone = bb.encode(&short, &v, None).unwrap().row(0).unwrap();
        let batch = TokenBatch::from_sequences(&[short, long], &v, 12).unwrap();
        let both = bb.forward(&batch, None, &mut Mode::Eval).unwrap().row(0).unwrap();
        let d = (alone - both)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn numeric_free_sequence_ignores_anchor_mode() {
        let (_, bb, v) = setup();
        let s = seq(&["cpu", "high"]);
        let plain = bb.encode(&s, &v, None).unwrap();
        let empty = Tensor::zeros((0, 8), candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
        let with = bb.encode(&s, &v, Some(&empty)).unwrap();
        assert_eq!(
            ops::to_f64_vec(&plain.pooled).unwrap(),
            ops::to_f64_vec(&with.pooled).unwrap()
        );
    }

    #[test]
    fn anchor_vectors_replace_num_embedding() {
        let (_, bb, v) = setup();
        let mut s = seq(&["cpu"]);
        s.units.insert(3, SequenceUnit::anchor("cpu", 0.3));
        let batch = TokenBatch::from_sequences(std::slice::from_ref(&s), &v, 12).unwrap();
        assert_eq!(batch.anchors.len(), 1);
        assert_eq!(batch.anchors[0].pos, 3);
        let a = Tensor::ones((1, 8), candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
        let x = bb.forward(&batch, Some(&a), &mut Mode::Eval).unwrap();
        let y = bb.forward(&batch, None, &mut Mode::Eval).unwrap();
        assert_ne!(ops::to_f64_vec(&x.pooled).unwrap(), ops::to_f64_vec(&y.pooled).unwrap());
    }

    #[test]
    fn truncation_keeps_sep() {
        let v = vocab();
        let words = vec!["alarm"; 20];
        let batch = TokenBatch::from_sequences(&[seq(&words)], &v, 12).unwrap();
        assert_eq!(batch.lengths[0], 12);
        assert_eq!(batch.ids[0][11], v.sep_id());
    }

    fn brute_ce(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[t as usize].exp() / z).ln();
        }
        total / targets.len() as f64
    }

    #[test]
    fn mlm_loss_matches_oracle_and_empty_plan_is_zero() {
        let (_, bb, v) = setup();
        let batch = TokenBatch::from_sequences(&[seq(&["alarm", "link", "down"])], &v, 12).unwrap();
        let out = bb.forward(&batch, None, &mut Mode::Eval).unwrap();
        assert_eq!(ops::to_scalar(&mlm_loss(&bb.mlm, &out, &[]).unwrap()).unwrap(), 0.0);
        let targets = vec![(2usize, v.id("alarm")), (4usize, v.id("down"))];
        let loss = ops::to_scalar(&mlm_loss(&bb.mlm, &out, &targets).unwrap()).unwrap();
        let (logits, ids) = bb.mlm.masked_logits(&out, &targets).unwrap().unwrap();
        let oracle = brute_ce(&ops::to_rows(&logits).unwrap(), &ids);
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros((3, 7), candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
        let l = ops::to_scalar(&ops::cross_entropy(&logits, &[0, 3, 6]).unwrap()).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rtd_identities() {
        let z = ops::vec1(&[0.0, 0.0, 0.0]).unwrap();
        let l = ops::to_scalar(&rtd_loss(&z, &[1.0, 0.0, 1.0], &[true, true, false]).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let big = ops::vec1(&[50.0, -50.0]).unwrap();
        let l = ops::to_scalar(&rtd_loss(&big, &[1.0, 0.0], &[true, true]).unwrap()).unwrap();
        assert!(l < 1e-20);
        let x = [0.3, -1.2, 2.0, 0.1];
        let y = [1.0, 0.0, 0.0, 1.0];
        let m = [true, false, true, true];
        let l = ops::to_scalar(&rtd_loss(&ops::vec1(&x).unwrap(), &y, &m).unwrap()).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut oracle = 0.0;
        for i in [0, 2, 3] {
            oracle += -(y[i] * sig(x[i]).ln() + (1.0 - y[i]) * (1.0 - sig(x[i])).ln());
        }
        assert!((l - oracle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn simcse_closed_forms() {
        let tau = 0.05;
        let a = ops::mat(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let l = ops::to_scalar(&simcse_loss(&a, &a, tau).unwrap()).unwrap();
        let e = (1.0f64 / tau).exp();
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-9);
        let same = ops::mat(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2).unwrap();
        let l = ops::to_scalar(&simcse_loss(&same, &same, tau).unwrap()).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
        assert!(simcse_loss(
            &ops::mat(&[1.0, 0.0], 1, 2).unwrap(),
            &ops::mat(&[1.0, 0.0], 1, 2).unwrap(),
            tau
        )
        .is_err());
    }

    #[test]
    fn simcse_rotation_invariant() {
        let a = ops::mat(&[0.3, 0.9, -0.5, 0.2, 1.0, 1.0], 3, 2).unwrap();
        let b = ops::mat(&[0.1, 0.8, -0.7, 0.4, 0.9, 1.2], 3, 2).unwrap();
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let rot = ops::mat(&[c, s, -s, c], 2, 2).unwrap();
        let l0 = ops::to_scalar(&simcse_loss(&a, &b, 0.05).unwrap()).unwrap();
        let l1 =
            ops::to_scalar(&simcse_loss(&a.matmul(&rot).unwrap(), &b.matmul(&rot).unwrap(), 0.05).unwrap()).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
        assert!(l0 >= 0.0);
    }

    #[test]
    fn mlm_gradients() {
        let (ps, bb, v) = setup();
        let batch =
            TokenBatch::from_sequences(&[seq(&["alarm", "link"]), seq(&["cpu", "high", "port"])], &v, 12).unwrap();
        let targets = vec![(2usize, v.id("alarm")), (batch.flat_index(1, 3), v.id("high"))];
        let report = check_gradients(
            &ps.named_vars(),
            || {
                let out = bb.forward(&batch, None, &mut Mode::Eval)?;
                mlm_loss(&bb.mlm, &out, &targets)
            },
            16,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report.checks);
    }

    #[test]
    fn stage_one_runs_and_is_seeded() {
        let (_, bb, v) = setup();
        let seqs = [seq(&["alarm", "link", "down"]), seq(&["cpu", "high", "port"])];
        let batch = TokenBatch::from_sequences(&seqs, &v, 12).unwrap();
        let plans: Vec<MaskPlan> = seqs
            .iter()
            .zip(0u64..)
            .map(|(s, i)| {
                let ids = v.encode_units(s);
                let groups: Vec<Vec<usize>> = crate::prompting::maskable_positions(s)
                    .into_iter()
                    .map(|p| vec![p])
                    .collect();
                crate::tokenizer::build_mask_plan(s, &ids, &groups, 0.4, crate::tokenizer::MaskStrategy::Dynamic, i, &v)
                    .unwrap()
            })
            .collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = bb
                .stage_one_losses(&batch, &plans, v.mask_id(), &StageOneWeights::default(), &mut rng)
                .unwrap();
            (
                ops::to_scalar(&l.total).unwrap(),
                ops::to_scalar(&l.mlm).unwrap() + ops::to_scalar(&l.rtd).unwrap() + ops::to_scalar(&l.simcse).unwrap(),
            )
        };
        let (a, sum) = run(1);
        assert!((a - sum).abs() < 1e-12);
        assert_eq!(a, run(1).0);
        assert!(a.is_finite());
    }
}
