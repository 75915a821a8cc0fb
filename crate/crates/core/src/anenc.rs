//! Adaptive numeric encoder: tag-conditioned attention over meta embeddings,
//! a feed-forward sub-layer with a low-rank bypass, a numeric decoder, a tag
//! classifier and the numeric objectives.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{Embeddings, TokenBatch};
use crate::error::{invalid, Error, Result};
use crate::nn::{ops, Activation, LayerNorm, Linear, Mlp2, ParamStore};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcGrouping {
    /// Positives and negatives are drawn from the whole batch.
    #[default]
    Mixed,
    /// Only samples sharing the anchor's tag participate.
    PerTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnencConfig {
    pub num_meta: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub rank: usize,
    pub bypass_scale: f64,
    pub ortho_weight: f64,
    pub activation: Activation,
    pub nc_temperature: f64,
    #[serde(default)]
    pub nc_grouping: NcGrouping,
    /// Tags known to the classifier, in label order.
    #[serde(default)]
    pub known_tags: Vec<String>,
}

impl AnencConfig {
    pub fn new(hidden_dim: usize, known_tags: Vec<String>) -> Self {
        Self {
            num_meta: 8,
            num_layers: 3,
            hidden_dim,
            ffn_dim: 2 * hidden_dim,
            rank: 16.min(hidden_dim),
            bypass_scale: 1.0,
            ortho_weight: 1e-4,
            activation: Activation::Gelu,
            nc_temperature: 0.05,
            nc_grouping: NcGrouping::Mixed,
            known_tags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_meta == 0 || !self.hidden_dim.is_multiple_of(self.num_meta) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_meta {}",
                self.hidden_dim, self.num_meta
            )));
        }
        if self.rank == 0 || self.rank > self.hidden_dim {
            return Err(Error::Config(format!(
                "rank {} outside [1, {}]",
                self.rank, self.hidden_dim
            )));
        }
        if self.bypass_scale < 1.0 {
            return Err(Error::Config("bypass_scale must be at least 1".into()));
        }
        if self.ortho_weight < 0.0 || self.nc_temperature <= 0.0 || self.num_layers == 0 {
            return Err(Error::Config(
                "invalid penalty weight, temperature or layer count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AnencLayer {
    /// `[N, d/N]`
    pub meta: Tensor,
    /// `[d, d/N]`
    pub query: Tensor,
    /// N matrices of `[d, d]`.
    pub value: Vec<Tensor>,
    pub ffn: Mlp2,
    pub down: Tensor,
    pub up: Tensor,
    pub ln: LayerNorm,
}

impl AnencLayer {
    fn new(ps: &mut ParamStore, name: &str, cfg: &AnencConfig) -> Result<Self> {
        let (n, d) = (cfg.num_meta, cfg.hidden_dim);
        let dk = d / n;
        let value = (0..n)
            .map(|i| ps.near_identity(&format!("{name}.value{i}"), d, 0.01))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meta: ps.normal(&format!("{name}.meta"), &[n, dk], 1.0)?,
            query: ps.normal(&format!("{name}.query"), &[d, dk], (1.0 / d as f64).sqrt())?,
            value,
            ffn: Mlp2::new(ps, &format!("{name}.ffn"), d, cfg.ffn_dim, d, Activation::Gelu)?,
            down: ps.normal(&format!("{name}.down"), &[d, cfg.rank], (1.0 / d as f64).sqrt())?,
            up: ps.zeros(&format!("{name}.up"), &[cfg.rank, d])?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), d)?,
        })
    }

    /// Attention weights over the meta domains, `[B, N]`.
    pub fn attention(&self, t: &Tensor) -> Result<Tensor> {
        let dk = self.meta.dim(1)? as f64;
        let scores = (t.matmul(&self.query)?.matmul(&self.meta.t()?)? / dk.sqrt())?;
        ops::softmax_last(&scores)
    }

    /// Attention-weighted sum of the per-domain value projections of `x`.
    pub fn project(&self, x: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.attention(t)?;
        let (b, d) = x.dims2()?;
        let n = self.value.len();
        let v = x.matmul(&Tensor::cat(&self.value, 1)?)?.reshape((b, n, d))?;
        let h = v.broadcast_mul(&s.unsqueeze(2)?)?.sum(1)?;
        Ok((h, s))
    }

    pub fn forward(&self, x: &Tensor, t: &Tensor, bypass_scale: f64) -> Result<(Tensor, Tensor)> {
        let (projected, s) = self.project(x, t)?;
        let bypass = x.matmul(&self.down)?.matmul(&self.up)?.affine(bypass_scale, 0.0)?;
        let h = self.ln.forward(&(self.ffn.forward(&projected)? + bypass)?)?;
        Ok((h, s))
    }
}

/// Encoder output for a batch of numeric observations.
#[derive(Clone, Debug)]
pub struct AnencOutput {
    /// `[B, d]`
    pub h: Tensor,
    /// Per layer, `[B, N]`.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Anenc {
    pub config: AnencConfig,
    pub lift: Linear,
    pub layers: Vec<AnencLayer>,
    pub decoder: Mlp2,
    pub classifier: Option<Linear>,
    /// Log-variances of the three uncertainty weights.
    pub log_var: Tensor,
}

/// Individual numeric losses; `total` is the uncertainty-weighted
/// combination plus the orthogonal penalty.
#[derive(Clone, Debug)]
pub struct NumericLosses {
    pub reg: Tensor,
    pub cls: Tensor,
    pub nc: Tensor,
    pub ortho: Tensor,
    pub total: Tensor,
    pub skipped_tags: usize,
}

impl Anenc {
    /// Parameters are registered under `anenc.`.
    pub fn new(ps: &mut ParamStore, config: AnencConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let lift = Linear::with_std(ps, "anenc.lift", 1, d, true, 1.0)?;
        let layers = (0..config.num_layers)
            .map(|l| AnencLayer::new(ps, &format!("anenc.layer{l}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Mlp2::new(ps, "anenc.decoder", d, d, 1, config.activation)?;
        let classifier = if config.known_tags.is_empty() {
            None
        } else {
            Some(Linear::new(ps, "anenc.classifier", d, config.known_tags.len(), true)?)
        };
        let log_var = ps.zeros("anenc.log_var", &[3])?;
        Ok(Self {
            config,
            lift,
            layers,
            decoder,
            classifier,
            log_var,
        })
    }

    /// `values: [B]` in `[0, 1]`, `tags: [B, d]` pooled tag-name embeddings.
    pub fn forward(&self, values: &Tensor, tags: &Tensor) -> Result<AnencOutput> {
        let b = values.elem_count();
        let mut x = self
            .config
            .activation
            .apply(&self.lift.forward(&values.reshape((b, 1))?)?)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (h, s) = layer.forward(&x, tags, self.config.bypass_scale)?;
            attention.push(s);
            x = h;
        }
        Ok(AnencOutput { h: x, attention })
    }

    /// Pooled tag-name embedding per tag, `[B, d]`.
    pub fn tag_embeddings(tags: &[&str], embeddings: &Embeddings, vocab: &Vocabulary) -> Result<Tensor> {
        let rows = tags
            .iter()
            .map(|t| {
                let ids = vocab.encode_text(t);
                let ids = if ids.is_empty() { vec![vocab.unk_id()] } else { ids };
                embeddings.pooled_tokens(&ids)?.unsqueeze(0).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Encodes every anchor of `batch`, returning `[K, d]` in batch order.
    pub fn encode_anchors(
        &self,
        batch: &TokenBatch,
        embeddings: &Embeddings,
        vocab: &Vocabulary,
    ) -> Result<Option<AnencOutput>> {
        if batch.anchors.is_empty() {
            return Ok(None);
        }
        let values: Vec<f64> = batch.anchors.iter().map(|a| a.value).collect();
        let tags: Vec<&str> = batch.anchors.iter().map(|a| a.tag.as_str()).collect();
        let t = Self::tag_embeddings(&tags, embeddings, vocab)?;
        Ok(Some(self.forward(&ops::vec1(&values)?, &t)?))
    }

    /// Scalar prediction per row of `[B, d]`, returning `[B]`.
    pub fn decode(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(self.decoder.forward(hidden)?.squeeze(D::Minus1)?)
    }

    pub fn tag_label(&self, tag: &str) -> Option<u32> {
        self.config.known_tags.iter().position(|t| t == tag).map(|i| i as u32)
    }

    /// Classifier loss over rows with known tags; returns the loss and the
    /// number of skipped rows.
    pub fn loss_cls(&self, h: &Tensor, tags: &[&str]) -> Result<(Tensor, usize)> {
        let Some(classifier) = &self.classifier else {
            return Ok((ops::scalar(0.0)?, tags.len()));
        };
        let labelled: Vec<(u32, u32)> = tags
            .iter()
            .enumerate()
            .filter_map(|(i, t)| self.tag_label(t).map(|y| (i as u32, y)))
            .collect();
        let skipped = tags.len() - labelled.len();
        if labelled.is_empty() {
            return Ok((ops::scalar(0.0)?, skipped));
        }
        let rows: Vec<u32> = labelled.iter().map(|&(i, _)| i).collect();
        let labels: Vec<u32> = labelled.iter().map(|&(_, y)| y).collect();
        let logits = classifier.forward(&h.index_select(&ops::ids(&rows)?, 0)?)?;
        Ok((ops::cross_entropy(&logits, &labels)?, skipped))
    }

    pub fn value_matrices(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.value.iter().cloned()).collect()
    }

    /// All numeric objectives for one batch. `h` is the encoder output,
    /// `decoded` the decoder predictions for the same rows.
    pub fn numeric_losses(&self, h: &Tensor, decoded: &Tensor, values: &[f64], tags: &[&str]) -> Result<NumericLosses> {
        let reg = loss_reg(decoded, &ops::vec1(values)?)?;
        let (cls, skipped_tags) = self.loss_cls(h, tags)?;
        let nc = if values.len() >= 3 {
            let groups = match self.config.nc_grouping {
                NcGrouping::Mixed => None,
                NcGrouping::PerTag => Some(tags),
            };
            loss_nc(h, values, groups, self.config.nc_temperature)?
        } else {
            ops::scalar(0.0)?
        };
        let combined = auto_weighted_combine(&[reg.clone(), cls.clone(), nc.clone()], &self.log_var)?;
        let ortho = orthogonal_penalty(&self.value_matrices(), self.config.ortho_weight)?;
        let total = (combined + &ortho)?;
        Ok(NumericLosses {
            reg,
            cls,
            nc,
            ortho,
            total,
            skipped_tags,
        })
    }
}

/// Mean squared error between predictions and targets.
pub fn loss_reg(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    if predicted.elem_count() != target.elem_count() || predicted.elem_count() == 0 {
        return invalid("regression inputs must be non-empty and equal length");
    }
    Ok(predicted
        .flatten_all()?
        .sub(&target.flatten_all()?)?
        .sqr()?
        .mean_all()?)
}

/// Index of the in-batch sample nearest in value to each anchor; ties go to
/// the lowest index. `groups` restricts candidates to equal labels.
pub fn nearest_value_positives(values: &[f64], groups: Option<&[&str]>) -> Vec<Option<usize>> {
    (0..values.len())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in values.iter().enumerate() {
                if j == i || groups.is_some_and(|g| g[j] != g[i]) {
                    continue;
                }
                let gap = (v - values[i]).abs();
                if best.is_none_or(|(_, b)| gap < b) {
                    best = Some((j, gap));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Contrastive loss with the nearest-value sample as positive and every other
/// eligible sample as negative; the denominator includes the positive.
pub fn loss_nc(h: &Tensor, values: &[f64], groups: Option<&[&str]>, tau: f64) -> Result<Tensor> {
    let n = values.len();
    if n < 3 {
        return invalid("numeric contrastive loss needs at least three samples");
    }
    if tau <= 0.0 {
        return invalid("temperature must be positive");
    }
    if h.dim(0)? != n {
        return invalid("embedding and value counts differ");
    }
    if let Some(g) = groups {
        if g.len() != n {
            return invalid("group labels and value counts differ");
        }
    }
    let positives = nearest_value_positives(values, groups);
    let eligible = |i: usize| -> bool {
        match groups {
            None => true,
            Some(g) => g.iter().filter(|&&x| x == g[i]).count() >= 3,
        }
    };
    let anchors: Vec<usize> = (0..n).filter(|&i| positives[i].is_some() && eligible(i)).collect();
    if anchors.is_empty() {
        return ops::scalar(0.0);
    }
    let mut bias = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || groups.is_some_and(|g| g[i] != g[j]) {
                bias[i * n + j] = -1e9;
            }
        }
    }
    let normed = ops::l2_normalize_rows(h)?;
    let logits = ((normed.matmul(&normed.t()?)? / tau)? + ops::mat(&bias, n, n)?)?;
    let rows: Vec<u32> = anchors.iter().map(|&i| i as u32).collect();
    let targets: Vec<u32> = anchors.iter().map(|&i| positives[i].unwrap() as u32).collect();
    ops::cross_entropy(&logits.index_select(&ops::ids(&rows)?, 0)?, &targets)
}

/// `½ Σ L_i / μ_i² + Σ ln(1 + μ_i²)` with `μ_i² = exp(log_var_i)`.
pub fn auto_weighted_combine(losses: &[Tensor], log_var: &Tensor) -> Result<Tensor> {
    if losses.len() != log_var.elem_count() {
        return invalid("one log-variance per loss required");
    }
    let l = Tensor::stack(losses, 0)?;
    let weighted = (l * log_var.neg()?.exp()?)?.sum_all()?.affine(0.5, 0.0)?;
    let reg = ops::softplus(log_var)?.sum_all()?;
    Ok((weighted + reg)?)
}

/// Positive uncertainty weights `μ_i = exp(log_var_i / 2)`.
pub fn uncertainty_weights(log_var: &Tensor) -> Result<Vec<f64>> {
    Ok(ops::to_f64_vec(log_var)?.into_iter().map(|s| (s / 2.0).exp()).collect())
}

/// `λ Σ ‖I − WᵀW‖_F²` over square matrices.
pub fn orthogonal_penalty(mats: &[Tensor], lambda: f64) -> Result<Tensor> {
    let mut total = ops::scalar(0.0)?;
    for w in mats {
        let (r, c) = w.dims2()?;
        if r != c {
            return invalid(format!("orthogonal penalty needs square matrices, got {r}x{c}"));
        }
        let eye = Tensor::eye(r, candle_core::DType::F64, w.device())?;
        let diff = (eye - w.t()?.matmul(w)?)?;
        total = (total + diff.sqr()?.sum_all()?)?;
    }
    Ok(total.affine(lambda, 0.0)?)
}
