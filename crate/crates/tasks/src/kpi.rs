//! Abnormal KPI detection: a small transformer over the time axis of a
//! segment of encoded machine-data rows, with point and segment heads.

use std::path::Path;

use candle_core::{Tensor, D};
use ktele_core::metrics::{classification_metrics, ClassificationMetrics};
use ktele_core::nn::{key_bias_from_mask, ops, Linear, Mode, Optimizer, ParamStore, TransformerLayer};
use ktele_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A segment as stored on disk: `tag:value` readings per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawKpiSegment {
    pub id: String,
    pub points: Vec<Vec<(String, f64)>>,
    pub point_labels: Vec<u8>,
}

impl RawKpiSegment {
    pub fn segment_label(&self) -> u8 {
        self.point_labels.contains(&1) as u8
    }
}

/// A segment of encoded points; the segment label is the OR of point labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiSegment {
    points: Vec<Vec<f64>>,
    point_labels: Vec<u8>,
    segment_label: u8,
}

impl KpiSegment {
    pub fn new(points: Vec<Vec<f64>>, point_labels: Vec<u8>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty KPI segment".into()));
        }
        if points.len() != point_labels.len() || point_labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidArgument(
                "point labels must be one 0/1 value per point".into(),
            ));
        }
        let width = points[0].len();
        if width == 0 || points.iter().any(|p| p.len() != width) {
            return Err(Error::InvalidArgument("points must share a non-zero width".into()));
        }
        let segment_label = point_labels.contains(&1) as u8;
        Ok(Self {
            points,
            point_labels,
            segment_label,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point_labels(&self) -> &[u8] {
        &self.point_labels
    }

    pub fn segment_label(&self) -> u8 {
        self.segment_label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn width(&self) -> usize {
        self.points[0].len()
    }
}

/// Rows of `segment_id,position,tag:value,...,point_label`.
pub fn read_kpi_csv(path: &Path) -> Result<Vec<RawKpiSegment>> {
    let text = std::fs::read_to_string(path)?;
    let mut segments: Vec<RawKpiSegment> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::InvalidArgument(format!("{}:{}: {what}", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(bad("expected segment id, position and label"));
        }
        let position: usize = f[1].parse().map_err(|_| bad("position"))?;
        let label: u8 = f[f.len() - 1].parse().map_err(|_| bad("label"))?;
        if label > 1 {
            return Err(bad("label must be 0 or 1"));
        }
        let readings = f[2..f.len() - 1]
            .iter()
            .map(|kv| {
                let (k, v) = kv.rsplit_once(':').ok_or_else(|| bad("reading is not tag:value"))?;
                Ok((k.to_string(), v.parse::<f64>().map_err(|_| bad("reading value"))?))
            })
            .collect::<Result<Vec<_>>>()?;
        match segments.last_mut() {
            Some(s) if s.id == f[0] => {
                if position != s.points.len() {
                    return Err(bad("positions must be consecutive"));
                }
                s.points.push(readings);
                s.point_labels.push(label);
            }
            _ => {
                if position != 0 {
                    return Err(bad("a segment must start at position 0"));
                }
                segments.push(RawKpiSegment {
                    id: f[0].to_string(),
                    points: vec![readings],
                    point_labels: vec![label],
                });
            }
        }
    }
    Ok(segments)
}

pub fn write_kpi_csv(path: &Path, segments: &[RawKpiSegment]) -> Result<()> {
    let mut out = String::new();
    for s in segments {
        for (pos, (readings, y)) in s.points.iter().zip(&s.point_labels).enumerate() {
            out.push_str(&format!("{},{pos}", s.id));
            for (tag, v) in readings {
                if tag.contains([',', '\n']) {
                    return Err(Error::InvalidArgument(format!("tag {tag:?} contains a separator")));
                }
                out.push_str(&format!(",{tag}:{v}"));
            }
            out.push_str(&format!(",{y}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Elementwise focal loss `−(1 − p_t)^γ ln p_t` from logits and 0/1 labels.
pub fn focal_bce(logits: &Tensor, labels: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma < 0.0 {
        return Err(Error::Config("focal exponent must be non-negative".into()));
    }
    let signed = (logits * labels.affine(2.0, -1.0)?)?;
    let log_pt = ops::log_sigmoid(&signed)?;
    if gamma == 0.0 {
        return Ok(log_pt.neg()?);
    }
    let modulator = ops::log_sigmoid(&signed.neg()?)?.affine(gamma, 0.0)?.exp()?;
    Ok((modulator * log_pt)?.neg()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VtConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl VtConfig {
    /// Two layers of three heads.
    pub fn desk(input_dim: usize, max_len: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 48,
            num_layers: 2,
            num_heads: 3,
            ffn_dim: 96,
            max_len,
            dropout: 0.1,
            focal_gamma: 2.0,
            learning_rate: 2e-3,
            epochs: 30,
            batch_size: 16,
        }
    }
}

/// Padded batch of segments.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    /// `[B, T, in]`.
    pub inputs: Tensor,
    /// `[B, T]`, 1 on real points.
    pub valid: Tensor,
    pub point_labels: Tensor,
    pub segment_labels: Tensor,
    pub lengths: Vec<usize>,
}

impl SegmentBatch {
    pub fn new(segments: &[&KpiSegment]) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::InvalidArgument("empty segment batch".into()));
        };
        let width = first.width();
        if segments.iter().any(|s| s.width() != width) {
            return Err(Error::InvalidArgument("segments differ in point width".into()));
        }
        let t = segments.iter().map(|s| s.len()).max().unwrap_or(0);
        let b = segments.len();
        let mut inputs = vec![0.0; b * t * width];
        let mut valid = vec![0.0; b * t];
        let mut labels = vec![0.0; b * t];
        for (i, s) in segments.iter().enumerate() {
            for (p, point) in s.points.iter().enumerate() {
                let at = (i * t + p) * width;
                inputs[at..at + width].copy_from_slice(point);
                valid[i * t + p] = 1.0;
                labels[i * t + p] = s.point_labels[p] as f64;
            }
        }
        let dev = candle_core::Device::Cpu;
        Ok(Self {
            inputs: Tensor::from_vec(inputs, (b, t, width), &dev)?,
            valid: Tensor::from_vec(valid, (b, t), &dev)?,
            point_labels: Tensor::from_vec(labels, (b, t), &dev)?,
            segment_labels: ops::vec1(&segments.iter().map(|s| s.segment_label as f64).collect::<Vec<_>>())?,
            lengths: segments.iter().map(|s| s.len()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct VerticalTransformer {
    input: Linear,
    positions: Tensor,
    layers: Vec<TransformerLayer>,
    point_head: Linear,
    segment_head: Linear,
    max_len: usize,
    dropout: f64,
}

impl VerticalTransformer {
    pub fn new(ps: &mut ParamStore, cfg: &VtConfig) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|l| {
                TransformerLayer::new(
                    ps,
                    &format!("kpi.layer{l}"),
                    cfg.hidden_dim,
                    cfg.num_heads,
                    cfg.ffn_dim,
                    cfg.dropout,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::new(ps, "kpi.input", cfg.input_dim, cfg.hidden_dim, true)?,
            positions: ps.normal("kpi.positions", &[cfg.max_len, cfg.hidden_dim], 0.02)?,
            layers,
            point_head: Linear::new(ps, "kpi.point_head", cfg.hidden_dim, 1, true)?,
            segment_head: Linear::new(ps, "kpi.segment_head", cfg.hidden_dim, 1, true)?,
            max_len: cfg.max_len,
            dropout: cfg.dropout,
        })
    }

    /// Point logits `[B, T]` and segment logits `[B]`.
    pub fn forward(&self, batch: &SegmentBatch, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let (b, t, width) = batch.inputs.dims3()?;
        if t > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "segment of {t} points exceeds {}",
                self.max_len
            )));
        }
        if width != self.input.in_dim() {
            return Err(Error::Config(format!(
                "points have {width} dims, model expects {}",
                self.input.in_dim()
            )));
        }
        let h = self.input.forward(&batch.inputs.reshape((b * t, width))?)?;
        let hidden = self.input.out_dim();
        let x = h
            .reshape((b, t, hidden))?
            .broadcast_add(&self.positions.narrow(0, 0, t)?.unsqueeze(0)?)?;
        let mut x = mode.dropout(&x, self.dropout)?;
        let bias = key_bias_from_mask(&batch.valid)?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias, mode)?;
        }
        let points = self.point_head.forward(&x.reshape((b * t, hidden))?)?.reshape((b, t))?;
        let mask = batch.valid.unsqueeze(2)?;
        let lengths = batch.valid.sum_keepdim(1)?;
        let pooled = x.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&lengths)?;
        let segment = self.segment_head.forward(&pooled)?.squeeze(1)?;
        Ok((points, segment))
    }

    pub fn loss(&self, batch: &SegmentBatch, gamma: f64, mode: &mut Mode) -> Result<Tensor> {
        let (points, segment) = self.forward(batch, mode)?;
        kpiad_loss(&points, &segment, batch, gamma)
    }

    pub fn train(&self, ps: &ParamStore, segments: &[KpiSegment], cfg: &VtConfig, seed: u64) -> Result<Vec<f64>> {
        let mut opt = Optimizer::new(ps.vars_with_prefix(&["kpi."]), cfg.learning_rate, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..segments.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let picked: Vec<&KpiSegment> = chunk.iter().map(|&i| &segments[i]).collect();
                let batch = SegmentBatch::new(&picked)?;
                let loss = self.loss(&batch, cfg.focal_gamma, &mut Mode::Train(&mut rng))?;
                total += opt.step(&loss)?;
                batches += 1;
            }
            history.push(total / batches.max(1) as f64);
        }
        Ok(history)
    }

    /// Point and segment predictions at probability one half.
    pub fn evaluate(&self, segments: &[KpiSegment]) -> Result<KpiMetrics> {
        let (mut pp, mut pl, mut sp, mut sl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for chunk in segments.chunks(64) {
            let refs: Vec<&KpiSegment> = chunk.iter().collect();
            let batch = SegmentBatch::new(&refs)?;
            let (points, segment) = self.forward(&batch, &mut Mode::Eval)?;
            let rows = ops::to_rows(&points)?;
            for (s, row) in chunk.iter().zip(rows) {
                pp.extend(row[..s.len()].iter().map(|&z| z > 0.0));
                pl.extend(s.point_labels.iter().map(|&y| y == 1));
            }
            sp.extend(ops::to_f64_vec(&segment)?.into_iter().map(|z| z > 0.0));
            sl.extend(chunk.iter().map(|s| s.segment_label == 1));
        }
        Ok(KpiMetrics {
            point: classification_metrics(&pp, &pl)?,
            segment: classification_metrics(&sp, &sl)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiMetrics {
    pub point: ClassificationMetrics,
    pub segment: ClassificationMetrics,
}

/// Batch mean of `focal(segment) + mean_n focal(point_n)` over real points.
pub fn kpiad_loss(points: &Tensor, segment: &Tensor, batch: &SegmentBatch, gamma: f64) -> Result<Tensor> {
    let per_point = (focal_bce(points, &batch.point_labels, gamma)? * &batch.valid)?;
    let lengths = batch.valid.sum(D::Minus1)?;
    let point_term = per_point.sum(D::Minus1)?.div(&lengths)?;
    let seg_term = focal_bce(segment, &batch.segment_labels, gamma)?;
    Ok((seg_term + point_term)?.mean_all()?)
}
