//! Event association prediction: pair two event embeddings with their
//! network-element neighbourhoods and time gap, then classify the pair.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use candle_core::Tensor;
use ktele_core::nn::{mean_pool_groups, ops, Linear, ParamStore};
use ktele_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPairSample {
    pub event_i: String,
    pub event_j: String,
    pub ne_i: usize,
    pub ne_j: usize,
    pub t_i: i64,
    pub t_j: i64,
    pub label: u8,
}

impl EventPairSample {
    pub fn key(&self) -> (String, String) {
        (self.event_i.clone(), self.event_j.clone())
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<EventPairSample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::InvalidArgument(format!("{}:{}: {what}", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 tab-separated fields"));
            }
            let label: u8 = f[6].parse().map_err(|_| bad("label"))?;
            if label > 1 {
                return Err(bad("label must be 0 or 1"));
            }
            Ok(EventPairSample {
                event_i: f[0].to_string(),
                event_j: f[1].to_string(),
                ne_i: f[2].parse().map_err(|_| bad("ne_i"))?,
                ne_j: f[3].parse().map_err(|_| bad("ne_j"))?,
                t_i: f[4].parse().map_err(|_| bad("t_i"))?,
                t_j: f[5].parse().map_err(|_| bad("t_j"))?,
                label,
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[EventPairSample]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        if p.event_i.contains(['\t', '\n']) || p.event_j.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(
                "event names may not contain tabs or newlines".into(),
            ));
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.event_i, p.event_j, p.ne_i, p.ne_j, p.t_i, p.t_j, p.label
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Undirected network-element graph as adjacency lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeGraph {
    pub neighbours: Vec<Vec<usize>>,
}

impl NeGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a != b {
                neighbours[a].push(b);
                neighbours[b].push(a);
            }
        }
        for nb in &mut neighbours {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(Self { neighbours })
    }

    pub fn len(&self) -> usize {
        self.neighbours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbours.is_empty()
    }

    /// The node itself followed by its neighbours.
    pub fn closed_neighbourhood(&self, node: usize) -> Result<Vec<u32>> {
        let nb = self
            .neighbours
            .get(node)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown network element {node}")))?;
        Ok(std::iter::once(node)
            .chain(nb.iter().copied())
            .map(|v| v as u32)
            .collect())
    }
}

/// Mean of `embeddings` rows over each node's closed neighbourhood.
pub fn aggregate(nodes: &[usize], graph: &NeGraph, embeddings: &Tensor) -> Result<Tensor> {
    let groups = nodes
        .iter()
        .map(|&n| graph.closed_neighbourhood(n))
        .collect::<Result<Vec<_>>>()?;
    mean_pool_groups(embeddings, &groups)
}

/// `Δ · w` for time gaps `Δ: [n]` and a `[1, 2]` weight; no bias.
pub fn time_encode(deltas: &Tensor, weight: &Tensor) -> Result<Tensor> {
    if weight.dims() != [1, 2] {
        return Err(Error::Config(format!(
            "time weight must be 1x2, got {:?}",
            weight.dims()
        )));
    }
    Ok(deltas.unsqueeze(1)?.matmul(weight)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EapConfig {
    pub event_dim: usize,
    pub ne_dim: usize,
    /// Time gaps are divided by this before encoding.
    pub time_scale: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl EapConfig {
    pub fn classifier_input(&self) -> usize {
        2 * self.event_dim + 2 * self.ne_dim + 2
    }
}

/// Indexed view of a sample batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EapBatch {
    pub event_i: Vec<u32>,
    pub event_j: Vec<u32>,
    pub ne_i: Vec<usize>,
    pub ne_j: Vec<usize>,
    pub deltas: Vec<f64>,
    pub labels: Vec<u32>,
}

impl EapBatch {
    pub fn new(samples: &[EventPairSample], event_index: &BTreeMap<String, usize>) -> Result<Self> {
        let idx = |e: &str| {
            event_index
                .get(e)
                .map(|&i| i as u32)
                .ok_or_else(|| Error::InvalidArgument(format!("event {e:?} has no embedding")))
        };
        let mut b = EapBatch {
            event_i: Vec::new(),
            event_j: Vec::new(),
            ne_i: Vec::new(),
            ne_j: Vec::new(),
            deltas: Vec::new(),
            labels: Vec::new(),
        };
        for s in samples {
            b.event_i.push(idx(&s.event_i)?);
            b.event_j.push(idx(&s.event_j)?);
            b.ne_i.push(s.ne_i);
            b.ne_j.push(s.ne_j);
            b.deltas.push((s.t_i - s.t_j) as f64);
            b.labels.push(s.label as u32);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EapModel {
    pub ne_embeddings: Tensor,
    pub time_weight: Tensor,
    pub classifier: Linear,
    pub time_scale: f64,
}

impl EapModel {
    pub fn new(ps: &mut ParamStore, cfg: &EapConfig, num_nodes: usize) -> Result<Self> {
        Ok(Self {
            ne_embeddings: ps.normal("eap.ne", &[num_nodes, cfg.ne_dim], 1.0)?,
            time_weight: ps.normal("eap.time", &[1, 2], 1.0)?,
            classifier: Linear::new(ps, "eap.classifier", cfg.classifier_input(), 2, true)?,
            time_scale: cfg.time_scale,
        })
    }

    /// Two-class logits `[n, 2]`; `events` holds one frozen embedding per event type.
    pub fn logits(&self, events: &Tensor, graph: &NeGraph, batch: &EapBatch) -> Result<Tensor> {
        let (num_nodes, _) = self.ne_embeddings.dims2()?;
        if graph.len() != num_nodes {
            return Err(Error::Config(format!(
                "{} graph nodes but {num_nodes} NE embeddings",
                graph.len()
            )));
        }
        let ei = events.index_select(&ops::ids(&batch.event_i)?, 0)?;
        let ej = events.index_select(&ops::ids(&batch.event_j)?, 0)?;
        let ni = aggregate(&batch.ne_i, graph, &self.ne_embeddings)?;
        let nj = aggregate(&batch.ne_j, graph, &self.ne_embeddings)?;
        let scaled: Vec<f64> = batch.deltas.iter().map(|d| d / self.time_scale).collect();
        let dt = time_encode(&ops::vec1(&scaled)?, &self.time_weight)?;
        let features = Tensor::cat(&[&ei, &ej, &ni, &nj, &dt], 1)?;
        let width = features.dim(1)?;
        if width != self.classifier.in_dim() {
            return Err(Error::Config(format!(
                "pair features have {width} dims, classifier expects {}",
                self.classifier.in_dim()
            )));
        }
        self.classifier.forward(&features)
    }

    pub fn loss(&self, events: &Tensor, graph: &NeGraph, batch: &EapBatch) -> Result<Tensor> {
        eap_loss(&self.logits(events, graph, batch)?, &batch.labels)
    }

    /// Predicted association: class 1 more probable than class 0.
    pub fn predict(&self, events: &Tensor, graph: &NeGraph, batch: &EapBatch) -> Result<Vec<bool>> {
        Ok(ops::to_rows(&self.logits(events, graph, batch)?)?
            .into_iter()
            .map(|r| r[1] > r[0])
            .collect())
    }
}

/// Mean softmax cross-entropy over the batch.
pub fn eap_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    ops::cross_entropy(logits, labels)
}

/// One negative per positive: one side replaced by a pool event so that the
/// resulting pair is not a known positive.
pub fn generate_negatives(
    positives: &[EventPairSample],
    event_pool: &[String],
    seed: u64,
) -> Result<Vec<EventPairSample>> {
    const ATTEMPTS: usize = 1000;
    if event_pool.is_empty() {
        return Err(Error::InvalidArgument("empty event pool".into()));
    }
    let known: HashSet<(String, String)> = positives.iter().map(EventPairSample::key).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len());
    'outer: for p in positives {
        for _ in 0..ATTEMPTS {
            let replacement = &event_pool[rng.random_range(0..event_pool.len())];
            let mut n = p.clone();
            n.label = 0;
            if rng.random_bool(0.5) {
                n.event_i = replacement.clone();
            } else {
                n.event_j = replacement.clone();
            }
            if n.key() != p.key() && !known.contains(&n.key()) {
                out.push(n);
                continue 'outer;
            }
        }
        return Err(Error::Exhausted(format!(
            "no negative for ({}, {}) after {ATTEMPTS} draws",
            p.event_i, p.event_j
        )));
    }
    Ok(out)
}
