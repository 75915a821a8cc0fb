//! Fault-chain tracing: translational embeddings over alarm facts trained
//! with a confidence-scaled margin.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use candle_core::Tensor;
use ktele_core::corpus::KnowledgeTriple;
use ktele_core::ke::{filtered_tail_ranks, key, sample_negatives, transe_distance, TripleKey};
use ktele_core::metrics::{summarize_ranks, RankingSummary};
use ktele_core::nn::{ops, Optimizer, ParamStore};
use ktele_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultQuadruple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    /// Confidence in `[0, 1]`.
    pub confidence: f64,
}

impl FaultQuadruple {
    pub fn new(head: &str, relation: &str, tail: &str, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            confidence,
        })
    }

    pub fn triple(&self) -> KnowledgeTriple {
        KnowledgeTriple::new(&self.head, &self.relation, &self.tail)
    }
}

pub fn read_quadruples(path: &Path) -> Result<Vec<FaultQuadruple>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::InvalidArgument(format!("{}:{}: expected h, r, t, s", path.display(), n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            FaultQuadruple::new(f[0], f[1], f[2], f[3].parse().map_err(|_| bad())?)
        })
        .collect()
}

pub fn write_quadruples(path: &Path, rows: &[FaultQuadruple]) -> Result<()> {
    let mut out = String::new();
    for q in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", q.head, q.relation, q.tail, q.confidence));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Keeps only edges whose relation is whitelisted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleFilter {
    pub relations: BTreeSet<String>,
}

impl RuleFilter {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(relations: I) -> Self {
        Self {
            relations: relations.into_iter().map(Into::into).collect(),
        }
    }

    pub fn admits(&self, q: &FaultQuadruple) -> bool {
        self.relations.contains(&q.relation)
    }

    pub fn apply(&self, rows: &[FaultQuadruple]) -> Vec<FaultQuadruple> {
        rows.iter().filter(|q| self.admits(q)).cloned().collect()
    }
}

/// `Σ_pos Σ_neg [d⁺ − d⁻ + s^exponent · margin]_+` with `d_pos: [B]`,
/// `d_neg: [B, n]` and one confidence per positive.
pub fn fct_loss(d_pos: &Tensor, d_neg: &Tensor, confidence: &[f64], margin: f64, exponent: f64) -> Result<Tensor> {
    if margin <= 0.0 || exponent <= 0.0 {
        return Err(Error::Config("margin and exponent must be positive".into()));
    }
    let (b, _) = d_neg.dims2()?;
    if d_pos.dims() != [b] || confidence.len() != b {
        return Err(Error::InvalidArgument(
            "positive distances, negatives and confidences disagree".into(),
        ));
    }
    let scaled: Vec<f64> = confidence.iter().map(|s| s.powf(exponent) * margin).collect();
    let offset = (d_pos + ops::vec1(&scaled)?)?.unsqueeze(1)?;
    Ok(offset.broadcast_sub(d_neg)?.relu()?.sum_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FctConfig {
    pub dim: usize,
    pub margin: f64,
    pub exponent: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl FctConfig {
    /// Hidden size 2000, batch 1024, 1000 negatives, learning rate 1e-5.
    pub fn full_scale() -> Self {
        Self {
            dim: 2000,
            margin: 1.0,
            exponent: 1.0,
            batch_size: 1024,
            negatives: 1000,
            learning_rate: 1e-5,
            epochs: 100,
        }
    }

    pub fn desk(dim: usize) -> Self {
        Self {
            dim,
            margin: 1.0,
            exponent: 1.0,
            batch_size: 32,
            negatives: 8,
            learning_rate: 1e-2,
            epochs: 60,
        }
    }
}

/// Initial entity vectors: encoder outputs in entity order, or `U(−1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub enum EntityInit {
    Uniform,
    Vectors(Vec<Vec<f64>>),
}

#[derive(Clone, Debug)]
pub struct FctModel {
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
    entities: Tensor,
    relations: Tensor,
    entity_index: BTreeMap<String, u32>,
    relation_index: BTreeMap<String, u32>,
}

impl FctModel {
    /// Relations start at zero so an encoder-initialised model first ranks
    /// tails by plain vector similarity to the head.
    pub fn new(
        ps: &mut ParamStore,
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        dim: usize,
        init: &EntityInit,
    ) -> Result<Self> {
        let n = entity_names.len();
        let entities = match init {
            EntityInit::Uniform => ps.uniform("fct.entities", &[n, dim], -1.0, 1.0)?,
            EntityInit::Vectors(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("expected {n} initial vectors of width {dim}")));
                }
                ps.from_vec("fct.entities", &[n, dim], rows.concat())?
            }
        };
        let relations = ps.zeros("fct.relations", &[relation_names.len(), dim])?;
        let entity_index = entity_names.iter().cloned().zip(0..).collect();
        let relation_index = relation_names.iter().cloned().zip(0..).collect();
        Ok(Self {
            entity_names,
            relation_names,
            entities,
            relations,
            entity_index,
            relation_index,
        })
    }

    fn ids(&self, triples: &[KnowledgeTriple]) -> Result<(Vec<u32>, Vec<u32>, Vec<u32>)> {
        let ent = |e: &str| {
            self.entity_index
                .get(e)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("unknown entity {e:?}")))
        };
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for t in triples {
            out.0.push(ent(&t.head)?);
            out.1.push(
                self.relation_index
                    .get(&t.relation)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown relation {:?}", t.relation)))?,
            );
            out.2.push(ent(&t.tail)?);
        }
        Ok(out)
    }

    pub fn distances(&self, triples: &[KnowledgeTriple]) -> Result<Tensor> {
        let (h, r, t) = self.ids(triples)?;
        transe_distance(
            &self.entities.index_select(&ops::ids(&h)?, 0)?,
            &self.relations.index_select(&ops::ids(&r)?, 0)?,
            &self.entities.index_select(&ops::ids(&t)?, 0)?,
        )
    }

    /// Loss of one batch with `negatives` corruptions per positive.
    pub fn batch_loss(
        &self,
        batch: &[FaultQuadruple],
        known: &HashSet<TripleKey>,
        cfg: &FctConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let positives: Vec<KnowledgeTriple> = batch.iter().map(FaultQuadruple::triple).collect();
        let mut negatives = Vec::with_capacity(batch.len() * cfg.negatives);
        for (i, p) in positives.iter().enumerate() {
            let drawn = sample_negatives(p, &self.entity_names, known, cfg.negatives, seed.wrapping_add(i as u64))?;
            negatives.extend(drawn.into_iter().map(|n| n.triple));
        }
        let d_pos = self.distances(&positives)?;
        let d_neg = self.distances(&negatives)?.reshape((batch.len(), cfg.negatives))?;
        let conf: Vec<f64> = batch.iter().map(|q| q.confidence).collect();
        fct_loss(&d_pos, &d_neg, &conf, cfg.margin, cfg.exponent)
    }

    /// Minibatch training over `facts`; returns the mean loss per epoch.
    pub fn train(&self, ps: &ParamStore, facts: &[FaultQuadruple], cfg: &FctConfig, seed: u64) -> Result<Vec<f64>> {
        if facts.is_empty() {
            return Ok(Vec::new());
        }
        let known: HashSet<TripleKey> = facts.iter().map(|q| key(&q.triple())).collect();
        let mut opt = Optimizer::new(ps.vars_with_prefix(&["fct."]), cfg.learning_rate, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..facts.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
                let batch: Vec<FaultQuadruple> = chunk.iter().map(|&i| facts[i].clone()).collect();
                let step_seed = seed ^ ((epoch as u64) << 32) ^ (b as u64).wrapping_mul(7919);
                let loss = self.batch_loss(&batch, &known, cfg, step_seed)?;
                total += opt.step(&loss)?;
            }
            history.push(total / facts.len() as f64);
        }
        Ok(history)
    }

    /// Filtered tail ranking of `queries` against every entity.
    pub fn evaluate(&self, queries: &[FaultQuadruple], known: &HashSet<TripleKey>) -> Result<RankingSummary> {
        let entity_vectors = ops::to_rows(&self.entities)?;
        let relation_vectors: BTreeMap<String, Vec<f64>> = self
            .relation_names
            .iter()
            .cloned()
            .zip(ops::to_rows(&self.relations)?)
            .collect();
        let triples: Vec<KnowledgeTriple> = queries.iter().map(FaultQuadruple::triple).collect();
        let ranked = filtered_tail_ranks(&self.entity_names, &entity_vectors, &relation_vectors, &triples, known)?;
        let ranks: Vec<f64> = ranked.iter().map(|r| r.rank).collect();
        summarize_ranks(&ranks, &[1, 3, 10])
    }
}

/// Hides the first edge of every chain: returns `(visible facts, hidden edges)`.
pub fn hide_first_hops(chains: &[Vec<FaultQuadruple>]) -> (Vec<FaultQuadruple>, Vec<FaultQuadruple>) {
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for chain in chains {
        if let Some((first, rest)) = chain.split_first() {
            hidden.push(first.clone());
            visible.extend(rest.iter().cloned());
        }
    }
    (visible, hidden)
}
