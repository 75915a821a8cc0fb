//! Text-enhanced knowledge embedding: entities and relations are encoded
//! through the backbone and scored by translation distance.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TokenBatch};
use crate::corpus::{KnowledgeTriple, NormalizationStats};
use crate::error::{invalid, Error, Result};
use crate::metrics::{rank_of, Order};
use crate::nn::{ops, Mode};
use crate::prompting::{wrap_entity, wrap_relation, WrappedSequence};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NegativeWeighting {
    Uniform,
    SelfAdversarial { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeConfig {
    pub margin: f64,
    pub negatives: usize,
    pub weighting: NegativeWeighting,
}

impl Default for KeConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            negatives: 10,
            weighting: NegativeWeighting::Uniform,
        }
    }
}

impl KeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 || self.negatives == 0 {
            return Err(Error::Config(
                "KE margin must be positive and negatives at least 1".into(),
            ));
        }
        if let NegativeWeighting::SelfAdversarial { temperature } = self.weighting {
            if temperature <= 0.0 {
                return Err(Error::Config("self-adversarial temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Entity,
    Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptedSide {
    Head,
    Tail,
}

pub type TripleKey = (String, String, String);

pub fn key(t: &KnowledgeTriple) -> TripleKey {
    (t.head.clone(), t.relation.clone(), t.tail.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeTriple {
    pub triple: KnowledgeTriple,
    pub side: CorruptedSide,
}

#[derive(Clone, Debug, Default)]
pub struct TripleBatch {
    pub positives: Vec<KnowledgeTriple>,
    /// One list per positive, each of the configured length.
    pub negatives: Vec<Vec<NegativeTriple>>,
}

/// `[CLS] [ENT] surface [SEP]` or `[CLS] [REL] surface [SEP]`.
pub fn wrap_element(surface: &str, role: Role) -> Result<WrappedSequence> {
    if surface.trim().is_empty() {
        return invalid("empty element surface");
    }
    match role {
        Role::Entity => wrap_entity(surface, &[], &NormalizationStats::default()),
        Role::Relation => wrap_relation(surface),
    }
}

/// Pooled encodings `[n, d]` of the given elements, in order.
pub fn embed_elements(
    backbone: &Backbone,
    vocab: &Vocabulary,
    elements: &[(String, Role)],
    mode: &mut Mode,
) -> Result<Tensor> {
    let seqs = elements
        .iter()
        .map(|(s, r)| wrap_element(s, *r))
        .collect::<Result<Vec<_>>>()?;
    let batch = TokenBatch::from_sequences(&seqs, vocab, backbone.config.max_len)?;
    Ok(backbone.forward(&batch, None, mode)?.pooled)
}

/// Keeps the gradient of the distance finite when `h + r = t` exactly, as
/// happens for self-loop corruptions while relations are still zero.
const DISTANCE_EPS: f64 = 1e-12;

/// Row-wise `‖h + r − t‖₂` for `[n, d]` inputs, returning `[n]`.
pub fn transe_distance(h: &Tensor, r: &Tensor, t: &Tensor) -> Result<Tensor> {
    if h.dims() != r.dims() || h.dims() != t.dims() {
        return invalid("TransE inputs differ in shape");
    }
    Ok((((h + r)? - t)?.sqr()?.sum(candle_core::D::Minus1)? + DISTANCE_EPS)?.sqrt()?)
}

/// `n` corruptions alternating head and tail, rejecting known positives.
pub fn sample_negatives(
    positive: &KnowledgeTriple,
    entity_pool: &[String],
    known: &HashSet<TripleKey>,
    n: usize,
    seed: u64,
) -> Result<Vec<NegativeTriple>> {
    if entity_pool.len() < 2 {
        return invalid("entity pool needs at least two entities");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts >= 100 * n {
            return Err(Error::Exhausted(format!(
                "found {} of {n} negatives for {:?} after {attempts} attempts",
                out.len(),
                key(positive)
            )));
        }
        attempts += 1;
        let side = if out.len() % 2 == 0 {
            CorruptedSide::Head
        } else {
            CorruptedSide::Tail
        };
        let e = &entity_pool[rng.random_range(0..entity_pool.len())];
        let mut t = KnowledgeTriple::new(&positive.head, &positive.relation, &positive.tail);
        match side {
            CorruptedSide::Head => t.head = e.clone(),
            CorruptedSide::Tail => t.tail = e.clone(),
        }
        if known.contains(&key(&t)) || key(&t) == key(positive) {
            continue;
        }
        out.push(NegativeTriple { triple: t, side });
    }
    Ok(out)
}

/// Builds a batch with negatives; seeds derive from `seed` and the row index.
pub fn build_batch(
    positives: &[KnowledgeTriple],
    entity_pool: &[String],
    known: &HashSet<TripleKey>,
    cfg: &KeConfig,
    seed: u64,
) -> Result<TripleBatch> {
    let negatives = positives
        .iter()
        .enumerate()
        .map(|(i, p)| {
            sample_negatives(
                p,
                entity_pool,
                known,
                cfg.negatives,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TripleBatch {
        positives: positives.to_vec(),
        negatives,
    })
}

/// Negative weights `[B, n]`: uniform, or a detached softmax of `−d/T` per row.
pub fn negative_weights(d_neg: &Tensor, weighting: NegativeWeighting) -> Result<Tensor> {
    let (_, n) = d_neg.dims2()?;
    match weighting {
        NegativeWeighting::Uniform => Ok(d_neg.ones_like()?.affine(1.0 / n as f64, 0.0)?),
        NegativeWeighting::SelfAdversarial { temperature } => {
            ops::softmax_last(&d_neg.detach().affine(-1.0 / temperature, 0.0)?)
        }
    }
}

/// Mean over positives of `−ln σ(γ − d⁺) − Σ_i p_i ln σ(d⁻_i − γ)`.
/// `d_pos: [B]`, `d_neg: [B, n]`.
pub fn ke_loss_from_distances(d_pos: &Tensor, d_neg: &Tensor, cfg: &KeConfig) -> Result<Tensor> {
    let pos = ops::log_sigmoid(&d_pos.affine(-1.0, cfg.margin)?)?.neg()?;
    let p = negative_weights(d_neg, cfg.weighting)?;
    let neg = (ops::log_sigmoid(&d_neg.affine(1.0, -cfg.margin)?)? * p)?
        .sum(1)?
        .neg()?;
    Ok((pos + neg)?.mean_all()?)
}

/// Unique elements referenced by a batch, in a stable order.
pub fn batch_elements(batch: &TripleBatch) -> Vec<(String, Role)> {
    let mut seen = BTreeMap::new();
    let all = batch
        .positives
        .iter()
        .chain(batch.negatives.iter().flatten().map(|n| &n.triple));
    for t in all {
        for (s, r) in [
            (&t.head, Role::Entity),
            (&t.relation, Role::Relation),
            (&t.tail, Role::Entity),
        ] {
            let next = seen.len();
            seen.entry((s.clone(), r)).or_insert(next);
        }
    }
    let mut items: Vec<((String, Role), usize)> = seen.into_iter().collect();
    items.sort_by_key(|(_, i)| *i);
    items.into_iter().map(|(k, _)| k).collect()
}

/// KE loss for a batch given an element encoder that maps elements to `[n, d]`.
pub fn ke_loss<F>(batch: &TripleBatch, cfg: &KeConfig, embed: F) -> Result<Tensor>
where
    F: FnOnce(&[(String, Role)]) -> Result<Tensor>,
{
    if batch.positives.is_empty() || batch.negatives.len() != batch.positives.len() {
        return invalid("batch needs one negative list per positive");
    }
    let n = batch.negatives[0].len();
    if n == 0 || batch.negatives.iter().any(|v| v.len() != n) {
        return invalid("every positive needs the same non-zero number of negatives");
    }
    let elements = batch_elements(batch);
    let index: BTreeMap<(String, Role), u32> = elements.iter().cloned().zip(0u32..).collect();
    let vectors = embed(&elements)?;
    let gather = |triples: Vec<&KnowledgeTriple>| -> Result<Tensor> {
        let pick = |f: &dyn Fn(&KnowledgeTriple) -> (String, Role)| -> Result<Tensor> {
            let ids: Vec<u32> = triples.iter().map(|t| index[&f(t)]).collect();
            Ok(vectors.index_select(&ops::ids(&ids)?, 0)?)
        };
        let h = pick(&|t| (t.head.clone(), Role::Entity))?;
        let r = pick(&|t| (t.relation.clone(), Role::Relation))?;
        let tl = pick(&|t| (t.tail.clone(), Role::Entity))?;
        transe_distance(&h, &r, &tl)
    };
    let d_pos = gather(batch.positives.iter().collect())?;
    let d_neg =
        gather(batch.negatives.iter().flatten().map(|n| &n.triple).collect())?.reshape((batch.positives.len(), n))?;
    ke_loss_from_distances(&d_pos, &d_neg, cfg)
}

/// Outcome of filtered tail prediction for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedQuery {
    pub rank: f64,
    pub candidates: usize,
}

/// Filtered tail ranking: every entity is a candidate except other known
/// true tails of `(h, r, ?)`. Distances ascend.
pub fn filtered_tail_ranks(
    entity_names: &[String],
    entity_vectors: &[Vec<f64>],
    relation_vectors: &BTreeMap<String, Vec<f64>>,
    queries: &[KnowledgeTriple],
    known: &HashSet<TripleKey>,
) -> Result<Vec<RankedQuery>> {
    let pos: BTreeMap<&str, usize> = entity_names.iter().map(String::as_str).zip(0..).collect();
    queries
        .iter()
        .map(|q| {
            let (Some(&hi), Some(&ti)) = (pos.get(q.head.as_str()), pos.get(q.tail.as_str())) else {
                return invalid(format!("unknown entity in query {:?}", key(q)));
            };
            let Some(rv) = relation_vectors.get(&q.relation) else {
                return invalid(format!("unknown relation {}", q.relation));
            };
            let target: Vec<f64> = entity_vectors[hi].iter().zip(rv).map(|(a, b)| a + b).collect();
            let mut scores = Vec::new();
            let mut truth = 0;
            for (ci, cand) in entity_names.iter().enumerate() {
                let filtered = ci != ti && known.contains(&(q.head.clone(), q.relation.clone(), cand.clone()));
                if filtered {
                    continue;
                }
                if ci == ti {
                    truth = scores.len();
                }
                let d: f64 = target
                    .iter()
                    .zip(&entity_vectors[ci])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                scores.push(d);
            }
            Ok(RankedQuery {
                rank: rank_of(&scores, truth, Order::Ascending),
                candidates: scores.len(),
            })
        })
        .collect()
}

/// Reads `head \t relation \t tail [\t confidence]` rows; confidence is returned
/// when present.
pub fn read_kg_tsv(path: &Path) -> Result<Vec<(KnowledgeTriple, Option<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return invalid(format!("{}:{}: expected 3 or 4 columns", path.display(), n + 1));
        }
        let t = KnowledgeTriple::new(cols[0], cols[1], cols[2]);
        t.validate()?;
        let conf = match cols.get(3) {
            Some(c) => Some(
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), n + 1)))?,
            ),
            None => None,
        };
        out.push((t, conf));
    }
    Ok(out)
}

pub fn write_kg_tsv(path: &Path, rows: &[(KnowledgeTriple, Option<f64>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (t, c) in rows {
        match c {
            Some(c) => writeln!(f, "{}\t{}\t{}\t{c}", t.head, t.relation, t.tail)?,
            None => writeln!(f, "{}\t{}\t{}", t.head, t.relation, t.tail)?,
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::ParamStore;
    use proptest::prelude::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn loss_of(d_pos: &[f64], d_neg: &[f64], n: usize, cfg: &KeConfig) -> f64 {
        let dp = ops::vec1(d_pos).unwrap();
        let dn = ops::mat(d_neg, d_pos.len(), n).unwrap();
        ops::to_scalar(&ke_loss_from_distances(&dp, &dn, cfg).unwrap()).unwrap()
    }

    #[test]
    fn transe_identities() {
        let h = ops::mat(&[1.0, 0.0], 1, 2).unwrap();
        let r = ops::mat(&[0.0, 1.0], 1, 2).unwrap();
        let t = ops::mat(&[0.0, 0.0], 1, 2).unwrap();
        let d = ops::to_f64_vec(&transe_distance(&h, &r, &t).unwrap()).unwrap()[0];
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
        let t = ops::mat(&[1.0, 1.0], 1, 2).unwrap();
        let d = ops::to_f64_vec(&transe_distance(&h, &r, &t).unwrap()).unwrap()[0];
        assert_eq!(d, DISTANCE_EPS.sqrt());
    }

    #[test]
    fn loss_closed_forms() {
        let cfg = KeConfig::default();
        let pos_only = -sig(0.0).ln();
        let l = loss_of(&[1.0], &[1e6], 1, &cfg);
        assert!((l - pos_only).abs() < 1e-12);
        assert!((pos_only - 2f64.ln()).abs() < 1e-15);
        let l = loss_of(&[0.0], &[1e6, 1e6], 2, &cfg);
        assert!((l - 0.31326168751822286).abs() < 1e-12);
        let l = loss_of(&[0.4], &[0.3, 2.5], 2, &cfg);
        let oracle = -sig(1.0 - 0.4).ln() - 0.5 * sig(0.3 - 1.0).ln() - 0.5 * sig(2.5 - 1.0).ln();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn self_adversarial_weights_are_distribution() {
        let d = ops::mat(&[0.3, 1.2, 2.0, 0.1, 0.1, 5.0], 2, 3).unwrap();
        let p = ops::to_rows(&negative_weights(&d, NegativeWeighting::SelfAdversarial { temperature: 1.0 }).unwrap())
            .unwrap();
        for row in p {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_alternate_and_filter() {
        let pool: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let pos = KnowledgeTriple::new("a", "r", "b");
        let known: HashSet<TripleKey> = [key(&pos)].into();
        let negs = sample_negatives(&pos, &pool, &known, 2, 1).unwrap();
        assert_eq!(negs[0].side, CorruptedSide::Head);
        assert_eq!(negs[1].side, CorruptedSide::Tail);
        let allowed: HashSet<TripleKey> = [("a", "r", "a"), ("a", "r", "c")]
            .iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect();
        for seed in 0..50 {
            for n in sample_negatives(&pos, &pool, &known, 6, seed).unwrap() {
                assert_ne!(key(&n.triple), key(&pos));
                if n.side == CorruptedSide::Tail {
                    assert!(allowed.contains(&key(&n.triple)));
                    assert_eq!((n.triple.head.as_str(), n.triple.relation.as_str()), ("a", "r"));
                } else {
                    assert_eq!((n.triple.relation.as_str(), n.triple.tail.as_str()), ("r", "b"));
                }
            }
        }
        assert_eq!(
            sample_negatives(&pos, &pool, &known, 4, 3).unwrap(),
            sample_negatives(&pos, &pool, &known, 4, 3).unwrap()
        );
    }

    #[test]
    fn negatives_exhaust() {
        let pool: Vec<String> = vec!["a".into(), "b".into()];
        let pos = KnowledgeTriple::new("a", "r", "b");
        let known: HashSet<TripleKey> = [("a", "r", "b"), ("b", "r", "b"), ("a", "r", "a")]
            .iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect();
        assert!(matches!(
            sample_negatives(&pos, &pool, &known, 2, 0),
            Err(Error::Exhausted(_))
        ));
        assert!(sample_negatives(&pos, &pool[..1], &known, 2, 0).is_err());
    }

    #[test]
    fn wrapping_and_embedding() {
        let specials = crate::corpus::SpecialTokenSet::new(Default::default(), &Default::default()).unwrap();
        let vocab = Vocabulary::build(["router", "connects"], &specials).unwrap();
        let mut ps = ParamStore::new(0);
        let cfg = crate::backbone::EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 8,
            vocab_size: vocab.len(),
            max_len: 8,
            dropout_rate: 0.0,
            generator_layers: 1,
        };
        let bb = Backbone::new(&mut ps, cfg).unwrap();
        let els = vec![
            ("router".to_string(), Role::Entity),
            ("router".to_string(), Role::Relation),
            ("router".to_string(), Role::Entity),
        ];
        let v = ops::to_rows(&embed_elements(&bb, &vocab, &els, &mut Mode::Eval).unwrap()).unwrap();
        assert_eq!(v[0].len(), 8);
        assert_eq!(v[0], v[2]);
        assert_ne!(v[0], v[1]);
        assert!(wrap_element(" ", Role::Entity).is_err());
        assert_eq!(
            wrap_element("router", Role::Relation).unwrap().prompt_signature(),
            vec!["[REL]"]
        );
    }

    #[test]
    fn ke_loss_gradients() {
        let mut ps = ParamStore::new(2);
        let table = ps.normal("table", &[6, 4], 0.7).unwrap();
        let pool: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let positives = vec![KnowledgeTriple::new("a", "r", "b"), KnowledgeTriple::new("c", "s", "d")];
        let known: HashSet<TripleKey> = positives.iter().map(key).collect();
        let cfg = KeConfig {
            negatives: 3,
            ..Default::default()
        };
        let batch = build_batch(&positives, &pool, &known, &cfg, 5).unwrap();
        let row = |e: &(String, Role)| -> u32 {
            match (e.0.as_str(), e.1) {
                ("r", _) => 4,
                ("s", _) => 5,
                (s, _) => pool.iter().position(|p| p == s).unwrap() as u32,
            }
        };
        let report = check_gradients(
            &ps.named_vars(),
            || {
                ke_loss(&batch, &cfg, |els| {
                    let ids: Vec<u32> = els.iter().map(row).collect();
                    Ok(table.index_select(&ops::ids(&ids)?, 0)?)
                })
            },
            16,
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report.checks);
    }

    #[test]
    fn filtered_ranking() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let vecs = vec![vec![0.0], vec![1.0], vec![5.0]];
        let rels: BTreeMap<String, Vec<f64>> = [("r".to_string(), vec![1.0])].into();
        let known: HashSet<TripleKey> = [("a", "r", "a"), ("a", "r", "b")]
            .iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect();
        let q = KnowledgeTriple::new("a", "r", "b");
        let r = filtered_tail_ranks(&names, &vecs, &rels, &[q], &known).unwrap();
        assert_eq!(
            r[0],
            RankedQuery {
                rank: 1.0,
                candidates: 2
            }
        );
    }

    #[test]
    fn kg_tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kg.tsv");
        let rows = vec![
            (KnowledgeTriple::new("a", "r", "b"), None),
            (KnowledgeTriple::new("b", "r", "c"), Some(0.25)),
        ];
        write_kg_tsv(&p, &rows).unwrap();
        assert_eq!(read_kg_tsv(&p).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn loss_monotone(dp in 0.0f64..3.0, dn in proptest::collection::vec(0.0f64..3.0, 3), eps in 0.01f64..0.5, which in 0usize..3) {
            let cfg = KeConfig::default();
            let base = loss_of(&[dp], &dn, 3, &cfg);
            prop_assert!(loss_of(&[dp + eps], &dn, 3, &cfg) > base);
            let mut more = dn.clone();
            more[which] += eps;
            prop_assert!(loss_of(&[dp], &more, 3, &cfg) < base);
        }
    }
}
