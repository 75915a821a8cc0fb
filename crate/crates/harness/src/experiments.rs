//! Self-contained training experiments used by the acceptance suite.

use ktele_core::anenc::{loss_nc, loss_reg, Anenc, AnencConfig};
use ktele_core::metrics::spearman;
use ktele_core::nn::{ops, Optimizer, ParamStore};
use ktele_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct OrderingConfig {
    pub seed: u64,
    pub steps: usize,
    pub hidden_dim: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub with_nc: bool,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 2000,
            hidden_dim: 32,
            batch: 32,
            learning_rate: 1e-3,
            with_nc: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OrderingOutcome {
    pub spearman: f64,
    pub untrained_spearman: f64,
    pub final_loss: f64,
}

/// Spearman correlation between value gaps and embedding cosine distances
/// over all pairs of an evenly spaced 50-value grid.
fn grid_ordering(enc: &Anenc, tag: &candle_core::Tensor, hidden_dim: usize) -> Result<f64> {
    let grid: Vec<f64> = (0..50).map(|i| (i as f64 + 0.5) / 50.0).collect();
    let t = tag.broadcast_as((grid.len(), hidden_dim))?.contiguous()?;
    let h = ops::to_rows(&ops::l2_normalize_rows(&enc.forward(&ops::vec1(&grid)?, &t)?.h)?)?;
    let (mut gaps, mut dists) = (Vec::new(), Vec::new());
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            gaps.push((grid[i] - grid[j]).abs());
            let cos: f64 = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum();
            dists.push(1.0 - cos);
        }
    }
    spearman(&gaps, &dists)
}

/// Trains the numeric encoder on one tag with regression plus, optionally,
/// the contrastive ordering loss, on uniformly drawn values.
pub fn anenc_ordering(cfg: &OrderingConfig) -> Result<OrderingOutcome> {
    let mut ps = ParamStore::new(cfg.seed);
    let acfg = AnencConfig::new(cfg.hidden_dim, vec!["throughput".into()]);
    let enc = Anenc::new(&mut ps, acfg.clone())?;
    let tag = ps.normal("tag", &[1, cfg.hidden_dim], 1.0)?;
    let untrained_spearman = grid_ordering(&enc, &tag, cfg.hidden_dim)?;
    let mut opt = Optimizer::new(ps.vars_with_prefix(&["anenc."]), cfg.learning_rate, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let values: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let t = tag.broadcast_as((cfg.batch, cfg.hidden_dim))?.contiguous()?;
        let out = enc.forward(&ops::vec1(&values)?, &t)?;
        let mut loss = loss_reg(&enc.decode(&out.h)?, &ops::vec1(&values)?)?;
        if cfg.with_nc {
            loss = (loss + loss_nc(&out.h, &values, None, acfg.nc_temperature)?)?;
        }
        final_loss = opt.step(&loss)?;
    }
    Ok(OrderingOutcome {
        spearman: grid_ordering(&enc, &tag, cfg.hidden_dim)?,
        untrained_spearman,
        final_loss,
    })
}

#[derive(Clone, Debug)]
pub struct KeOutcome {
    pub hits_at_10: f64,
    pub random_expectation: f64,
    pub train_triples: usize,
    pub test_triples: usize,
}

/// Entities `e0..e{n-1}` on a line; relation `r{k}` links `e{i}` to `e{i+k}`.
pub fn planted_line_kg(entities: usize, relations: usize) -> Vec<ktele_core::corpus::KnowledgeTriple> {
    let mut out = Vec::new();
    for k in 1..=relations {
        for i in 0..entities.saturating_sub(k) {
            out.push(ktele_core::corpus::KnowledgeTriple::new(
                format!("e{i}"),
                format!("r{k}"),
                format!("e{}", i + k),
            ));
        }
    }
    out
}

/// Trains backbone-encoded TransE on 80% of the planted KG and reports
/// filtered tail Hits@10 on the remainder.
pub fn ke_learnability(seed: u64, steps: usize) -> Result<KeOutcome> {
    use ktele_core::backbone::{Backbone, EncoderConfig};
    use ktele_core::corpus::SpecialTokenSet;
    use ktele_core::ke::{self, KeConfig, Role};
    use ktele_core::nn::Mode;
    use ktele_core::tokenizer::Vocabulary;
    use rand::seq::SliceRandom;
    use std::collections::{BTreeMap, HashSet};

    let triples = planted_line_kg(20, 3);
    let entities: Vec<String> = (0..20).map(|i| format!("e{i}")).collect();
    let relations: Vec<String> = (1..=3).map(|k| format!("r{k}")).collect();
    let vocab = Vocabulary::build(
        entities.iter().chain(&relations),
        &SpecialTokenSet::new(Default::default(), &Default::default())?,
    )?;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = triples.len() * 4 / 5;
    let train: Vec<_> = order[..cut].iter().map(|&i| triples[i].clone()).collect();
    let test: Vec<_> = order[cut..].iter().map(|&i| triples[i].clone()).collect();
    let known: HashSet<ke::TripleKey> = triples.iter().map(ke::key).collect();
    let train_known: HashSet<ke::TripleKey> = train.iter().map(ke::key).collect();

    let mut ps = ParamStore::new(seed);
    let ecfg = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 32,
        ffn_dim: 64,
        vocab_size: vocab.len(),
        max_len: 8,
        dropout_rate: 0.0,
        generator_layers: 1,
    };
    let bb = Backbone::new(&mut ps, ecfg)?;
    let kcfg = KeConfig::default();
    let mut opt = Optimizer::new(ps.vars_with_prefix(&["backbone."]), 1e-3, 0.0)?;
    let batch = 16;
    for step in 0..steps {
        let pos: Vec<_> = (0..batch)
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let tb = ke::build_batch(&pos, &entities, &train_known, &kcfg, seed.wrapping_add(step as u64))?;
        let loss = ke::ke_loss(&tb, &kcfg, |els| {
            ke::embed_elements(&bb, &vocab, els, &mut Mode::Train(&mut rng))
        })?;
        opt.step(&loss)?;
    }
    let ent_els: Vec<(String, Role)> = entities.iter().map(|e| (e.clone(), Role::Entity)).collect();
    let rel_els: Vec<(String, Role)> = relations.iter().map(|r| (r.clone(), Role::Relation)).collect();
    let ev = ops::to_rows(&ke::embed_elements(&bb, &vocab, &ent_els, &mut Mode::Eval)?)?;
    let rv = ops::to_rows(&ke::embed_elements(&bb, &vocab, &rel_els, &mut Mode::Eval)?)?;
    let rel_map: BTreeMap<String, Vec<f64>> = relations.iter().cloned().zip(rv).collect();
    let ranked = ke::filtered_tail_ranks(&entities, &ev, &rel_map, &test, &known)?;
    let n = ranked.len() as f64;
    Ok(KeOutcome {
        hits_at_10: ranked.iter().filter(|r| r.rank <= 10.0).count() as f64 / n,
        random_expectation: ranked
            .iter()
            .map(|r| ktele_core::metrics::random_hits_expectation(r.candidates, 10))
            .sum::<f64>()
            / n,
        train_triples: train.len(),
        test_triples: test.len(),
    })
}
