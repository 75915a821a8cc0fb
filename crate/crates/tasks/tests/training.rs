use std::collections::HashSet;

use ktele_core::ke::{key, TripleKey};
use ktele_core::metrics::summarize_ranks;
use ktele_core::nn::{ops, Optimizer, ParamStore};
use ktele_tasks::fct::{hide_first_hops, EntityInit, FaultQuadruple, FctConfig, FctModel};
use ktele_tasks::kpi::{KpiSegment, VerticalTransformer, VtConfig};
use ktele_tasks::rca::{init_features, logistic_loss, root_ranks, NetworkStateGraph, RcaConfig, RcaModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A star of `n` nodes around a random hub; the root carries event 0 and
/// every other abnormal node only event 1.
fn rca_graph(rng: &mut ChaCha8Rng, n: usize) -> NetworkStateGraph {
    let hub = rng.random_range(0..n);
    let root = (hub + 1 + rng.random_range(0..n - 1)) % n;
    let mut counts = vec![(root, 0, rng.random_range(1..4))];
    for v in 0..n {
        if v != root && rng.random_bool(0.5) {
            counts.push((v, 1, rng.random_range(1..4)));
        }
    }
    NetworkStateGraph {
        nodes: (0..n).map(|i| format!("ne{i}")).collect(),
        edges: (0..n).filter(|&v| v != hub).map(|v| (hub, v)).collect(),
        num_events: 2,
        counts,
        roots: vec![root],
    }
}

#[test]
fn rca_scorer_learns_the_root_signature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graphs: Vec<NetworkStateGraph> = (0..40).map(|_| rca_graph(&mut rng, 6)).collect();
    let events = ops::mat(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
    let cfg = RcaConfig {
        gcn_dims: vec![2, 8, 8],
        scorer_hidden: 8,
        learning_rate: 1e-2,
        epochs: 40,
    };
    let mut ps = ParamStore::new(2);
    let model = RcaModel::new(&mut ps, &cfg).unwrap();
    let mut opt = Optimizer::new(ps.vars_with_prefix(&["rca."]), cfg.learning_rate, 0.0).unwrap();
    let (train, test) = graphs.split_at(30);
    for _ in 0..cfg.epochs {
        for g in train {
            let h0 = init_features(g, &events).unwrap();
            opt.step(&logistic_loss(&model.scores(g, &h0).unwrap(), &g.labels()).unwrap())
                .unwrap();
        }
    }
    let ranks: Vec<f64> = test
        .iter()
        .flat_map(|g| {
            let h0 = init_features(g, &events).unwrap();
            root_ranks(&ops::to_f64_vec(&model.scores(g, &h0).unwrap()).unwrap(), &g.roots)
        })
        .collect();
    let summary = summarize_ranks(&ranks, &[1]).unwrap();
    assert!(summary.hits[&1] >= 0.9, "{summary:?}");
}

#[test]
fn kpi_detector_finds_spikes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let segments: Vec<KpiSegment> = (0..60)
        .map(|_| {
            let labels: Vec<u8> = (0..8).map(|_| rng.random_bool(0.15) as u8).collect();
            let points = labels
                .iter()
                .map(|&y| {
                    let mut p: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
                    p[0] += 3.0 * y as f64;
                    p
                })
                .collect();
            KpiSegment::new(points, labels).unwrap()
        })
        .collect();
    let mut cfg = VtConfig::desk(3, 8);
    cfg.hidden_dim = 12;
    cfg.ffn_dim = 24;
    cfg.epochs = 40;
    let mut ps = ParamStore::new(4);
    let vt = VerticalTransformer::new(&mut ps, &cfg).unwrap();
    let (train, test) = segments.split_at(45);
    let history = vt.train(&ps, train, &cfg, 5).unwrap();
    assert!(history.last().unwrap() < &history[0]);
    let metrics = vt.evaluate(test).unwrap();
    assert!(
        metrics.point.recall >= 0.8 && metrics.point.precision >= 0.8,
        "{metrics:?}"
    );
}

/// Chains `c{k}_0 -> c{k}_1 -> ...` whose first hop is held out.
fn chains(count: usize, len: usize) -> Vec<Vec<FaultQuadruple>> {
    (0..count)
        .map(|k| {
            (0..len - 1)
                .map(|i| FaultQuadruple::new(&format!("c{k}_{i}"), "cause", &format!("c{k}_{}", i + 1), 1.0).unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn fct_initialisation_from_similar_vectors_helps_hidden_hops() {
    let chains = chains(6, 4);
    let (visible, hidden) = hide_first_hops(&chains);
    let names: Vec<String> = (0..6).flat_map(|k| (0..4).map(move |i| format!("c{k}_{i}"))).collect();
    let known: HashSet<TripleKey> = visible.iter().chain(&hidden).map(|q| key(&q.triple())).collect();
    let dim = 8;
    // Stand-in for encoder output: entities of one chain share a direction.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for _ in 0..6 {
        let centre: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..4 {
            vectors.push(centre.iter().map(|c| c + rng.random_range(-0.025..0.025)).collect());
        }
    }
    let mut cfg = FctConfig::desk(dim);
    cfg.epochs = 30;
    let mrr = |init: EntityInit| {
        let mut ps = ParamStore::new(9);
        let model = FctModel::new(&mut ps, names.clone(), vec!["cause".into()], dim, &init).unwrap();
        model.train(&ps, &visible, &cfg, 11).unwrap();
        model.evaluate(&hidden, &known).unwrap().mrr
    };
    let (informed, uniform) = (mrr(EntityInit::Vectors(vectors)), mrr(EntityInit::Uniform));
    assert!(informed > uniform + 0.1, "{informed} vs {uniform}");
}
