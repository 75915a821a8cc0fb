//! K-fold evaluation of the four downstream tasks on service vectors.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use ktele_core::ke::{key, TripleKey};
use ktele_core::metrics::{classification_metrics, kfold_split, rotations, summarize_ranks, FoldAssignment};
use ktele_core::nn::{ops, Optimizer, ParamStore};
use ktele_core::{Error, Result};
use ktele_tasks::eap::{EapBatch, EapModel, EventPairSample};
use ktele_tasks::fct::{EntityInit, FaultQuadruple, FctModel, RuleFilter};
use ktele_tasks::kpi::{KpiSegment, VerticalTransformer};
use ktele_tasks::rca::{init_features, logistic_loss, root_ranks, RcaModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TaskSettings;
use crate::pipeline::wrap_kpi;
use crate::report::{classification_values, ranking_values, MetricsReport};
use crate::service::ServiceEncoder;
use crate::synth::SyntheticData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rca,
    Eap,
    Fct,
    Kpi,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rca, Task::Eap, Task::Fct, Task::Kpi];
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rca" => Ok(Self::Rca),
            "eap" => Ok(Self::Eap),
            "fct" => Ok(Self::Fct),
            "kpi" => Ok(Self::Kpi),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rca => "rca",
            Self::Eap => "eap",
            Self::Fct => "fct",
            Self::Kpi => "kpi",
        })
    }
}

type FoldValues = BTreeMap<String, f64>;

/// Runs `f` on every rotation of a seeded k-fold split. Folds are independent,
/// so running them on the thread pool does not change the results.
fn run_folds<F>(n: usize, settings: &TaskSettings, seed: u64, f: F) -> Result<Vec<FoldValues>>
where
    F: Fn(usize, &FoldAssignment) -> Result<FoldValues> + Sync,
{
    let assignments = rotations(&kfold_split(n, settings.folds, seed)?);
    if settings.parallel {
        assignments.par_iter().enumerate().map(|(i, a)| f(i, a)).collect()
    } else {
        assignments.iter().enumerate().map(|(i, a)| f(i, a)).collect()
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64 + 1)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    ops::mat(&rows.concat(), rows.len(), d)
}

pub fn evaluate(
    task: Task,
    data: &SyntheticData,
    encoder: &ServiceEncoder,
    settings: &TaskSettings,
    seed: u64,
    encoder_name: &str,
) -> Result<MetricsReport> {
    let folds = match task {
        Task::Rca => eval_rca(data, encoder, settings, seed)?,
        Task::Eap => eval_eap(data, encoder, settings, seed)?,
        Task::Fct => eval_fct(data, encoder, settings, seed)?,
        Task::Kpi => eval_kpi(data, encoder, settings, seed)?,
    };
    MetricsReport::from_folds(&task.to_string(), encoder_name, seed, folds)
}

/// Root ranking on network-state graphs. Each fold keeps the epoch with the
/// best validation mean rank.
pub fn eval_rca(
    data: &SyntheticData,
    encoder: &ServiceEncoder,
    settings: &TaskSettings,
    seed: u64,
) -> Result<Vec<FoldValues>> {
    let events = matrix(&encoder.names(&data.rca_events)?)?;
    let graphs = &data.rca_graphs;
    let features = graphs
        .iter()
        .map(|g| init_features(g, &events))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = settings.rca.clone();
    cfg.gcn_dims[0] = encoder.dim();
    run_folds(graphs.len(), settings, seed, |fold, a| {
        let mut ps = ParamStore::new(fold_seed(seed, fold));
        let model = RcaModel::new(&mut ps, &cfg)?;
        let mut opt = Optimizer::new(ps.vars_with_prefix(&["rca."]), cfg.learning_rate, 0.0)?;
        let ranks = |idx: &[usize]| -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for &i in idx {
                let s = ops::to_f64_vec(&model.scores(&graphs[i], &features[i])?)?;
                out.extend(root_ranks(&s, &graphs[i].roots));
            }
            Ok(out)
        };
        let mut best = (f64::INFINITY, Vec::new());
        for _ in 0..cfg.epochs {
            let losses = a
                .train
                .iter()
                .map(|&i| logistic_loss(&model.scores(&graphs[i], &features[i])?, &graphs[i].labels()))
                .collect::<Result<Vec<_>>>()?;
            let loss = (Tensor::stack(&losses, 0)?.sum_all()? / a.train.len() as f64)?;
            opt.step(&loss)?;
            let valid = ranks(&a.valid)?;
            let mr = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
            if mr < best.0 {
                best = (mr, ranks(&a.test)?);
            }
        }
        let max_rank = a.test.iter().map(|&i| graphs[i].nodes.len()).max().unwrap_or(1);
        Ok(ranking_values(&summarize_ranks(&best.1, &[1, 3, 5])?, max_rank))
    })
}

fn eap_metrics(
    model: &EapModel,
    events: &Tensor,
    data: &SyntheticData,
    batch: &EapBatch,
    labels: &[bool],
) -> Result<FoldValues> {
    let preds = model.predict(events, &data.eap_graph, batch)?;
    Ok(classification_values("", &classification_metrics(&preds, labels)?))
}

/// Pairwise trigger classification. A negative shares its source positive's
/// network elements and timestamps, so folds are drawn over such groups to
/// keep the twins together. Each fold keeps the epoch with the best
/// validation accuracy.
pub fn eval_eap(
    data: &SyntheticData,
    encoder: &ServiceEncoder,
    settings: &TaskSettings,
    seed: u64,
) -> Result<Vec<FoldValues>> {
    let events = matrix(&encoder.names(&data.eap_events)?)?;
    let index: BTreeMap<String, usize> = data.eap_events.iter().cloned().zip(0..).collect();
    let mut cfg = settings.eap.clone();
    cfg.event_dim = encoder.dim();
    let pairs = &data.eap_pairs;
    let mut groups: BTreeMap<(usize, usize, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry((p.ne_i, p.ne_j, p.t_i, p.t_j)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    run_folds(groups.len(), settings, seed, |fold, a| {
        let pick = |idx: &[usize]| -> Result<(EapBatch, Vec<bool>)> {
            let s: Vec<EventPairSample> = idx
                .iter()
                .flat_map(|&g| &groups[g])
                .map(|&i| pairs[i].clone())
                .collect();
            Ok((EapBatch::new(&s, &index)?, s.iter().map(|p| p.label == 1).collect()))
        };
        let (train, _) = pick(&a.train)?;
        let (valid, valid_y) = pick(&a.valid)?;
        let (test, test_y) = pick(&a.test)?;
        let mut ps = ParamStore::new(fold_seed(seed, fold));
        let model = EapModel::new(&mut ps, &cfg, data.eap_graph.len())?;
        let mut opt = Optimizer::new(ps.vars_with_prefix(&["eap."]), cfg.learning_rate, 0.0)?;
        let mut best: Option<(f64, FoldValues)> = None;
        for _ in 0..cfg.epochs {
            opt.step(&model.loss(&events, &data.eap_graph, &train)?)?;
            let acc = eap_metrics(&model, &events, data, &valid, &valid_y)?["accuracy"];
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, eap_metrics(&model, &events, data, &test, &test_y)?));
            }
        }
        best.map(|(_, m)| m)
            .ok_or_else(|| Error::Config("EAP needs at least one epoch".into()))
    })
}

/// Fault-chain completion: the first hop of every test chain is hidden and
/// its tail ranked among all entities.
pub fn eval_fct(
    data: &SyntheticData,
    encoder: &ServiceEncoder,
    settings: &TaskSettings,
    seed: u64,
) -> Result<Vec<FoldValues>> {
    let filter = RuleFilter::new(["cause"]);
    let chains: Vec<Vec<FaultQuadruple>> = data
        .fct_chains
        .iter()
        .map(|c| filter.apply(c))
        .filter(|c| !c.is_empty())
        .collect();
    let facts: Vec<FaultQuadruple> = chains
        .iter()
        .flatten()
        .cloned()
        .chain(filter.apply(&data.fct_noise))
        .collect();
    let entities: Vec<String> = facts
        .iter()
        .flat_map(|q| [q.head.clone(), q.tail.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let relations: Vec<String> = facts
        .iter()
        .map(|q| q.relation.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let init = match encoder {
        ServiceEncoder::Random { .. } => EntityInit::Uniform,
        ServiceEncoder::Model(_) => EntityInit::Vectors(encoder.names(&entities)?),
    };
    let known: HashSet<TripleKey> = facts.iter().map(|q| key(&q.triple())).collect();
    let mut cfg = settings.fct.clone();
    cfg.dim = encoder.dim();
    run_folds(chains.len(), settings, seed, |fold, a| {
        let held_out: HashSet<TripleKey> = a
            .valid
            .iter()
            .chain(&a.test)
            .map(|&c| key(&chains[c][0].triple()))
            .collect();
        let train: Vec<FaultQuadruple> = facts
            .iter()
            .filter(|q| !held_out.contains(&key(&q.triple())))
            .cloned()
            .collect();
        let queries: Vec<FaultQuadruple> = a.test.iter().map(|&c| chains[c][0].clone()).collect();
        let mut ps = ParamStore::new(fold_seed(seed, fold));
        let model = FctModel::new(&mut ps, entities.clone(), relations.clone(), cfg.dim, &init)?;
        model.train(&ps, &train, &cfg, fold_seed(seed, fold))?;
        Ok(ranking_values(&model.evaluate(&queries, &known)?, entities.len()))
    })
}

/// Per-dimension z-scoring fitted on training points. Pooled vectors share a
/// large common component, and the detector learns far faster once it is
/// removed.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit<'a, I: Iterator<Item = &'a Vec<f64>>>(points: I) -> Self {
        let rows: Vec<&Vec<f64>> = points.collect();
        let n = rows.len().max(1) as f64;
        let d = rows.first().map_or(0, |r| r.len());
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, s: &KpiSegment) -> Result<KpiSegment> {
        let points = s
            .points()
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((x, m), sd)| (x - m) / sd)
                    .collect()
            })
            .collect();
        KpiSegment::new(points, s.point_labels().to_vec())
    }
}

/// Point and segment anomaly detection over per-point service vectors.
pub fn eval_kpi(
    data: &SyntheticData,
    encoder: &ServiceEncoder,
    settings: &TaskSettings,
    seed: u64,
) -> Result<Vec<FoldValues>> {
    let segments = wrap_kpi(data, &encoder.stats())?
        .iter()
        .zip(&data.kpi)
        .map(|(rows, seg)| KpiSegment::new(encoder.encode(rows)?, seg.point_labels.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = settings.kpi.clone();
    cfg.input_dim = encoder.dim();
    cfg.max_len = cfg.max_len.max(segments.iter().map(KpiSegment::len).max().unwrap_or(1));
    run_folds(segments.len(), settings, seed, |fold, a| {
        let scaler = Standardizer::fit(a.train.iter().flat_map(|&i| segments[i].points()));
        let pick =
            |idx: &[usize]| -> Result<Vec<KpiSegment>> { idx.iter().map(|&i| scaler.apply(&segments[i])).collect() };
        let train = pick(&a.train)?;
        let test = pick(&a.test)?;
        let mut ps = ParamStore::new(fold_seed(seed, fold));
        let model = VerticalTransformer::new(&mut ps, &cfg)?;
        model.train(&ps, &train, &cfg, fold_seed(seed, fold))?;
        let m = model.evaluate(&test)?;
        let mut out = classification_values("point", &m.point);
        out.extend(classification_values("segment", &m.segment));
        Ok(out)
    })
}
