//! One function per CLI subcommand. Each reads and writes under the
//! configured output directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ktele_core::schedule::{LogRow, TaskKind};
use ktele_core::{Error, Result};
use serde::Serialize;

use crate::config::{EncoderKind, ExperimentConfig};
use crate::eval::{evaluate, Task};
use crate::pipeline::{pretrain as run_pretrain, retrain as run_retrain, wrap_kpi, KteleModel, ModelManifest};
use crate::report::{export_embedding_report, MetricsReport};
use crate::service::{encode_service_vectors, EntityIndex, ServiceEncoder, ServiceFormat};
use crate::synth::{generate, SyntheticData};

/// Seed offsets keep stages decorrelated while depending only on the config seed.
const PRETRAIN_SEED: u64 = 1;
const RETRAIN_SEED: u64 = 2;
const EVAL_SEED: u64 = 3;

pub fn gen_synthetic(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    let data = generate(&cfg.synthetic, cfg.seed)?;
    data.write(&cfg.data_dir())?;
    Ok(data)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    let dir = cfg.data_dir();
    if !dir.join("corpus.jsonl").exists() {
        return Err(Error::Config(format!(
            "no data in {}; run gen-synthetic first",
            dir.display()
        )));
    }
    SyntheticData::read(&dir)
}

fn tail_mean(rows: &[&LogRow], n: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(n)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}

fn checkpoint_path(cfg: &ExperimentConfig, kind: EncoderKind) -> Result<PathBuf> {
    cfg.checkpoint(kind)
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no checkpoint", kind.as_str())))
}

/// Stage-one pre-training from scratch; writes the backbone checkpoint.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let data = load_data(cfg)?;
    let manifest = ModelManifest::prepare(&data, &cfg.model)?;
    let model = KteleModel::new(manifest, cfg.seed)?;
    let seqs = model.wrap_corpus(&data.corpus)?;
    let history = run_pretrain(&model, &seqs, &cfg.pretrain, cfg.seed.wrapping_add(PRETRAIN_SEED))?;
    model.save(&checkpoint_path(cfg, EncoderKind::Backbone)?)?;
    let n = history.len();
    let tail = &history[n.saturating_sub(20)..];
    let mut values = BTreeMap::from([
        ("steps".to_string(), n as f64),
        ("vocabulary".to_string(), model.vocab.len() as f64),
        ("tele_tokens".to_string(), model.manifest.tele_tokens.len() as f64),
    ]);
    if let Some(first) = history.first() {
        values.insert("loss_first".into(), first.loss);
        values.insert(
            "loss_last".into(),
            tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64,
        );
        for key in first.components.keys() {
            let v = tail.iter().map(|s| s.components[key]).sum::<f64>() / tail.len() as f64;
            values.insert(format!("{key}_last"), v);
        }
    }
    let report = MetricsReport::from_folds("pretrain", EncoderKind::Backbone.as_str(), cfg.seed, vec![values])?;
    report.write_json(&cfg.reports_dir().join("pretrain.json"))?;
    Ok(report)
}

#[derive(Serialize)]
struct RetrainLogFile<'a> {
    plan: &'a ktele_core::schedule::TrainingPlan,
    rows: &'a [LogRow],
}

/// Multi-task re-training from the backbone checkpoint. With the numeric
/// encoder disabled the result is stored as `ktele_no_anenc`.
pub fn retrain(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let data = load_data(cfg)?;
    let backbone_path = checkpoint_path(cfg, EncoderKind::Backbone)?;
    if !backbone_path.exists() {
        return Err(Error::Config(format!(
            "{} missing; run pretrain first",
            backbone_path.display()
        )));
    }
    let kind = if cfg.retrain.anenc {
        EncoderKind::Ktele
    } else {
        EncoderKind::KteleNoAnenc
    };
    let seed = cfg.seed.wrapping_add(RETRAIN_SEED);
    let model = KteleModel::load(&backbone_path)?.derive(kind, cfg.retrain.anenc, seed)?;
    let seqs = model.wrap_corpus(&data.corpus)?;
    let out = run_retrain(&model, &seqs, &data.kg, &cfg.retrain, seed)?;
    model.save(&checkpoint_path(cfg, kind)?)?;

    let mut values = BTreeMap::new();
    for (task, name) in [
        (TaskKind::Mask, "mask"),
        (TaskKind::Ke, "ke"),
        (TaskKind::Joint, "joint"),
    ] {
        let rows: Vec<&LogRow> = out.log.rows.iter().filter(|r| r.task == task).collect();
        values.insert(format!("{name}_steps"), rows.len() as f64);
        if !rows.is_empty() {
            values.insert(format!("{name}_loss_last"), tail_mean(&rows, 20));
        }
    }
    for stage in &out.plan.stages {
        values.insert(
            format!("stage{}_mask", stage.stage_id),
            out.log.count(stage.stage_id, TaskKind::Mask) as f64,
        );
        values.insert(
            format!("stage{}_ke", stage.stage_id),
            out.log.count(stage.stage_id, TaskKind::Ke) as f64,
        );
    }
    let kg = model.kg_ranking(&data.kg)?;
    values.extend(crate::report::ranking_values(&kg, kg_entities(&data)));
    let report = MetricsReport::from_folds("retrain", kind.as_str(), cfg.seed, vec![values])?;
    let reports = cfg.reports_dir();
    report.write_json(&reports.join(format!("retrain_{}.json", kind.as_str())))?;
    let log = RetrainLogFile {
        plan: &out.plan,
        rows: &out.log.rows,
    };
    std::fs::write(
        reports.join(format!("retrain_{}_log.json", kind.as_str())),
        serde_json::to_string(&log)? + "\n",
    )?;
    Ok(report)
}

fn kg_entities(data: &SyntheticData) -> usize {
    EntityIndex::from_triples(&data.kg).len()
}

pub fn load_encoder(cfg: &ExperimentConfig, kind: EncoderKind) -> Result<ServiceEncoder> {
    match kind {
        EncoderKind::Random => Ok(ServiceEncoder::Random {
            dim: cfg.model.hidden_dim,
            seed: cfg.seed,
        }),
        _ => {
            let path = checkpoint_path(cfg, kind)?;
            if !path.exists() {
                let hint = if kind == EncoderKind::Backbone {
                    "pretrain"
                } else {
                    "retrain"
                };
                return Err(Error::Config(format!("{} missing; run {hint} first", path.display())));
            }
            Ok(ServiceEncoder::Model(Box::new(KteleModel::load(&path)?)))
        }
    }
}

pub fn eval(cfg: &ExperimentConfig, task: Task, kind: EncoderKind) -> Result<MetricsReport> {
    let data = load_data(cfg)?;
    let encoder = load_encoder(cfg, kind)?;
    let report = evaluate(
        task,
        &data,
        &encoder,
        &cfg.tasks,
        cfg.seed.wrapping_add(EVAL_SEED),
        kind.as_str(),
    )?;
    report.write_json(&cfg.reports_dir().join(format!("eval_{task}_{}.json", kind.as_str())))?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EncodedNames {
    pub format: String,
    pub encoder: String,
    pub names: Vec<String>,
    /// Names that matched no KG entity and were encoded bare.
    pub fell_back: Vec<bool>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn encode(
    cfg: &ExperimentConfig,
    kind: EncoderKind,
    format: ServiceFormat,
    names: Vec<String>,
) -> Result<EncodedNames> {
    let data = load_data(cfg)?;
    let encoder = load_encoder(cfg, kind)?;
    let kg = EntityIndex::from_triples(&data.kg);
    let (vectors, fell_back) = encode_service_vectors(&names, format, &kg, &data.entity_attributes, &encoder)?;
    Ok(EncodedNames {
        format: format.to_string(),
        encoder: kind.as_str().into(),
        names,
        fell_back,
        vectors,
    })
}

/// PCA reports: KPI points coloured by anomaly label, and, for models with a
/// numeric encoder, value embeddings of every tag coloured by value.
pub fn embedding_reports(cfg: &ExperimentConfig, kind: EncoderKind) -> Result<Vec<PathBuf>> {
    let data = load_data(cfg)?;
    let encoder = load_encoder(cfg, kind)?;
    let dir = cfg.reports_dir();
    let mut written = Vec::new();
    let seqs: Vec<_> = wrap_kpi(&data, &encoder.stats())?.into_iter().flatten().collect();
    let labels: Vec<f64> = data
        .kpi
        .iter()
        .flat_map(|s| s.point_labels.iter().map(|&y| y as f64))
        .collect();
    let (csv, png) = export_embedding_report(
        &encoder.encode(&seqs)?,
        &labels,
        &dir.join(format!("kpi_points_{}", kind.as_str())),
    )?;
    written.extend([csv, png]);
    if let ServiceEncoder::Model(model) = &encoder {
        if let Some(anenc) = &model.anenc {
            for tag in model.stats().tags.keys() {
                let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
                let tags = ktele_core::anenc::Anenc::tag_embeddings(
                    &vec![tag.as_str(); grid.len()],
                    &model.backbone.encoder.embeddings,
                    &model.vocab,
                )?;
                let h = anenc.forward(&ktele_core::nn::ops::vec1(&grid)?, &tags)?.h;
                let stem = dir.join(format!("values_{}_{}", kind.as_str(), tag.replace(' ', "_")));
                let (csv, png) = export_embedding_report(&ktele_core::nn::ops::to_rows(&h)?, &grid, &stem)?;
                written.extend([csv, png]);
            }
        }
    }
    Ok(written)
}

/// Dataset sizes, reported after generation.
pub fn dataset_report(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<MetricsReport> {
    let anomalous = data
        .kpi
        .iter()
        .flat_map(|s| &s.point_labels)
        .filter(|&&y| y == 1)
        .count();
    let points: usize = data.kpi.iter().map(|s| s.point_labels.len()).sum();
    let values = BTreeMap::from([
        ("corpus_records".to_string(), data.corpus.len() as f64),
        ("kg_triples".to_string(), data.kg.len() as f64),
        ("rca_graphs".to_string(), data.rca_graphs.len() as f64),
        ("eap_pairs".to_string(), data.eap_pairs.len() as f64),
        ("fct_chains".to_string(), data.fct_chains.len() as f64),
        ("kpi_segments".to_string(), data.kpi.len() as f64),
        ("kpi_anomaly_rate".to_string(), anomalous as f64 / points.max(1) as f64),
    ]);
    let report = MetricsReport::from_folds("gen-synthetic", "none", cfg.seed, vec![values])?;
    report.write_json(&cfg.reports_dir().join("dataset.json"))?;
    Ok(report)
}
