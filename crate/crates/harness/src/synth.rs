//! Deterministic synthetic tele data for every stage of the pipeline.
//!
//! Structure planted per dataset:
//! * knowledge graph: sites on a line with `uplink to` (+1), `backup to`
//!   (+2) and their composition `reaches` (+3);
//! * root-cause graphs: the root carries one root-cause event drawn from many
//!   name variants of a few fault families, so unseen variants share words
//!   with seen ones;
//! * event pairs: triggers follow a hidden DAG and come with small time gaps;
//! * fault chains: per-board alarm templates whose entity names share the
//!   board word;
//! * KPI segments: per-tag sinusoidal baselines with injected spikes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ktele_core::corpus::{
    read_corpus, write_corpus, AttrValue, CorpusRecord, KnowledgeTriple, MachineLogRow, Modality,
};
use ktele_core::ke::{read_kg_tsv, write_kg_tsv};
use ktele_core::{Error, Result};
use ktele_tasks::eap::{generate_negatives, read_pairs, write_pairs, EventPairSample, NeGraph};
use ktele_tasks::fct::{read_quadruples, write_quadruples, FaultQuadruple};
use ktele_tasks::kpi::{read_kpi_csv, write_kpi_csv, RawKpiSegment};
use ktele_tasks::rca::{read_graphs, write_graphs, NetworkStateGraph};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SYMPTOMS: [&str; 8] = [
    "link down",
    "packet loss high",
    "port flap",
    "bgp session down",
    "service degraded",
    "latency high",
    "optical power low",
    "cpu usage high",
];

pub const ROOT_FAMILIES: [&str; 4] = [
    "power supply failure",
    "fan module fault",
    "clock source lost",
    "main board reset",
];

const EXTRA_ALARMS: [&str; 12] = [
    "fiber cut",
    "board offline",
    "power input abnormal",
    "temperature too high",
    "memory overflow",
    "license expired",
    "ntp sync failed",
    "dns timeout",
    "config mismatch",
    "heartbeat lost",
    "disk full",
    "voltage low",
];

const CHAIN_TEMPLATES: [[&str; 4]; 4] = [
    [
        "power supply failure",
        "board offline",
        "link down",
        "service interrupted",
    ],
    ["fiber cut", "optical signal lost", "link down", "packet loss high"],
    [
        "fan module fault",
        "temperature too high",
        "board reset",
        "service degraded",
    ],
    ["clock source lost", "clock sync failed", "frame loss", "latency high"],
];

pub const KPI_TAGS: [&str; 3] = ["cpu usage", "memory usage", "packet loss rate"];

/// Words treated as general language; everything else in the corpus is
/// domain vocabulary.
const GENERAL_WORDS: [&str; 40] = [
    "the",
    "a",
    "an",
    "is",
    "are",
    "on",
    "to",
    "by",
    "of",
    "when",
    "after",
    "and",
    "then",
    "check",
    "leads",
    "causes",
    "results",
    "in",
    "triggers",
    "reported",
    "alarm",
    "indicates",
    "fault",
    "occurs",
    "high",
    "low",
    "down",
    "up",
    "lost",
    "state",
    "active",
    "standby",
    "failure",
    "service",
    "power",
    "board",
    "link",
    "loss",
    "source",
    "time",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub sentences: usize,
    pub log_rows: usize,
    pub kg_entities: usize,
    pub rca_graphs: usize,
    pub rca_min_nodes: usize,
    pub rca_max_nodes: usize,
    pub rca_root_variants: usize,
    pub eap_nodes: usize,
    pub eap_positives: usize,
    pub fct_chains: usize,
    pub kpi_segments: usize,
    pub kpi_length: usize,
    /// Probability that a KPI segment contains injected spikes.
    pub kpi_anomaly_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sentences: 300,
            log_rows: 300,
            kg_entities: 20,
            rca_graphs: 60,
            rca_min_nodes: 8,
            rca_max_nodes: 12,
            rca_root_variants: 25,
            eap_nodes: 12,
            eap_positives: 160,
            fct_chains: 40,
            kpi_segments: 200,
            kpi_length: 12,
            kpi_anomaly_rate: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.sentences,
            self.log_rows,
            self.kg_entities,
            self.rca_graphs,
            self.rca_min_nodes,
            self.rca_root_variants,
            self.eap_nodes,
            self.eap_positives,
            self.fct_chains,
            self.kpi_segments,
            self.kpi_length,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.rca_min_nodes < 2 || self.rca_max_nodes < self.rca_min_nodes {
            return Err(Error::Config("RCA node range must satisfy 2 <= min <= max".into()));
        }
        if self.kg_entities < 4 {
            return Err(Error::Config("the planted KG needs at least 4 entities".into()));
        }
        if !(0.0..=1.0).contains(&self.kpi_anomaly_rate) {
            return Err(Error::Config("kpi_anomaly_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub general_words: Vec<String>,
    pub lexicon: Vec<String>,
    pub corpus: Vec<CorpusRecord>,
    pub kg: Vec<KnowledgeTriple>,
    pub entity_attributes: BTreeMap<String, Vec<(String, AttrValue)>>,
    pub rca_events: Vec<String>,
    pub rca_graphs: Vec<NetworkStateGraph>,
    pub eap_events: Vec<String>,
    pub eap_graph: NeGraph,
    pub eap_pairs: Vec<EventPairSample>,
    pub fct_chains: Vec<Vec<FaultQuadruple>>,
    pub fct_noise: Vec<FaultQuadruple>,
    pub kpi: Vec<RawKpiSegment>,
}

/// Sites on a line: `uplink to` joins `i → i+1`, `backup to` joins
/// `i → i+2` and `reaches` joins `i → i+3`, the composition of the two.
pub fn planted_kg(entities: usize) -> Vec<KnowledgeTriple> {
    let mut out = Vec::new();
    for (k, rel) in [(1, "uplink to"), (2, "backup to"), (3, "reaches")] {
        for i in 0..entities.saturating_sub(k) {
            out.push(KnowledgeTriple::new(format!("site{i}"), rel, format!("site{}", i + k)));
        }
    }
    out
}

fn random_tree(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges: BTreeSet<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges.into_iter().collect()
}

pub fn rca_event_names(variants: usize) -> Vec<String> {
    let mut names: Vec<String> = SYMPTOMS.iter().map(|s| s.to_string()).collect();
    for fam in ROOT_FAMILIES {
        names.extend((0..variants).map(|v| format!("{fam} unit{v}")));
    }
    names
}

/// Expected event count of a node by role, used by the generator and its
/// property test.
pub fn rca_expected_counts() -> (f64, f64, f64) {
    // root: root event 2.5 + two symptom types at 1.5; neighbour: 0.9 * 1.5 * 2;
    // other: 0.7 * 1.5 * 1.5 (one or two symptom types).
    (2.5 + 3.0, 0.9 * 3.0, 0.7 * 1.5 * 1.5)
}

fn rca_graph(spec: &SyntheticSpec, events: &[String], rng: &mut ChaCha8Rng) -> NetworkStateGraph {
    let n = rng.random_range(spec.rca_min_nodes..=spec.rca_max_nodes);
    let edges = random_tree(n, 2, rng);
    let root = rng.random_range(0..n);
    let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut add = |v: usize, e: usize, c: u32| *counts.entry((v, e)).or_default() += c;
    let symptom = |rng: &mut ChaCha8Rng| rng.random_range(0..SYMPTOMS.len());
    let neighbours: BTreeSet<usize> = edges
        .iter()
        .filter_map(|&(a, b)| {
            if a == root {
                Some(b)
            } else if b == root {
                Some(a)
            } else {
                None
            }
        })
        .collect();
    for v in 0..n {
        if v == root {
            let fam = rng.random_range(0..ROOT_FAMILIES.len());
            let var = rng.random_range(0..spec.rca_root_variants);
            add(
                v,
                SYMPTOMS.len() + fam * spec.rca_root_variants + var,
                rng.random_range(2..=3),
            );
            for _ in 0..2 {
                let s = symptom(rng);
                add(v, s, rng.random_range(1..=2));
            }
        } else if neighbours.contains(&v) {
            if rng.random_bool(0.9) {
                for _ in 0..2 {
                    let s = symptom(rng);
                    add(v, s, rng.random_range(1..=2));
                }
            }
        } else if rng.random_bool(0.7) {
            for _ in 0..rng.random_range(1..=2) {
                let s = symptom(rng);
                add(v, s, rng.random_range(1..=2));
            }
        }
    }
    NetworkStateGraph {
        nodes: (0..n).map(|i| format!("ne{i}")).collect(),
        edges,
        num_events: events.len(),
        counts: counts.into_iter().map(|((v, e), c)| (v, e, c)).collect(),
        roots: vec![root],
    }
}

pub fn eap_event_names() -> Vec<String> {
    SYMPTOMS
        .iter()
        .chain(ROOT_FAMILIES.iter())
        .chain(EXTRA_ALARMS.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Hidden trigger DAG: root families trigger extra alarms, which trigger
/// symptoms. Each event triggers one to three events later in that order.
fn eap_dag(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    let mut extras: Vec<&str> = EXTRA_ALARMS.to_vec();
    let mut symptoms: Vec<&str> = SYMPTOMS.to_vec();
    extras.shuffle(rng);
    symptoms.shuffle(rng);
    let order: Vec<&str> = ROOT_FAMILIES.iter().copied().chain(extras).chain(symptoms).collect();
    let mut edges = BTreeSet::new();
    for i in 0..order.len() - 1 {
        for _ in 0..rng.random_range(1..=3) {
            let j = rng.random_range(i + 1..order.len());
            edges.insert((order[i].to_string(), order[j].to_string()));
        }
    }
    edges.into_iter().collect()
}

/// Baseline of `tag` at time `t` for a network element phase.
fn kpi_baseline(tag: usize, t: i64, phase: f64, rng: &mut ChaCha8Rng) -> f64 {
    let (base, amp, period) = [(45.0, 10.0, 24.0), (60.0, 6.0, 36.0), (2.0, 1.0, 18.0)][tag];
    base + amp * (std::f64::consts::TAU * t as f64 / period + phase).sin() + rng.random_range(-0.1..0.1) * amp
}

fn kpi_spike(tag: usize) -> f64 {
    [50.0, 35.0, 8.0][tag]
}

fn kpi_segment(id: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> RawKpiSegment {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let start = rng.random_range(0..1000i64);
    let mut anomalous = vec![0u8; spec.kpi_length];
    if rng.random_bool(spec.kpi_anomaly_rate) {
        for _ in 0..rng.random_range(1..=2) {
            anomalous[rng.random_range(0..spec.kpi_length)] = 1;
        }
    }
    let points = (0..spec.kpi_length)
        .map(|p| {
            let spiked = if anomalous[p] == 1 {
                Some(rng.random_range(0..KPI_TAGS.len()))
            } else {
                None
            };
            KPI_TAGS
                .iter()
                .enumerate()
                .map(|(k, tag)| {
                    let mut v = kpi_baseline(k, start + p as i64, phase, rng);
                    if spiked == Some(k) {
                        v += kpi_spike(k);
                    }
                    (tag.to_string(), (v * 1000.0).round() / 1000.0)
                })
                .collect()
        })
        .collect();
    RawKpiSegment {
        id: format!("seg{id}"),
        points,
        point_labels: anomalous,
    }
}

fn log_rows(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<MachineLogRow> {
    (0..spec.log_rows)
        .map(|i| {
            let ne = rng.random_range(0..spec.eap_nodes);
            let t = i as i64 * 5;
            let spiked = rng.random_bool(0.1).then(|| rng.random_range(0..KPI_TAGS.len()));
            let entries = KPI_TAGS
                .iter()
                .enumerate()
                .map(|(k, tag)| {
                    let mut v = kpi_baseline(k, t, ne as f64, rng);
                    if spiked == Some(k) {
                        v += kpi_spike(k);
                    }
                    (tag.to_string(), (v * 1000.0).round() / 1000.0)
                })
                .collect();
            MachineLogRow {
                ne_id: format!("ne{ne}"),
                timestamp: t,
                alarm: spiked.map(|_| SYMPTOMS.choose(rng).expect("non-empty").to_string()),
                attrs: vec![(
                    "port state".into(),
                    if rng.random_bool(0.8) { "active" } else { "standby" }.into(),
                )],
                entries,
            }
        })
        .collect()
}

fn sentences(spec: &SyntheticSpec, dag: &[(String, String)], rng: &mut ChaCha8Rng) -> Vec<(Modality, String)> {
    let alarms = eap_event_names();
    (0..spec.sentences)
        .map(|i| {
            let ne = format!("ne{}", rng.random_range(0..spec.eap_nodes));
            let board = format!("board{}", rng.random_range(0..spec.fct_chains));
            if i % 2 == 0 {
                let (a, b) = if rng.random_bool(0.5) {
                    dag.choose(rng).expect("non-empty dag").clone()
                } else {
                    let t = CHAIN_TEMPLATES.choose(rng).expect("templates");
                    let k = rng.random_range(0..3);
                    (t[k].to_string(), t[k + 1].to_string())
                };
                let text = match rng.random_range(0..4) {
                    0 => format!("{a} leads to {b} on {ne}"),
                    1 => format!("{a} causes {b} when {ne} is reported"),
                    2 => format!("{a} on {board} results in {b}"),
                    _ => format!("{a} triggers {b} on {board}"),
                };
                (Modality::CausalSentence, text)
            } else {
                let a = alarms.choose(rng).expect("alarms");
                let text = match rng.random_range(0..3) {
                    0 => format!("the {a} alarm is reported by {ne}"),
                    1 => format!("check the {board} when {a} occurs"),
                    _ => format!("{a} indicates a fault on {board} of {ne}"),
                };
                (Modality::DocumentSentence, text)
            }
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let kg = planted_kg(spec.kg_entities);
    let mut entity_attributes = BTreeMap::new();
    for i in 0..spec.kg_entities {
        entity_attributes.insert(
            format!("site{i}"),
            vec![
                (
                    "capacity".to_string(),
                    AttrValue::Number(rng.random_range(100..1000) as f64),
                ),
                (
                    "vendor".to_string(),
                    AttrValue::Text(["vendora", "vendorb"][i % 2].to_string()),
                ),
            ],
        );
    }

    let rca_events = rca_event_names(spec.rca_root_variants);
    let rca_graphs = (0..spec.rca_graphs)
        .map(|_| rca_graph(spec, &rca_events, &mut rng))
        .collect();

    let eap_events = eap_event_names();
    let dag = eap_dag(&mut rng);
    let eap_graph = NeGraph::from_edges(spec.eap_nodes, &random_tree(spec.eap_nodes, 3, &mut rng))?;
    let positives: Vec<EventPairSample> = {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        while out.len() < spec.eap_positives {
            let (a, b) = dag.choose(&mut rng).expect("non-empty dag").clone();
            let ne_i = rng.random_range(0..spec.eap_nodes);
            let nb = &eap_graph.neighbours[ne_i];
            let ne_j = if nb.is_empty() || rng.random_bool(0.3) {
                ne_i
            } else {
                *nb.choose(&mut rng).expect("non-empty")
            };
            let t_i = rng.random_range(0..10_000i64);
            let t_j = t_i + rng.random_range(1..=30);
            if seen.insert((a.clone(), b.clone(), ne_i, ne_j, t_i)) {
                out.push(EventPairSample {
                    event_i: a,
                    event_j: b,
                    ne_i,
                    ne_j,
                    t_i,
                    t_j,
                    label: 1,
                });
            }
        }
        out
    };
    let negatives = generate_negatives(&positives, &eap_events, rng.random())?;
    let eap_pairs = positives.into_iter().chain(negatives).collect();

    let mut fct_chains = Vec::with_capacity(spec.fct_chains);
    let mut fct_noise = Vec::new();
    for k in 0..spec.fct_chains {
        let template = CHAIN_TEMPLATES.choose(&mut rng).expect("templates");
        let nodes = rng.random_range(3..=4);
        let chain = (0..nodes - 1)
            .map(|i| {
                let conf = (rng.random_range(0.5..1.0f64) * 100.0).round() / 100.0;
                FaultQuadruple::new(
                    &format!("board{k} {}", template[i]),
                    "cause",
                    &format!("board{k} {}", template[i + 1]),
                    conf,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        fct_noise.push(FaultQuadruple::new(
            &format!("board{k} {}", template[0]),
            "located on",
            &format!("site{}", k % spec.kg_entities),
            1.0,
        )?);
        fct_chains.push(chain);
    }

    let kpi = (0..spec.kpi_segments).map(|i| kpi_segment(i, spec, &mut rng)).collect();

    let mut corpus = Vec::new();
    for (i, (modality, text)) in sentences(spec, &dag, &mut rng).into_iter().enumerate() {
        corpus.push(CorpusRecord::sentence(format!("s{i}"), modality, text));
    }
    for (i, row) in log_rows(spec, &mut rng).into_iter().enumerate() {
        corpus.push(CorpusRecord::log(format!("l{i}"), row));
    }
    for (i, t) in kg.iter().enumerate() {
        let mut t = t.clone();
        if t.relation == "uplink to" {
            t = t.with_attr("bandwidth", AttrValue::Number(rng.random_range(1..=10) as f64 * 100.0));
        }
        corpus.push(CorpusRecord::triple(format!("t{i}"), t));
    }

    let mut lexicon: BTreeSet<String> = SYMPTOMS
        .iter()
        .chain(ROOT_FAMILIES.iter())
        .chain(EXTRA_ALARMS.iter())
        .chain(KPI_TAGS.iter())
        .filter(|p| p.contains(' '))
        .map(|s| s.to_string())
        .collect();
    for t in CHAIN_TEMPLATES.iter().flatten() {
        if t.contains(' ') {
            lexicon.insert(t.to_string());
        }
    }
    lexicon.extend(["uplink to", "backup to", "port state", "located on"].map(String::from));

    Ok(SyntheticData {
        general_words: GENERAL_WORDS.iter().map(|s| s.to_string()).collect(),
        lexicon: lexicon.into_iter().collect(),
        corpus,
        kg,
        entity_attributes,
        rca_events,
        rca_graphs,
        eap_events,
        eap_graph,
        eap_pairs,
        fct_chains,
        fct_noise,
        kpi,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = lines.join("\n");
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

impl SyntheticData {
    pub const FILES: [&'static str; 14] = [
        "general_words.txt",
        "lexicon.txt",
        "corpus.jsonl",
        "kg.tsv",
        "entity_attributes.json",
        "rca_events.txt",
        "rca_graphs.jsonl",
        "eap_events.txt",
        "eap_graph.json",
        "eap_pairs.tsv",
        "fct_chains.json",
        "fct_noise.tsv",
        "fct_facts.tsv",
        "kpi.csv",
    ];

    /// Writes one file per dataset into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_lines(&dir.join("general_words.txt"), &self.general_words)?;
        write_lines(&dir.join("lexicon.txt"), &self.lexicon)?;
        write_corpus(&dir.join("corpus.jsonl"), &self.corpus)?;
        let kg: Vec<(KnowledgeTriple, Option<f64>)> = self.kg.iter().map(|t| (t.clone(), None)).collect();
        write_kg_tsv(&dir.join("kg.tsv"), &kg)?;
        write_json(&dir.join("entity_attributes.json"), &self.entity_attributes)?;
        write_lines(&dir.join("rca_events.txt"), &self.rca_events)?;
        write_graphs(&dir.join("rca_graphs.jsonl"), &self.rca_graphs)?;
        write_lines(&dir.join("eap_events.txt"), &self.eap_events)?;
        write_json(&dir.join("eap_graph.json"), &self.eap_graph)?;
        write_pairs(&dir.join("eap_pairs.tsv"), &self.eap_pairs)?;
        write_json(&dir.join("fct_chains.json"), &self.fct_chains)?;
        write_quadruples(&dir.join("fct_noise.tsv"), &self.fct_noise)?;
        let all: Vec<FaultQuadruple> = self
            .fct_chains
            .iter()
            .flatten()
            .chain(&self.fct_noise)
            .cloned()
            .collect();
        write_quadruples(&dir.join("fct_facts.tsv"), &all)?;
        write_kpi_csv(&dir.join("kpi.csv"), &self.kpi)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let kg = read_kg_tsv(&dir.join("kg.tsv"))?.into_iter().map(|(t, _)| t).collect();
        Ok(Self {
            general_words: read_lines(&dir.join("general_words.txt"))?,
            lexicon: read_lines(&dir.join("lexicon.txt"))?,
            corpus: read_corpus(&dir.join("corpus.jsonl"))?,
            kg,
            entity_attributes: read_json(&dir.join("entity_attributes.json"))?,
            rca_events: read_lines(&dir.join("rca_events.txt"))?,
            rca_graphs: read_graphs(&dir.join("rca_graphs.jsonl"))?,
            eap_events: read_lines(&dir.join("eap_events.txt"))?,
            eap_graph: read_json(&dir.join("eap_graph.json"))?,
            eap_pairs: read_pairs(&dir.join("eap_pairs.tsv"))?,
            fct_chains: read_json(&dir.join("fct_chains.json"))?,
            fct_noise: read_quadruples(&dir.join("fct_noise.tsv"))?,
            kpi: read_kpi_csv(&dir.join("kpi.csv"))?,
        })
    }

    pub fn log_rows(&self) -> Vec<MachineLogRow> {
        self.corpus
            .iter()
            .filter_map(|r| match &r.payload {
                ktele_core::corpus::Payload::Log(row) => Some(row.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Network element that reported a KPI segment; derived from the segment id
/// so the CSV needs no extra column.
pub fn kpi_ne(segment_id: &str) -> String {
    let digits: String = segment_id.chars().filter(char::is_ascii_digit).collect();
    let n: usize = digits.parse().unwrap_or(0);
    format!("ne{}", n % 12)
}

/// A KPI point as a machine-log row.
pub fn kpi_point_row(segment: &RawKpiSegment, position: usize) -> MachineLogRow {
    MachineLogRow {
        ne_id: kpi_ne(&segment.id),
        timestamp: position as i64,
        alarm: None,
        attrs: Vec::new(),
        entries: segment.points[position].clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            sentences: 40,
            log_rows: 30,
            rca_graphs: 10,
            eap_positives: 30,
            fct_chains: 6,
            kpi_segments: 20,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small(), 3).unwrap().write(a.path()).unwrap();
        generate(&small(), 3).unwrap().write(b.path()).unwrap();
        for f in SyntheticData::FILES {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let c = tempfile::tempdir().unwrap();
        generate(&small(), 4).unwrap().write(c.path()).unwrap();
        assert_ne!(
            std::fs::read(a.path().join("corpus.jsonl")).unwrap(),
            std::fs::read(c.path().join("corpus.jsonl")).unwrap()
        );
    }

    #[test]
    fn roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(), 9).unwrap();
        data.write(dir.path()).unwrap();
        let back = SyntheticData::read(dir.path()).unwrap();
        assert_eq!(back.corpus, data.corpus);
        assert_eq!(back.rca_graphs, data.rca_graphs);
        assert_eq!(back.eap_pairs, data.eap_pairs);
        assert_eq!(back.fct_chains, data.fct_chains);
        assert_eq!(back.kpi, data.kpi);
        assert_eq!(back.kg, data.kg);
    }

    #[test]
    fn segments_without_spikes_are_normal() {
        let spec = SyntheticSpec {
            kpi_anomaly_rate: 0.0,
            ..small()
        };
        let data = generate(&spec, 1).unwrap();
        assert!(data.kpi.iter().all(|s| s.segment_label() == 0));
        let spec = SyntheticSpec {
            kpi_anomaly_rate: 1.0,
            ..small()
        };
        assert!(generate(&spec, 1).unwrap().kpi.iter().all(|s| s.segment_label() == 1));
    }

    #[test]
    fn planted_root_has_highest_event_count() {
        let (root, neighbour, other) = rca_expected_counts();
        assert!(root > neighbour && root > other);
        let spec = SyntheticSpec {
            rca_graphs: 600,
            ..small()
        };
        let data = generate(&spec, 5).unwrap();
        let (mut sums, mut ns) = ([0.0f64; 3], [0usize; 3]);
        for g in &data.rca_graphs {
            let root = g.roots[0];
            let mut per_node = vec![0.0; g.nodes.len()];
            for &(v, _, c) in &g.counts {
                per_node[v] += c as f64;
            }
            for (v, total) in per_node.iter().enumerate() {
                let adjacent = g
                    .edges
                    .iter()
                    .any(|&(a, b)| (a == root && b == v) || (b == root && a == v));
                let role = if v == root {
                    0
                } else if adjacent {
                    1
                } else {
                    2
                };
                sums[role] += total;
                ns[role] += 1;
            }
        }
        let means: Vec<f64> = (0..3).map(|r| sums[r] / ns[r] as f64).collect();
        assert!(means[0] > means[1] && means[0] > means[2], "{means:?}");
        for (m, e) in means.iter().zip([root, neighbour, other]) {
            assert!((m - e).abs() < 0.25 * e, "{means:?}");
        }
    }

    #[test]
    fn eap_positives_follow_the_dag_with_short_gaps() {
        let data = generate(&small(), 2).unwrap();
        let pos: Vec<_> = data.eap_pairs.iter().filter(|p| p.label == 1).collect();
        let neg: Vec<_> = data.eap_pairs.iter().filter(|p| p.label == 0).collect();
        assert_eq!(pos.len(), neg.len());
        for p in pos {
            assert!((1..=30).contains(&(p.t_j - p.t_i)));
        }
    }

    #[test]
    fn kg_composition_holds() {
        let kg = planted_kg(10);
        let has = |h: usize, r: &str, t: usize| {
            kg.iter()
                .any(|x| x.head == format!("site{h}") && x.relation == r && x.tail == format!("site{t}"))
        };
        for i in 0..7 {
            assert!(has(i, "uplink to", i + 1) && has(i + 1, "backup to", i + 3) && has(i, "reaches", i + 3));
        }
    }
}
