//! Multi-modal corpus records, causal-sentence extraction, tele special-token
//! mining and per-tag min-max normalisation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// The seven prompt tokens, in vocabulary order.
pub const PROMPT_TOKENS: [&str; 7] = ["[ALM]", "[REL]", "[ENT]", "[LOC]", "[DOC]", "[ATTR]", "[NUM]"];
/// Splits attribute type names from their values.
pub const SEPARATOR: &str = "|";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    CausalSentence,
    DocumentSentence,
    MachineLog,
    KgTriple,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::CausalSentence => "causal_sentence",
            Modality::DocumentSentence => "document_sentence",
            Modality::MachineLog => "machine_log",
            Modality::KgTriple => "kg_triple",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Number(v) => write!(f, "{v}"),
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    #[serde(rename = "h")]
    pub head: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "t")]
    pub tail: String,
    #[serde(rename = "attrs", default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<(String, AttrValue)>,
}

impl KnowledgeTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            attributes: Vec::new(),
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: AttrValue) -> Self {
        self.attributes.push((name.into(), value));
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (what, s) in [("head", &self.head), ("relation", &self.relation), ("tail", &self.tail)] {
            if s.trim().is_empty() {
                return invalid(format!("triple {what} surface is empty"));
            }
        }
        for (name, _) in &self.attributes {
            if name.trim().is_empty() {
                return invalid("attribute name is empty");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineLogRow {
    #[serde(rename = "ne")]
    pub ne_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    /// Alarm name, when the row is an alarm record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alarm: Option<String>,
    /// Textual attributes rendered as `[ATTR] name | value`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attrs: Vec<(String, String)>,
    pub entries: Vec<(String, f64)>,
}

impl MachineLogRow {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return invalid(format!("log row on {} has no entries", self.ne_id));
        }
        if self.ne_id.trim().is_empty() {
            return invalid("log row has empty NE id");
        }
        for (tag, v) in &self.entries {
            if tag.trim().is_empty() {
                return invalid("log entry has empty tag name");
            }
            if !v.is_finite() {
                return invalid(format!("log entry {tag} is not finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Text(String),
    Log(MachineLogRow),
    Triple(KnowledgeTriple),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub modality: Modality,
    pub payload: Payload,
}

/// Wire shape of one JSON-lines record.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triple: Option<KnowledgeTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log: Option<MachineLogRow>,
}

impl CorpusRecord {
    pub fn sentence(id: impl Into<String>, modality: Modality, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality,
            payload: Payload::Text(text.into()),
        }
    }

    pub fn log(id: impl Into<String>, row: MachineLogRow) -> Self {
        Self {
            id: id.into(),
            modality: Modality::MachineLog,
            payload: Payload::Log(row),
        }
    }

    pub fn triple(id: impl Into<String>, t: KnowledgeTriple) -> Self {
        Self {
            id: id.into(),
            modality: Modality::KgTriple,
            payload: Payload::Triple(t),
        }
    }

    /// Exactly one payload shape, matching the modality.
    pub fn validate(&self) -> Result<()> {
        match (&self.modality, &self.payload) {
            (Modality::CausalSentence | Modality::DocumentSentence, Payload::Text(t)) => {
                if t.trim().is_empty() {
                    return invalid(format!("record {} has empty text", self.id));
                }
                Ok(())
            }
            (Modality::MachineLog, Payload::Log(row)) => row.validate(),
            (Modality::KgTriple, Payload::Triple(t)) => t.validate(),
            (m, _) => invalid(format!("record {} payload does not match modality {m}", self.id)),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        let mut raw = RawRecord {
            id: self.id.clone(),
            modality: self.modality,
            text: None,
            triple: None,
            log: None,
        };
        match &self.payload {
            Payload::Text(t) => raw.text = Some(t.clone()),
            Payload::Log(l) => raw.log = Some(l.clone()),
            Payload::Triple(t) => raw.triple = Some(t.clone()),
        }
        Ok(serde_json::to_string(&raw)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: RawRecord = serde_json::from_str(line)?;
        let present = raw.text.is_some() as u8 + raw.triple.is_some() as u8 + raw.log.is_some() as u8;
        if present != 1 {
            return invalid(format!("record {} must carry exactly one payload", raw.id));
        }
        let payload = if let Some(t) = raw.text {
            Payload::Text(t)
        } else if let Some(t) = raw.triple {
            Payload::Triple(t)
        } else {
            Payload::Log(raw.log.expect("checked above"))
        };
        let rec = CorpusRecord {
            id: raw.id,
            modality: raw.modality,
            payload,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Read a JSON-lines corpus; ids must be unique.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = CorpusRecord::from_json_line(&line)?;
        if !seen.insert(rec.id.clone()) {
            return invalid(format!("duplicate record id {}", rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", r.to_json_line()?)?;
    }
    f.flush()?;
    Ok(())
}

fn identifier_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[A-Za-z][A-Za-z0-9_]*\]\s*\d+").expect("static regex"))
}

/// Remove bracketed-type-plus-digits identifiers such as `[KPI] 1929480378`.
pub fn strip_identifiers(sentence: &str) -> String {
    let stripped = identifier_pattern().replace_all(sentence, " ");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sentences that mention a causal keyword and are at least `min_length`
/// whitespace units long once identifiers are stripped. Input order is kept
/// and the original sentences are returned.
pub fn extract_causal_sentences(
    sentences: &[String],
    keywords: &BTreeSet<String>,
    min_length: usize,
) -> Result<Vec<String>> {
    if keywords.is_empty() {
        return invalid("causal keyword set is empty");
    }
    if min_length == 0 {
        return invalid("min_length must be at least 1");
    }
    Ok(sentences
        .iter()
        .filter(|s| {
            let clean = strip_identifiers(s);
            clean.split_whitespace().count() >= min_length && keywords.iter().any(|k| clean.contains(k.as_str()))
        })
        .cloned()
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub min_freq: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Upper bound on merge operations (the symbol-vocabulary budget).
    pub max_merges: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            min_freq: 8000,
            min_len: 2,
            max_len: 4,
            max_merges: 10_000,
        }
    }
}

/// BPE-style mining of frequent character sequences in out-of-vocabulary
/// words. Pairs are merged greedily by corpus frequency while the best pair
/// reaches `min_freq`; the symbols that survive in the final segmentation
/// with usage `>= min_freq`, a length in `[min_len, max_len]` and no entry in
/// `base_vocab` are returned.
pub fn mine_special_tokens(
    corpus: &[String],
    base_vocab: &HashSet<String>,
    cfg: &MiningConfig,
) -> Result<BTreeSet<String>> {
    if cfg.min_freq == 0 {
        return invalid("min_freq must be at least 1");
    }
    if cfg.min_len > cfg.max_len {
        return invalid("min_len exceeds max_len");
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            if !base_vocab.contains(w) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
    }
    // symbols are stored with their char length to enforce the max_len cap
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();

    for _ in 0..cfg.max_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                if pair[0].chars().count() + pair[1].chars().count() <= cfg.max_len {
                    *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_default() += count;
                }
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), c)| ((l.to_string(), r.to_string()), c));
        let Some(((left, right), count)) = best else { break };
        if count < cfg.min_freq {
            break;
        }
        let merged = format!("{left}{right}");
        for (syms, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
    }

    let mut usage: BTreeMap<String, usize> = BTreeMap::new();
    for (syms, count) in &words {
        for s in syms {
            *usage.entry(s.clone()).or_default() += count;
        }
    }
    Ok(usage
        .into_iter()
        .filter(|(s, c)| {
            let len = s.chars().count();
            *c >= cfg.min_freq && len >= cfg.min_len && len <= cfg.max_len && !base_vocab.contains(s)
        })
        .map(|(s, _)| s)
        .collect())
}

/// Prompt tokens plus mined tele tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenSet {
    pub tele_tokens: BTreeSet<String>,
}

impl SpecialTokenSet {
    pub fn new(tele_tokens: BTreeSet<String>, base_vocab: &HashSet<String>) -> Result<Self> {
        for t in &tele_tokens {
            let len = t.chars().count();
            if !(2..=4).contains(&len) {
                return invalid(format!("tele token {t:?} has length {len}, expected 2..=4"));
            }
            if base_vocab.contains(t) {
                return invalid(format!("tele token {t:?} already in base vocabulary"));
            }
            if PROMPT_TOKENS.contains(&t.as_str()) || t == SEPARATOR {
                return invalid(format!("tele token {t:?} collides with a prompt token"));
            }
        }
        Ok(Self { tele_tokens })
    }

    pub fn prompt_tokens(&self) -> &'static [&'static str] {
        &PROMPT_TOKENS
    }

    pub fn separator(&self) -> &'static str {
        SEPARATOR
    }
}

/// Canonical text form of a triple:
/// `[ENT] h [REL] r [ENT] t` then ` [ATTR] name | value` per attribute, with
/// numeric values rendered as the `[NUM]` anchor marker.
pub fn serialize_triple(t: &KnowledgeTriple) -> String {
    let mut s = format!("[ENT] {} [REL] {} [ENT] {}", t.head, t.relation, t.tail);
    for (name, value) in &t.attributes {
        match value {
            AttrValue::Text(v) => s.push_str(&format!(" [ATTR] {name} | {v}")),
            AttrValue::Number(_) => s.push_str(&format!(" [ATTR] {name} | [NUM]")),
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl TagStats {
    fn observe(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.count += 1;
    }

    fn merge(&mut self, other: &TagStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }
}

/// Per-tag min/max/count. Serialises as `{tag: {"min", "max", "count"}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationStats {
    pub tags: BTreeMap<String, TagStats>,
}

/// A normalised value and whether its tag was missing from the statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalized {
    pub value: f64,
    pub unseen: bool,
}

impl NormalizationStats {
    pub fn observe(&mut self, tag: &str, v: f64) {
        match self.tags.get_mut(tag) {
            Some(s) => s.observe(v),
            None => {
                self.tags.insert(
                    tag.to_string(),
                    TagStats {
                        min: v,
                        max: v,
                        count: 1,
                    },
                );
            }
        }
    }

    /// Shard reduction: per-tag min of mins, max of maxes, sum of counts.
    pub fn merge(&mut self, other: &NormalizationStats) {
        for (tag, s) in &other.tags {
            match self.tags.get_mut(tag) {
                Some(mine) => mine.merge(s),
                None => {
                    self.tags.insert(tag.clone(), *s);
                }
            }
        }
    }

    pub fn get(&self, tag: &str) -> Option<&TagStats> {
        self.tags.get(tag)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stats: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for (tag, s) in &stats.tags {
            if s.min > s.max || s.count == 0 {
                return Err(Error::InvalidArgument(format!("inconsistent stats for tag {tag}")));
            }
        }
        Ok(stats)
    }
}

pub fn fit_normalization(logs: &[MachineLogRow]) -> Result<NormalizationStats> {
    if logs.is_empty() {
        return invalid("no log rows to fit normalisation on");
    }
    let mut stats = NormalizationStats::default();
    for row in logs {
        for (tag, v) in &row.entries {
            stats.observe(tag, *v);
        }
    }
    Ok(stats)
}

/// Min-max normalise `v` for `tag`, clipped to `[0, 1]`. A degenerate range
/// maps to 0.0; an unseen tag maps to 0.5 and is flagged.
pub fn normalize_value(v: f64, tag: &str, stats: &NormalizationStats) -> Normalized {
    match stats.get(tag) {
        None => Normalized {
            value: 0.5,
            unseen: true,
        },
        Some(s) if s.max <= s.min => Normalized {
            value: 0.0,
            unseen: false,
        },
        Some(s) => Normalized {
            value: ((v - s.min) / (s.max - s.min)).clamp(0.0, 1.0),
            unseen: false,
        },
    }
}
