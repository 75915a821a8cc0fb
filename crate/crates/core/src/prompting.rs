//! Prompt-template wrapping of corpus records into unit sequences.
//!
//! Layouts (one unit per whitespace token):
//!
//! * sentences: `[CLS] [DOC] w1 .. wn [SEP]`
//! * machine log: `[CLS] [ALM] alarm [LOC] ne ([ATTR] name | value)* ([ATTR] tag | [NUM])* [SEP]`
//!   (the `[ALM]` block only when the row names an alarm)
//! * triple: `[CLS] [ENT] head [REL] relation [ENT] tail ([ATTR] name | value-or-[NUM])* [SEP]`
//!
//! Numbers never appear as digit strings; every numeric entry becomes a
//! `[NUM]` anchor unit carrying its tag and min-max normalised value.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_value, AttrValue, CorpusRecord, Modality, NormalizationStats, Payload, SEPARATOR};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    TextToken,
    PromptToken,
    NumericAnchor,
    /// The `|` unit between an attribute name and its value.
    Separator,
    Cls,
    Sep,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericSlot {
    pub tag: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceUnit {
    pub kind: UnitKind,
    pub surface: String,
    #[serde(flatten, default)]
    pub numeric: Option<NumericSlot>,
}

impl SequenceUnit {
    fn new(kind: UnitKind, surface: &str) -> Self {
        Self {
            kind,
            surface: surface.to_string(),
            numeric: None,
        }
    }

    pub fn text(surface: &str) -> Self {
        Self::new(UnitKind::TextToken, surface)
    }

    pub fn prompt(surface: &str) -> Self {
        Self::new(UnitKind::PromptToken, surface)
    }

    pub fn anchor(tag: &str, value: f64) -> Self {
        Self {
            kind: UnitKind::NumericAnchor,
            surface: "[NUM]".to_string(),
            numeric: Some(NumericSlot {
                tag: tag.to_string(),
                value,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrappedSequence {
    pub units: Vec<SequenceUnit>,
    #[serde(default)]
    pub source_id: String,
    #[serde(default)]
    pub source_modality: String,
    /// Tags that were missing from the normalisation statistics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen_tags: Vec<String>,
}

impl WrappedSequence {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// The ordered prompt-token surfaces, used to check the template.
    pub fn prompt_signature(&self) -> Vec<&str> {
        self.units
            .iter()
            .filter(|u| u.kind == UnitKind::PromptToken)
            .map(|u| u.surface.as_str())
            .collect()
    }

    pub fn anchor_positions(&self) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.kind == UnitKind::NumericAnchor)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json_line(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            units: &'a [SequenceUnit],
        }
        Ok(serde_json::to_string(&Line { units: &self.units })?)
    }

    /// The structural invariants: `[CLS]` first, `[SEP]` last, anchors carry
    /// values in `[0, 1]` and only anchors carry numbers.
    pub fn check(&self) -> Result<()> {
        if self.units.first().map(|u| u.kind) != Some(UnitKind::Cls)
            || self.units.last().map(|u| u.kind) != Some(UnitKind::Sep)
        {
            return invalid("sequence must start with [CLS] and end with [SEP]");
        }
        for u in &self.units {
            match (&u.kind, &u.numeric) {
                (UnitKind::NumericAnchor, Some(n)) if (0.0..=1.0).contains(&n.value) => {}
                (UnitKind::NumericAnchor, _) => return invalid("anchor without a value in [0,1]"),
                (_, Some(_)) => return invalid("numeric payload on a non-anchor unit"),
                _ => {}
            }
            if u.kind == UnitKind::PromptToken && !crate::corpus::PROMPT_TOKENS.contains(&u.surface.as_str()) {
                return invalid(format!("unknown prompt token {}", u.surface));
            }
        }
        Ok(())
    }
}

struct Builder {
    units: Vec<SequenceUnit>,
    unseen: Vec<String>,
}

impl Builder {
    fn new() -> Self {
        Self {
            units: vec![SequenceUnit::new(UnitKind::Cls, "[CLS]")],
            unseen: Vec::new(),
        }
    }

    fn prompt(&mut self, p: &str) {
        self.units.push(SequenceUnit::prompt(p));
    }

    fn words(&mut self, text: &str) -> Result<()> {
        let mut any = false;
        for w in text.split_whitespace() {
            self.units.push(SequenceUnit::text(w));
            any = true;
        }
        if !any {
            return invalid("empty surface in template slot");
        }
        Ok(())
    }

    fn text_attr(&mut self, name: &str, value: &str) -> Result<()> {
        self.prompt("[ATTR]");
        self.words(name)?;
        self.units.push(SequenceUnit::new(UnitKind::Separator, SEPARATOR));
        self.words(value)
    }

    fn numeric_attr(&mut self, tag: &str, raw: f64, stats: &NormalizationStats) -> Result<()> {
        self.prompt("[ATTR]");
        self.words(tag)?;
        self.units.push(SequenceUnit::new(UnitKind::Separator, SEPARATOR));
        let n = normalize_value(raw, tag, stats);
        if n.unseen {
            self.unseen.push(tag.to_string());
        }
        self.units.push(SequenceUnit::anchor(tag, n.value));
        Ok(())
    }

    fn attrs(&mut self, attrs: &[(String, AttrValue)], stats: &NormalizationStats) -> Result<()> {
        for (name, value) in attrs {
            match value {
                AttrValue::Text(v) => self.text_attr(name, v)?,
                AttrValue::Number(v) => self.numeric_attr(name, *v, stats)?,
            }
        }
        Ok(())
    }

    fn finish(mut self, source_id: &str, modality: &str) -> WrappedSequence {
        self.units.push(SequenceUnit::new(UnitKind::Sep, "[SEP]"));
        WrappedSequence {
            units: self.units,
            source_id: source_id.to_string(),
            source_modality: modality.to_string(),
            unseen_tags: self.unseen,
        }
    }
}

pub fn wrap_record(r: &CorpusRecord, stats: &NormalizationStats) -> Result<WrappedSequence> {
    r.validate()?;
    let mut b = Builder::new();
    match &r.payload {
        Payload::Text(text) => {
            b.prompt("[DOC]");
            b.words(text)?;
        }
        Payload::Log(row) => {
            if let Some(alarm) = &row.alarm {
                b.prompt("[ALM]");
                b.words(alarm)?;
            }
            b.prompt("[LOC]");
            b.words(&row.ne_id)?;
            for (name, value) in &row.attrs {
                b.text_attr(name, value)?;
            }
            for (tag, v) in &row.entries {
                b.numeric_attr(tag, *v, stats)?;
            }
        }
        Payload::Triple(t) => {
            b.prompt("[ENT]");
            b.words(&t.head)?;
            b.prompt("[REL]");
            b.words(&t.relation)?;
            b.prompt("[ENT]");
            b.words(&t.tail)?;
            b.attrs(&t.attributes, stats)?;
        }
    }
    Ok(b.finish(&r.id, &r.modality.to_string()))
}

/// `[CLS] [ENT] name ([ATTR] k | v)* [SEP]`.
pub fn wrap_entity(name: &str, attrs: &[(String, AttrValue)], stats: &NormalizationStats) -> Result<WrappedSequence> {
    let mut b = Builder::new();
    b.prompt("[ENT]");
    b.words(name)?;
    b.attrs(attrs, stats)?;
    Ok(b.finish(name, "entity"))
}

/// `[CLS] [REL] name [SEP]`.
pub fn wrap_relation(name: &str) -> Result<WrappedSequence> {
    let mut b = Builder::new();
    b.prompt("[REL]");
    b.words(name)?;
    Ok(b.finish(name, "relation"))
}

/// Positions eligible for masking: text tokens only.
pub fn maskable_positions(s: &WrappedSequence) -> BTreeSet<usize> {
    s.units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.kind == UnitKind::TextToken)
        .map(|(i, _)| i)
        .collect()
}

/// Expected prompt signature for a record's modality, given its shape.
pub fn expected_signature(r: &CorpusRecord) -> Vec<&'static str> {
    match (&r.modality, &r.payload) {
        (Modality::CausalSentence | Modality::DocumentSentence, _) => vec!["[DOC]"],
        (_, Payload::Log(row)) => {
            let mut sig = Vec::new();
            if row.alarm.is_some() {
                sig.push("[ALM]");
            }
            sig.push("[LOC]");
            sig.extend(std::iter::repeat_n("[ATTR]", row.attrs.len() + row.entries.len()));
            sig
        }
        (_, Payload::Triple(t)) => {
            let mut sig = vec!["[ENT]", "[REL]", "[ENT]"];
            sig.extend(std::iter::repeat_n("[ATTR]", t.attributes.len()));
            sig
        }
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KnowledgeTriple, MachineLogRow};
    use proptest::prelude::*;

    fn surfaces(s: &WrappedSequence) -> Vec<&str> {
        s.units.iter().map(|u| u.surface.as_str()).collect()
    }

    fn kpi_stats() -> NormalizationStats {
        let mut st = NormalizationStats::default();
        st.observe("kpi_a", 2.0);
        st.observe("kpi_a", 6.0);
        st
    }

    #[test]
    fn sentence_template() {
        let r = CorpusRecord::sentence("s1", Modality::CausalSentence, "A leads to B");
        let s = wrap_record(&r, &NormalizationStats::default()).unwrap();
        assert_eq!(surfaces(&s), ["[CLS]", "[DOC]", "A", "leads", "to", "B", "[SEP]"]);
        s.check().unwrap();
    }

    #[test]
    fn log_template_carries_normalised_anchor() {
        let row = MachineLogRow {
            ne_id: "NE1".into(),
            timestamp: 10,
            alarm: Some("link down".into()),
            attrs: vec![("severity".into(), "major".into())],
            entries: vec![("kpi_a".into(), 4.0)],
        };
        let r = CorpusRecord::log("l1", row);
        let s = wrap_record(&r, &kpi_stats()).unwrap();
        assert_eq!(
            surfaces(&s),
            [
                "[CLS]", "[ALM]", "link", "down", "[LOC]", "NE1", "[ATTR]", "severity", "|", "major", "[ATTR]",
                "kpi_a", "|", "[NUM]", "[SEP]"
            ]
        );
        // oracle: (4 - 2) / (6 - 2)
        let anchor = &s.units[13];
        assert_eq!(anchor.kind, UnitKind::NumericAnchor);
        assert_eq!(anchor.numeric.as_ref().unwrap().value, (4.0 - 2.0) / (6.0 - 2.0));
        assert_eq!(s.prompt_signature(), expected_signature(&r));
        s.check().unwrap();
    }

    #[test]
    fn unseen_tag_is_flagged() {
        let row = MachineLogRow {
            ne_id: "NE1".into(),
            timestamp: 0,
            alarm: None,
            attrs: vec![],
            entries: vec![("new_tag".into(), 3.0)],
        };
        let s = wrap_record(&CorpusRecord::log("x", row), &kpi_stats()).unwrap();
        assert_eq!(s.unseen_tags, vec!["new_tag".to_string()]);
        assert_eq!(s.units[s.anchor_positions()[0]].numeric.as_ref().unwrap().value, 0.5);
    }

    #[test]
    fn entity_without_attributes() {
        let s = wrap_entity("AMF", &[], &NormalizationStats::default()).unwrap();
        assert_eq!(surfaces(&s), ["[CLS]", "[ENT]", "AMF", "[SEP]"]);
        assert!(!surfaces(&s).contains(&"[ATTR]"));
    }

    #[test]
    fn triple_template_matches_serialisation() {
        let t =
            KnowledgeTriple::new("AMF", "provide", "Session Service").with_attr("threshold", AttrValue::Number(0.7));
        let r = CorpusRecord::triple("t1", t.clone());
        let mut stats = NormalizationStats::default();
        stats.observe("threshold", 0.0);
        stats.observe("threshold", 1.0);
        let s = wrap_record(&r, &stats).unwrap();
        let inner: Vec<&str> = surfaces(&s)[1..s.len() - 1].to_vec();
        assert_eq!(inner.join(" "), crate::corpus::serialize_triple(&t));
        assert_eq!(s.units[s.anchor_positions()[0]].numeric.as_ref().unwrap().value, 0.7);
    }

    #[test]
    fn maskable_positions_examples() {
        let only_prompts = WrappedSequence {
            units: vec![
                SequenceUnit::new(UnitKind::Cls, "[CLS]"),
                SequenceUnit::prompt("[LOC]"),
                SequenceUnit::anchor("t", 0.2),
                SequenceUnit::new(UnitKind::Sep, "[SEP]"),
            ],
            source_id: String::new(),
            source_modality: String::new(),
            unseen_tags: vec![],
        };
        assert!(maskable_positions(&only_prompts).is_empty());
        let r = CorpusRecord::sentence("s", Modality::DocumentSentence, "a b");
        let s = wrap_record(&r, &NormalizationStats::default()).unwrap();
        assert_eq!(maskable_positions(&s), BTreeSet::from([2, 3]));
    }

    #[test]
    fn malformed_records_are_rejected() {
        let r = CorpusRecord {
            id: "bad".into(),
            modality: Modality::KgTriple,
            payload: Payload::Text("x".into()),
        };
        assert!(wrap_record(&r, &NormalizationStats::default()).is_err());
        let empty = CorpusRecord::triple("e", KnowledgeTriple::new("a", " ", "c"));
        assert!(wrap_record(&empty, &NormalizationStats::default()).is_err());
    }

    #[test]
    fn json_line_shape() {
        let s = wrap_entity(
            "x",
            &[("w".into(), AttrValue::Number(1.0))],
            &NormalizationStats::default(),
        )
        .unwrap();
        let line = s.to_json_line().unwrap();
        assert!(line.starts_with("{\"units\":[{\"kind\":\"cls\",\"surface\":\"[CLS]\"}"));
        assert!(line.contains("{\"kind\":\"numeric_anchor\",\"surface\":\"[NUM]\",\"tag\":\"w\",\"value\":0.5}"));
    }

    fn arb_log() -> impl Strategy<Value = CorpusRecord> {
        (
            proptest::option::of("[a-z]{1,5}( [a-z]{1,5})?"),
            proptest::collection::vec(("[a-z]{1,4}", "[a-z]{1,4}"), 0..3),
            proptest::collection::vec(("kpi_[a-c]", -5.0f64..15.0), 1..4),
        )
            .prop_map(|(alarm, attrs, entries)| {
                CorpusRecord::log(
                    "p",
                    MachineLogRow {
                        ne_id: "NE7".into(),
                        timestamp: 0,
                        alarm,
                        attrs,
                        entries,
                    },
                )
            })
    }

    proptest! {
        #[test]
        fn wrapped_logs_respect_invariants(r in arb_log()) {
            let s = wrap_record(&r, &kpi_stats()).unwrap();
            s.check().unwrap();
            prop_assert_eq!(s.prompt_signature(), expected_signature(&r));
            prop_assert_eq!(wrap_record(&r, &kpi_stats()).unwrap(), s.clone());
            let maskable = maskable_positions(&s);
            for (i, u) in s.units.iter().enumerate() {
                prop_assert_eq!(maskable.contains(&i), u.kind == UnitKind::TextToken);
            }
        }
    }
}
