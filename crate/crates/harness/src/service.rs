//! Service vectors: names (optionally with attributes) turned into pooled
//! encoder outputs for downstream tasks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ktele_core::corpus::{AttrValue, KnowledgeTriple, NormalizationStats};
use ktele_core::prompting::{wrap_entity, WrappedSequence};
use ktele_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::KteleModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceFormat {
    /// `[CLS] [ENT] name [SEP]`.
    OnlyName,
    /// As `OnlyName`, after checking the name against the KG.
    EntityNoAttr,
    /// The KG entity followed by one `[ATTR] k | v` block per attribute.
    EntityWithAttr,
}

impl FromStr for ServiceFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only_name" => Ok(Self::OnlyName),
            "entity_no_attr" => Ok(Self::EntityNoAttr),
            "entity_with_attr" => Ok(Self::EntityWithAttr),
            other => Err(Error::InvalidArgument(format!("unknown service format {other:?}"))),
        }
    }
}

impl fmt::Display for ServiceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OnlyName => "only_name",
            Self::EntityNoAttr => "entity_no_attr",
            Self::EntityWithAttr => "entity_with_attr",
        })
    }
}

/// Case- and whitespace-insensitive form used for surface matching.
fn surface_key(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// KG entity names keyed by their surface form.
#[derive(Clone, Debug, Default)]
pub struct EntityIndex {
    by_surface: BTreeMap<String, String>,
}

impl EntityIndex {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let by_surface = names
            .into_iter()
            .map(|n| {
                let n = n.into();
                (surface_key(&n), n)
            })
            .collect();
        Self { by_surface }
    }

    pub fn from_triples(kg: &[KnowledgeTriple]) -> Self {
        Self::from_names(kg.iter().flat_map(|t| [t.head.clone(), t.tail.clone()]))
    }

    pub fn lookup(&self, name: &str) -> Option<&str> {
        self.by_surface.get(&surface_key(name)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_surface.is_empty()
    }
}

/// The wrapped sequence for a service request and whether it fell back to
/// `only_name` for lack of a KG match.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceSequence {
    pub sequence: WrappedSequence,
    pub fell_back: bool,
}

pub fn service_sequence(
    name: &str,
    format: ServiceFormat,
    kg: &EntityIndex,
    attrs: &[(String, AttrValue)],
    stats: &NormalizationStats,
) -> Result<ServiceSequence> {
    let only_name = || wrap_entity(name, &[], stats);
    match format {
        ServiceFormat::OnlyName => Ok(ServiceSequence {
            sequence: only_name()?,
            fell_back: false,
        }),
        ServiceFormat::EntityNoAttr | ServiceFormat::EntityWithAttr => match kg.lookup(name) {
            None => {
                log::warn!("{name:?} matches no KG entity; encoding the bare name");
                Ok(ServiceSequence {
                    sequence: only_name()?,
                    fell_back: true,
                })
            }
            Some(entity) => {
                let attrs = if format == ServiceFormat::EntityWithAttr {
                    attrs
                } else {
                    &[]
                };
                Ok(ServiceSequence {
                    sequence: wrap_entity(entity, attrs, stats)?,
                    fell_back: false,
                })
            }
        },
    }
}

/// Source of vectors for the downstream tasks.
pub enum ServiceEncoder {
    /// `U(−1, 1)` per distinct input, stable across runs and call order.
    Random {
        dim: usize,
        seed: u64,
    },
    Model(Box<KteleModel>),
}

/// FNV-1a; stable across platforms and toolchains.
fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn random_vector(dim: usize, seed: u64, content: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(content.as_bytes()));
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

impl ServiceEncoder {
    pub fn dim(&self) -> usize {
        match self {
            Self::Random { dim, .. } => *dim,
            Self::Model(m) => m.hidden_dim(),
        }
    }

    pub fn stats(&self) -> NormalizationStats {
        match self {
            Self::Random { .. } => NormalizationStats::default(),
            Self::Model(m) => m.stats().clone(),
        }
    }

    pub fn encode(&self, seqs: &[WrappedSequence]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Random { dim, seed } => seqs
                .iter()
                .map(|s| Ok(random_vector(*dim, *seed, &s.to_json_line()?)))
                .collect(),
            Self::Model(m) => m.encode(seqs),
        }
    }

    /// `only_name` vectors.
    pub fn names(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Random { dim, seed } => Ok(names.iter().map(|n| random_vector(*dim, *seed, n)).collect()),
            Self::Model(m) => m.encode_names(names),
        }
    }
}

/// One service vector per name in the requested format.
pub fn encode_service_vectors(
    names: &[String],
    format: ServiceFormat,
    kg: &EntityIndex,
    attributes: &BTreeMap<String, Vec<(String, AttrValue)>>,
    encoder: &ServiceEncoder,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let stats = encoder.stats();
    let wrapped = names
        .iter()
        .map(|n| {
            let attrs = kg
                .lookup(n)
                .and_then(|e| attributes.get(e))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            service_sequence(n, format, kg, attrs, &stats)
        })
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<WrappedSequence> = wrapped.iter().map(|w| w.sequence.clone()).collect();
    Ok((encoder.encode(&seqs)?, wrapped.iter().map(|w| w.fell_back).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ktele_core::prompting::UnitKind;
    use proptest::prelude::*;

    fn stats() -> NormalizationStats {
        let mut s = NormalizationStats::default();
        s.observe("capacity", 100.0);
        s.observe("capacity", 900.0);
        s
    }

    fn surfaces(s: &WrappedSequence) -> Vec<String> {
        s.units.iter().map(|u| u.surface.clone()).collect()
    }

    #[test]
    fn only_name_ignores_kg() {
        let a = EntityIndex::default();
        let b = EntityIndex::from_names(["site1", "site2"]);
        let attrs = [("capacity".to_string(), AttrValue::Number(300.0))];
        let x = service_sequence("site1", ServiceFormat::OnlyName, &a, &attrs, &stats()).unwrap();
        let y = service_sequence("site1", ServiceFormat::OnlyName, &b, &[], &stats()).unwrap();
        assert_eq!(x, y);
        assert_eq!(surfaces(&x.sequence), ["[CLS]", "[ENT]", "site1", "[SEP]"]);
    }

    #[test]
    fn unmatched_entity_falls_back() {
        let kg = EntityIndex::from_names(["site1"]);
        let s = service_sequence("router9", ServiceFormat::EntityWithAttr, &kg, &[], &stats()).unwrap();
        assert!(s.fell_back);
        let only = service_sequence("router9", ServiceFormat::OnlyName, &kg, &[], &stats()).unwrap();
        assert_eq!(s.sequence, only.sequence);
    }

    #[test]
    fn surface_match_is_case_and_space_insensitive() {
        let kg = EntityIndex::from_names(["Main Board"]);
        let s = service_sequence(" main   board ", ServiceFormat::EntityNoAttr, &kg, &[], &stats()).unwrap();
        assert!(!s.fell_back);
        assert_eq!(surfaces(&s.sequence), ["[CLS]", "[ENT]", "Main", "Board", "[SEP]"]);
    }

    #[test]
    fn random_vectors_are_stable_and_bounded() {
        let e = ServiceEncoder::Random { dim: 16, seed: 4 };
        let names = vec!["a".to_string(), "b".to_string()];
        let v = e.names(&names).unwrap();
        let rev = e.names(&[names[1].clone(), names[0].clone()]).unwrap();
        assert_eq!(v[0], rev[1]);
        assert_ne!(v[0], v[1]);
        assert!(v.iter().flatten().all(|x| (-1.0..1.0).contains(x)));
    }

    fn attr_strategy() -> impl Strategy<Value = Vec<(String, AttrValue)>> {
        prop::collection::vec(
            (
                "[a-z]{1,6}( [a-z]{1,5})?",
                prop_oneof![
                    (0.0..1e3f64).prop_map(AttrValue::Number),
                    "[a-z]{1,6}".prop_map(AttrValue::Text)
                ],
            ),
            0..4,
        )
    }

    proptest! {
        #[test]
        fn empty_attributes_equal_no_attr(name in "[a-z]{1,8}( [a-z]{1,6})?") {
            let kg = EntityIndex::from_names([name.clone()]);
            let with = service_sequence(&name, ServiceFormat::EntityWithAttr, &kg, &[], &stats()).unwrap();
            let without = service_sequence(&name, ServiceFormat::EntityNoAttr, &kg, &[], &stats()).unwrap();
            prop_assert_eq!(with, without);
        }

        #[test]
        fn one_more_attribute_adds_one_block(
            attrs in attr_strategy(),
            key in "[a-z]{1,6}",
            value in prop_oneof![(0.0..1e3f64).prop_map(AttrValue::Number), "[a-z]{1,6}".prop_map(AttrValue::Text)],
        ) {
            let kg = EntityIndex::from_names(["site1"]);
            let base = service_sequence("site1", ServiceFormat::EntityWithAttr, &kg, &attrs, &stats()).unwrap().sequence;
            let mut more = attrs.clone();
            more.push((key.clone(), value.clone()));
            let grown = service_sequence("site1", ServiceFormat::EntityWithAttr, &kg, &more, &stats()).unwrap().sequence;
            // Oracle: the grown sequence is the base with exactly
            // `[ATTR] key | value` spliced in before `[SEP]`.
            let n = base.len();
            prop_assert_eq!(&grown.units[..n - 1], &base.units[..n - 1]);
            prop_assert_eq!(grown.units.last(), base.units.last());
            let block: Vec<&str> = grown.units[n - 1..grown.len() - 1].iter().map(|u| u.surface.as_str()).collect();
            let mut want = vec!["[ATTR]"];
            want.extend(key.split_whitespace());
            want.push("|");
            let text_value;
            match &value {
                AttrValue::Number(_) => want.push("[NUM]"),
                AttrValue::Text(t) => {
                    text_value = t.clone();
                    want.extend(text_value.split_whitespace());
                }
            }
            prop_assert_eq!(block, want);
            let anchors = |s: &WrappedSequence| s.units.iter().filter(|u| u.kind == UnitKind::NumericAnchor).count();
            prop_assert_eq!(anchors(&grown) - anchors(&base), usize::from(matches!(value, AttrValue::Number(_))));
        }
    }
}
