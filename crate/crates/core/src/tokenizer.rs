//! Vocabulary, whole-word segmentation and mask planning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SpecialTokenSet, PROMPT_TOKENS, SEPARATOR};
use crate::error::{invalid, Error, Result};
use crate::prompting::{maskable_positions, UnitKind, WrappedSequence};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
const CONTROL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Token ↔ id bijection. Ids are laid out as control tokens, prompt tokens,
/// the `|` separator, mined tele tokens, then base tokens.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    tele: BTreeSet<String>,
    /// First id that may be drawn as a random replacement token.
    first_regular: u32,
}

impl Vocabulary {
    pub fn build<I, S>(base_words: I, specials: &SpecialTokenSet) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(PROMPT_TOKENS.iter().map(|s| s.to_string()));
        tokens.push(SEPARATOR.to_string());
        let first_regular = tokens.len() as u32;
        tokens.extend(specials.tele_tokens.iter().cloned());
        let base: BTreeSet<String> = base_words
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        for w in base {
            if specials.tele_tokens.contains(&w) {
                return invalid(format!("tele token {w:?} also in base vocabulary"));
            }
            tokens.push(w);
        }
        Self::from_tokens(tokens, specials.tele_tokens.clone(), first_regular)
    }

    fn from_tokens(tokens: Vec<String>, tele: BTreeSet<String>, first_regular: u32) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return invalid(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Self {
            tokens,
            index,
            tele,
            first_regular,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(1)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }
    pub fn num_id(&self) -> u32 {
        self.id("[NUM]")
    }

    /// Control, prompt, separator and tele token ids.
    pub fn special_ids(&self) -> BTreeSet<u32> {
        let mut s: BTreeSet<u32> = (0..self.first_regular).collect();
        s.extend(self.tele.iter().filter_map(|t| self.get(t)));
        s
    }

    pub fn tele_tokens(&self) -> &BTreeSet<String> {
        &self.tele
    }

    /// Ids eligible as random replacements: tele and base tokens.
    pub fn regular_range(&self) -> std::ops::Range<u32> {
        self.first_regular..self.tokens.len() as u32
    }

    pub fn encode_units(&self, s: &WrappedSequence) -> Vec<u32> {
        s.units.iter().map(|u| self.id(&u.surface)).collect()
    }

    /// Whitespace tokenisation of a free-text surface.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// One token per line, control and prompt tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Load a vocabulary file; `tele` lists which entries are mined tele tokens.
    pub fn load(path: &Path, tele: BTreeSet<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let fixed: Vec<&str> = CONTROL_TOKENS
            .iter()
            .chain(PROMPT_TOKENS.iter())
            .copied()
            .chain(std::iter::once(SEPARATOR))
            .collect();
        if tokens.len() < fixed.len() || tokens.iter().zip(&fixed).any(|(a, b)| a != b) {
            return Err(Error::Config(format!(
                "{} does not start with the fixed special tokens",
                path.display()
            )));
        }
        Self::from_tokens(tokens, tele, fixed.len() as u32)
    }
}

/// Multi-token phrases used for whole-word grouping.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    phrases: BTreeSet<Vec<String>>,
    max_len: usize,
}

impl Lexicon {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let phrases: BTreeSet<Vec<String>> = phrases
            .into_iter()
            .map(|p| p.as_ref().split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        let max_len = phrases.iter().map(Vec::len).max().unwrap_or(0);
        Self { phrases, max_len }
    }

    pub fn contains(&self, phrase: &[String]) -> bool {
        self.phrases.contains(phrase)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.phrases.iter().map(|p| p.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in self.phrases() {
            writeln!(f, "{p}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(text.lines().filter(|l| !l.trim().is_empty())))
    }
}

/// Greedy longest-match, left-to-right grouping of `tokens`. Returns groups
/// of indices; unmatched tokens form singleton groups.
pub fn segment_whole_words<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = 1;
        let longest = lexicon.max_len.min(tokens.len() - i);
        for len in (2..=longest).rev() {
            let cand: Vec<String> = tokens[i..i + len].iter().map(|t| t.as_ref().to_string()).collect();
            if lexicon.contains(&cand) {
                matched = len;
                break;
            }
        }
        groups.push((i..i + matched).collect());
        i += matched;
    }
    groups
}

/// Word groups of a wrapped sequence, as sequence positions. Segmentation
/// runs independently on each maximal run of text tokens, so groups never
/// span prompt, separator or anchor units.
pub fn word_groups(s: &WrappedSequence, lexicon: &Lexicon) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, groups: &mut Vec<Vec<usize>>| {
        if run.is_empty() {
            return;
        }
        let toks: Vec<&str> = run.iter().map(|&p| s.units[p].surface.as_str()).collect();
        for g in segment_whole_words(&toks, lexicon) {
            groups.push(g.into_iter().map(|k| run[k]).collect());
        }
        run.clear();
    };
    for (i, u) in s.units.iter().enumerate() {
        if u.kind == UnitKind::TextToken {
            run.push(i);
        } else {
            flush(&mut run, &mut groups);
        }
    }
    flush(&mut run, &mut groups);
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Token-level selection, re-drawn with a fresh seed every step.
    Dynamic,
    /// Whole-word selection over lexicon groups.
    Wwm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked_positions: BTreeSet<usize>,
    pub targets: BTreeMap<usize, u32>,
    pub replacement: BTreeMap<usize, Replacement>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }

    /// Input ids with the plan's replacements applied.
    pub fn apply(&self, ids: &[u32], mask_id: u32) -> Vec<u32> {
        let mut out = ids.to_vec();
        for (&p, r) in &self.replacement {
            match r {
                Replacement::Mask => out[p] = mask_id,
                Replacement::Random(id) => out[p] = *id,
                Replacement::Keep => {}
            }
        }
        out
    }
}

fn ceil_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Select masked positions and their 80/10/10 replacements. `ids` are the
/// sequence's token ids and supply the targets.
pub fn build_mask_plan(
    s: &WrappedSequence,
    ids: &[u32],
    groups: &[Vec<usize>],
    rate: f64,
    strategy: MaskStrategy,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return invalid(format!("masking rate {rate} outside [0, 1]"));
    }
    if ids.len() != s.len() {
        return invalid("id sequence length differs from the wrapped sequence");
    }
    let maskable = maskable_positions(s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    match strategy {
        MaskStrategy::Dynamic => {
            let pool: Vec<usize> = maskable.iter().copied().collect();
            let k = ceil_count(rate, pool.len()).min(pool.len());
            for i in sample(&mut rng, pool.len(), k) {
                chosen.insert(pool[i]);
            }
        }
        MaskStrategy::Wwm => {
            let pool: Vec<&Vec<usize>> = groups
                .iter()
                .filter(|g| !g.is_empty() && g.iter().all(|p| maskable.contains(p)))
                .collect();
            let k = ceil_count(rate, pool.len()).min(pool.len());
            for i in sample(&mut rng, pool.len(), k) {
                chosen.extend(pool[i].iter().copied());
            }
        }
    }
    let regular = vocab.regular_range();
    let mut plan = MaskPlan::default();
    for p in chosen {
        let r: f64 = rng.random();
        let rep = if r < 0.8 {
            Replacement::Mask
        } else if r < 0.9 && !regular.is_empty() {
            Replacement::Random(rng.random_range(regular.clone()))
        } else {
            Replacement::Keep
        };
        plan.masked_positions.insert(p);
        plan.targets.insert(p, ids[p]);
        plan.replacement.insert(p, rep);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusRecord, Modality, NormalizationStats};
    use crate::prompting::wrap_record;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::build(words.iter().copied(), &SpecialTokenSet::default()).unwrap()
    }

    fn sentence(text: &str) -> WrappedSequence {
        wrap_record(
            &CorpusRecord::sentence("s", Modality::CausalSentence, text),
            &NormalizationStats::default(),
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_layout_and_round_trip() {
        let tele = SpecialTokenSet::new(["NF".to_string()].into(), &Default::default()).unwrap();
        let v = Vocabulary::build(["b", "a"], &tele).unwrap();
        assert_eq!(v.token(0), PAD);
        assert_eq!(v.token(5), "[ALM]");
        assert_eq!(v.token(12), "|");
        assert_eq!(v.token(13), "NF");
        assert_eq!(v.token(14), "a");
        assert!(v.special_ids().contains(&13));
        assert_eq!(v.id("zzz"), v.unk_id());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p, v.tele_tokens().clone()).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("a"), v.id("a"));
        assert_eq!(back.special_ids(), v.special_ids());
    }

    #[test]
    fn whole_word_segmentation_examples() {
        let lex = Lexicon::new(["network congestion points"]);
        let toks = ["network", "congestion", "points", "occurred"];
        assert_eq!(segment_whole_words(&toks, &lex), vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(
            segment_whole_words(&toks, &Lexicon::default()),
            vec![vec![0], vec![1], vec![2], vec![3]]
        );
        let overlap = Lexicon::new(["a b", "b c"]);
        assert_eq!(
            segment_whole_words(&["a", "b", "c"], &overlap),
            vec![vec![0, 1], vec![2]]
        );
    }

    /// Brute-force greedy oracle: at each cursor try every phrase length from
    /// longest to shortest by scanning the whole lexicon.
    fn greedy_oracle(tokens: &[String], phrases: &[Vec<String>]) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let best = phrases
                .iter()
                .filter(|p| p.len() >= 2 && i + p.len() <= tokens.len() && tokens[i..i + p.len()] == p[..])
                .map(Vec::len)
                .max()
                .unwrap_or(1);
            out.push((i..i + best).collect());
            i += best;
        }
        out
    }

    proptest! {
        #[test]
        fn segmentation_matches_greedy_oracle(
            tokens in proptest::collection::vec("[abc]", 0..12),
            phrases in proptest::collection::vec(proptest::collection::vec("[abc]", 2..4), 0..5),
        ) {
            let lex = Lexicon::new(phrases.iter().map(|p| p.join(" ")));
            prop_assert_eq!(segment_whole_words(&tokens, &lex), greedy_oracle(&tokens, &phrases));
        }
    }

    #[test]
    fn mask_plan_examples() {
        let s = sentence("w0 w1 w2 w3 w4 w5 w6 w7 w8 w9");
        let v = vocab(&["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"]);
        let ids = v.encode_units(&s);
        let groups = word_groups(&s, &Lexicon::default());
        let empty = build_mask_plan(&s, &ids, &groups, 0.0, MaskStrategy::Dynamic, 1, &v).unwrap();
        assert!(empty.is_empty());
        let plan = build_mask_plan(&s, &ids, &groups, 0.4, MaskStrategy::Dynamic, 1, &v).unwrap();
        assert_eq!(plan.masked_positions.len(), 4);
        assert_eq!(
            plan.targets.keys().copied().collect::<BTreeSet<_>>(),
            plan.masked_positions
        );
        for (&p, &t) in &plan.targets {
            assert_eq!(t, ids[p]);
        }
        assert!(build_mask_plan(&s, &ids, &groups, 1.5, MaskStrategy::Dynamic, 1, &v).is_err());
        assert!(build_mask_plan(&s, &ids, &groups, -0.1, MaskStrategy::Wwm, 1, &v).is_err());
    }

    #[test]
    fn wwm_masks_whole_phrase() {
        let s = sentence("network congestion points occurred");
        let v = vocab(&["network", "congestion", "points", "occurred"]);
        let lex = Lexicon::new(["network congestion points"]);
        let ids = v.encode_units(&s);
        let groups = word_groups(&s, &lex);
        assert_eq!(groups, vec![vec![2, 3, 4], vec![5]]);
        let mut seen_phrase = false;
        for seed in 0..50 {
            let plan = build_mask_plan(&s, &ids, &groups, 0.4, MaskStrategy::Wwm, seed, &v).unwrap();
            // ceil(0.4 * 2 groups) = 1 group
            let phrase: BTreeSet<usize> = [2, 3, 4].into();
            if plan.masked_positions.contains(&2) {
                seen_phrase = true;
                assert_eq!(plan.masked_positions, phrase);
            } else {
                assert_eq!(plan.masked_positions, BTreeSet::from([5]));
            }
        }
        assert!(seen_phrase);
    }

    #[test]
    fn same_seed_same_plan() {
        let s = sentence("a b c d e f g h");
        let v = vocab(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        let ids = v.encode_units(&s);
        let g = word_groups(&s, &Lexicon::default());
        let p1 = build_mask_plan(&s, &ids, &g, 0.5, MaskStrategy::Dynamic, 9, &v).unwrap();
        let p2 = build_mask_plan(&s, &ids, &g, 0.5, MaskStrategy::Dynamic, 9, &v).unwrap();
        assert_eq!(p1, p2);
        let applied = p1.apply(&ids, v.mask_id());
        for (i, (&a, &b)) in applied.iter().zip(&ids).enumerate() {
            if !p1.masked_positions.contains(&i) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn per_position_frequency_matches_rate() {
        // 10 maskable tokens, rate 0.3 -> exactly 3 masked per plan, so each
        // position is masked with probability 0.3.
        let s = sentence("a b c d e f g h i j");
        let v = vocab(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        let ids = v.encode_units(&s);
        let g = word_groups(&s, &Lexicon::default());
        let trials = 4000;
        let mut counts = [0usize; 12];
        let mut mask_tok = 0usize;
        for seed in 0..trials {
            let plan = build_mask_plan(&s, &ids, &g, 0.3, MaskStrategy::Dynamic, seed as u64, &v).unwrap();
            for (&p, r) in &plan.replacement {
                counts[p] += 1;
                if *r == Replacement::Mask {
                    mask_tok += 1;
                }
            }
        }
        let sd = (trials as f64 * 0.3 * 0.7).sqrt();
        for c in &counts[2..12] {
            assert!((*c as f64 - trials as f64 * 0.3).abs() < 3.0 * sd + 1.0, "{c}");
        }
        let total = trials as f64 * 3.0;
        let sd_mask = (total * 0.8 * 0.2).sqrt();
        assert!((mask_tok as f64 - 0.8 * total).abs() < 3.0 * sd_mask);
    }
}
