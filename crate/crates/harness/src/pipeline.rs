//! Encoder bundle (vocabulary, backbone, optional numeric encoder), stage-one
//! pre-training and multi-task re-training.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use candle_core::Tensor;
use ktele_core::anenc::{Anenc, AnencConfig, AnencOutput};
use ktele_core::backbone::{mlm_loss, Backbone, EncoderConfig, StageOneWeights, TokenBatch};
use ktele_core::checkpoint;
use ktele_core::corpus::{
    fit_normalization, mine_special_tokens, CorpusRecord, KnowledgeTriple, NormalizationStats, Payload, SpecialTokenSet,
};
use ktele_core::ke::{build_batch, embed_elements, filtered_tail_ranks, ke_loss, key, KeConfig, Role, TripleKey};
use ktele_core::metrics::{summarize_ranks, RankingSummary};
use ktele_core::nn::{ops, Mode, Optimizer, ParamStore};
use ktele_core::prompting::{wrap_entity, wrap_record, wrap_relation, UnitKind, WrappedSequence};
use ktele_core::schedule::{build_plan, parse_scale, run_plan, StepLoss, TaskHooks, TrainingLog, TrainingPlan};
use ktele_core::tokenizer::{build_mask_plan, word_groups, Lexicon, MaskPlan, MaskStrategy, Vocabulary};
use ktele_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderKind, ModelSettings, PretrainSettings, RetrainSettings};
use crate::synth::{kpi_point_row, SyntheticData};

/// Everything needed to rebuild a model besides its weights. Stored as the
/// checkpoint configuration so an archive is self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: EncoderKind,
    pub encoder: EncoderConfig,
    pub anenc: Option<AnencConfig>,
    pub tele_tokens: BTreeSet<String>,
    pub base_words: Vec<String>,
    pub lexicon: Vec<String>,
    pub stats: NormalizationStats,
}

impl ModelManifest {
    /// Mines tele tokens, fits normalisation and collects the vocabulary.
    pub fn prepare(data: &SyntheticData, settings: &ModelSettings) -> Result<Self> {
        let stats = corpus_stats(data)?;
        let general: HashSet<String> = data.general_words.iter().cloned().collect();
        let mut lines: Vec<String> = Vec::new();
        let mut words: BTreeSet<String> = general.iter().cloned().collect();
        for r in &data.corpus {
            let s = wrap_record(r, &stats)?;
            let text: Vec<&str> = s
                .units
                .iter()
                .filter(|u| u.kind == UnitKind::TextToken)
                .map(|u| u.surface.as_str())
                .collect();
            words.extend(text.iter().map(|w| w.to_string()));
            lines.push(text.join(" "));
        }
        let names = data
            .rca_events
            .iter()
            .chain(&data.eap_events)
            .chain(
                data.fct_chains
                    .iter()
                    .flatten()
                    .flat_map(|q| [&q.head, &q.relation, &q.tail]),
            )
            .chain(data.fct_noise.iter().flat_map(|q| [&q.head, &q.relation, &q.tail]))
            .chain(data.entity_attributes.keys())
            .chain(&data.lexicon);
        for n in names {
            words.extend(n.split_whitespace().map(String::from));
        }
        for attrs in data.entity_attributes.values() {
            for (k, v) in attrs {
                words.extend(k.split_whitespace().map(String::from));
                if let ktele_core::corpus::AttrValue::Text(t) = v {
                    words.extend(t.split_whitespace().map(String::from));
                }
            }
        }
        let tele_tokens = mine_special_tokens(&lines, &general, &settings.mining)?;
        // A corpus word that is also a mined symbol lives in the vocabulary once,
        // as the tele token.
        let base_words: Vec<String> = words.into_iter().filter(|w| !tele_tokens.contains(w)).collect();
        let specials = SpecialTokenSet::new(tele_tokens.clone(), &base_words.iter().cloned().collect())?;
        let vocab = Vocabulary::build(&base_words, &specials)?;
        let encoder = EncoderConfig {
            num_layers: settings.num_layers,
            num_heads: settings.num_heads,
            hidden_dim: settings.hidden_dim,
            ffn_dim: settings.ffn_dim,
            vocab_size: vocab.len(),
            max_len: settings.max_len,
            dropout_rate: settings.dropout_rate,
            generator_layers: settings.generator_layers,
        };
        encoder.validate()?;
        Ok(Self {
            kind: EncoderKind::Backbone,
            encoder,
            anenc: None,
            tele_tokens,
            base_words,
            lexicon: data.lexicon.clone(),
            stats,
        })
    }

    pub fn anenc_config(&self) -> AnencConfig {
        AnencConfig::new(self.encoder.hidden_dim, self.stats.tags.keys().cloned().collect())
    }
}

/// Min-max statistics over every numeric value the pipeline will wrap.
pub fn corpus_stats(data: &SyntheticData) -> Result<NormalizationStats> {
    let mut stats = fit_normalization(&data.log_rows())?;
    for r in &data.corpus {
        if let Payload::Triple(t) = &r.payload {
            for (k, v) in &t.attributes {
                if let ktele_core::corpus::AttrValue::Number(x) = v {
                    stats.observe(k, *x);
                }
            }
        }
    }
    for attrs in data.entity_attributes.values() {
        for (k, v) in attrs {
            if let ktele_core::corpus::AttrValue::Number(x) = v {
                stats.observe(k, *x);
            }
        }
    }
    for seg in &data.kpi {
        for p in &seg.points {
            for (tag, v) in p {
                stats.observe(tag, *v);
            }
        }
    }
    Ok(stats)
}

pub struct KteleModel {
    pub manifest: ModelManifest,
    pub ps: ParamStore,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub backbone: Backbone,
    pub anenc: Option<Anenc>,
}

impl KteleModel {
    pub fn new(manifest: ModelManifest, seed: u64) -> Result<Self> {
        let specials = SpecialTokenSet::new(
            manifest.tele_tokens.clone(),
            &manifest.base_words.iter().cloned().collect(),
        )?;
        let vocab = Vocabulary::build(&manifest.base_words, &specials)?;
        if vocab.len() != manifest.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, encoder expects {}",
                vocab.len(),
                manifest.encoder.vocab_size
            )));
        }
        let mut ps = ParamStore::new(seed);
        let backbone = Backbone::new(&mut ps, manifest.encoder.clone())?;
        let anenc = manifest.anenc.clone().map(|c| Anenc::new(&mut ps, c)).transpose()?;
        Ok(Self {
            lexicon: Lexicon::new(manifest.lexicon.iter().cloned()),
            manifest,
            ps,
            vocab,
            backbone,
            anenc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        checkpoint::save(path, &self.ps, &self.manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let manifest: ModelManifest = ckpt.config()?;
        let model = Self::new(manifest, 0)?;
        checkpoint::restore(&model.ps, &ckpt, &[])?;
        Ok(model)
    }

    /// A copy sharing this model's backbone weights, with a freshly initialised
    /// numeric encoder when `with_anenc` is set.
    pub fn derive(&self, kind: EncoderKind, with_anenc: bool, seed: u64) -> Result<Self> {
        let mut manifest = self.manifest.clone();
        manifest.kind = kind;
        manifest.anenc = with_anenc.then(|| manifest.anenc_config());
        let out = Self::new(manifest, seed)?;
        for (name, var) in self.ps.named_vars() {
            if name.starts_with("backbone.") {
                out.ps.assign(&name, var.as_tensor())?;
            }
        }
        Ok(out)
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.encoder.hidden_dim
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.manifest.stats
    }

    /// Wraps corpus records, rejecting any that would not fit the encoder.
    pub fn wrap_corpus(&self, records: &[CorpusRecord]) -> Result<Vec<WrappedSequence>> {
        records
            .iter()
            .map(|r| {
                let s = wrap_record(r, self.stats())?;
                self.check_length(&s)?;
                Ok(s)
            })
            .collect()
    }

    fn check_length(&self, s: &WrappedSequence) -> Result<()> {
        if s.len() > self.manifest.encoder.max_len {
            return Err(Error::Config(format!(
                "sequence {:?} has {} units, above max_len {}",
                s.source_id,
                s.len(),
                self.manifest.encoder.max_len
            )));
        }
        Ok(())
    }

    fn anchor_output(&self, batch: &TokenBatch) -> Result<Option<AnencOutput>> {
        match &self.anenc {
            Some(a) => a.encode_anchors(batch, &self.backbone.encoder.embeddings, &self.vocab),
            None => Ok(None),
        }
    }

    /// Pooled `[CLS]` vectors in evaluation mode.
    pub fn encode(&self, seqs: &[WrappedSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let batch = TokenBatch::from_sequences(chunk, &self.vocab, self.manifest.encoder.max_len)?;
            let anchors = self.anchor_output(&batch)?;
            let enc = self
                .backbone
                .forward(&batch, anchors.as_ref().map(|a| &a.h), &mut Mode::Eval)?;
            out.extend(ops::to_rows(&enc.pooled)?);
        }
        Ok(out)
    }

    pub fn encode_names(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let seqs = names
            .iter()
            .map(|n| wrap_entity(n, &[], self.stats()))
            .collect::<Result<Vec<_>>>()?;
        self.encode(&seqs)
    }

    fn mask_plans(
        &self,
        seqs: &[WrappedSequence],
        rate: f64,
        strategy: MaskStrategy,
        seed: u64,
    ) -> Result<Vec<MaskPlan>> {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| {
                let ids = self.vocab.encode_units(s);
                let groups = word_groups(s, &self.lexicon);
                build_mask_plan(
                    s,
                    &ids,
                    &groups,
                    rate,
                    strategy,
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    &self.vocab,
                )
            })
            .collect()
    }

    /// Generator MLM, replaced-token detection and SimCSE.
    pub fn pretrain_loss(
        &self,
        seqs: &[WrappedSequence],
        rate: f64,
        strategy: MaskStrategy,
        weights: &StageOneWeights,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, BTreeMap<String, f64>)> {
        let batch = TokenBatch::from_sequences(seqs, &self.vocab, self.manifest.encoder.max_len)?;
        let plans = self.mask_plans(seqs, rate, strategy, seed)?;
        let l = self
            .backbone
            .stage_one_losses(&batch, &plans, self.vocab.mask_id(), weights, rng)?;
        let comps = BTreeMap::from([
            ("mlm".to_string(), ops::to_scalar(&l.mlm)?),
            ("rtd".to_string(), ops::to_scalar(&l.rtd)?),
            ("simcse".to_string(), ops::to_scalar(&l.simcse)?),
        ]);
        Ok((l.total, comps))
    }

    /// Whole-word masked prediction on the discriminator, plus the numeric
    /// objectives whenever the numeric encoder is present.
    pub fn mask_loss(
        &self,
        seqs: &[WrappedSequence],
        rate: f64,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, BTreeMap<String, f64>)> {
        let batch = TokenBatch::from_sequences(seqs, &self.vocab, self.manifest.encoder.max_len)?;
        let plans = self.mask_plans(seqs, rate, MaskStrategy::Wwm, seed)?;
        let (masked, targets) = batch.masked(&plans, self.vocab.mask_id())?;
        let anchors = self.anchor_output(&masked)?;
        let out = self
            .backbone
            .forward(&masked, anchors.as_ref().map(|a| &a.h), &mut Mode::Train(rng))?;
        let mlm = mlm_loss(&self.backbone.mlm, &out, &targets)?;
        let mut comps = BTreeMap::from([("mlm".to_string(), ops::to_scalar(&mlm)?)]);
        let total = match (&self.anenc, &anchors) {
            (Some(anenc), Some(a)) => {
                let values: Vec<f64> = masked.anchors.iter().map(|s| s.value).collect();
                let tags: Vec<&str> = masked.anchors.iter().map(|s| s.tag.as_str()).collect();
                let decoded = anenc.decode(&a.h)?;
                let numeric = anenc.numeric_losses(&a.h, &decoded, &values, &tags)?;
                comps.insert("numeric".into(), ops::to_scalar(&numeric.total)?);
                (mlm + numeric.total)?
            }
            _ => mlm,
        };
        Ok((total, comps))
    }

    pub fn ke_loss(
        &self,
        positives: &[KnowledgeTriple],
        pool: &[String],
        known: &HashSet<TripleKey>,
        cfg: &KeConfig,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let batch = build_batch(positives, pool, known, cfg, seed)?;
        ke_loss(&batch, cfg, |els| {
            embed_elements(&self.backbone, &self.vocab, els, &mut Mode::Train(rng))
        })
    }

    /// Filtered tail prediction over `triples` with encoder-produced entity and
    /// relation vectors.
    pub fn kg_ranking(&self, triples: &[KnowledgeTriple]) -> Result<RankingSummary> {
        let entities: Vec<String> = triples
            .iter()
            .flat_map(|t| [t.head.clone(), t.tail.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let relations: Vec<String> = triples
            .iter()
            .map(|t| t.relation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let evecs = ops::to_rows(&embed_elements(
            &self.backbone,
            &self.vocab,
            &entities.iter().map(|e| (e.clone(), Role::Entity)).collect::<Vec<_>>(),
            &mut Mode::Eval,
        )?)?;
        let rseqs = relations.iter().map(|r| wrap_relation(r)).collect::<Result<Vec<_>>>()?;
        let rvecs: BTreeMap<String, Vec<f64>> = relations.iter().cloned().zip(self.encode(&rseqs)?).collect();
        let known: HashSet<TripleKey> = triples.iter().map(key).collect();
        let ranked = filtered_tail_ranks(&entities, &evecs, &rvecs, triples, &known)?;
        let ranks: Vec<f64> = ranked.iter().map(|r| r.rank).collect();
        summarize_ranks(&ranks, &[1, 3, 10])
    }
}

/// Wrapped KPI points, one sequence per position of every segment.
pub fn wrap_kpi(data: &SyntheticData, stats: &NormalizationStats) -> Result<Vec<Vec<WrappedSequence>>> {
    data.kpi
        .iter()
        .map(|seg| {
            (0..seg.points.len())
                .map(|p| {
                    let r = CorpusRecord::log(format!("{}#{p}", seg.id), kpi_point_row(seg, p));
                    wrap_record(&r, stats)
                })
                .collect()
        })
        .collect()
}

/// `n` uniform draws, with replacement, below `len`.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}

fn mean_of(losses: &[Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack(losses, 0)?;
    Ok(stacked.mean_all()?)
}

/// Stage-one training on the whole corpus. Returns per-step losses.
pub fn pretrain(
    model: &KteleModel,
    seqs: &[WrappedSequence],
    settings: &PretrainSettings,
    seed: u64,
) -> Result<Vec<StepLoss>> {
    if seqs.is_empty() {
        return Err(Error::Config("empty pre-training corpus".into()));
    }
    let mut opt = Optimizer::new(
        model.ps.vars(),
        settings.optim.learning_rate,
        settings.optim.weight_decay,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut losses = Vec::with_capacity(settings.optim.accumulation);
        let mut comps: BTreeMap<String, f64> = BTreeMap::new();
        for micro in 0..settings.optim.accumulation {
            let picked: Vec<WrappedSequence> = sample_indices(&mut rng, seqs.len(), settings.optim.batch_size)
                .into_iter()
                .map(|i| seqs[i].clone())
                .collect();
            let mask_seed = seed ^ ((step as u64) << 20) ^ micro as u64;
            let (loss, c) = model.pretrain_loss(
                &picked,
                settings.mask_rate,
                settings.mask_strategy,
                &settings.weights,
                mask_seed,
                &mut rng,
            )?;
            for (k, v) in c {
                *comps.entry(k).or_default() += v / settings.optim.accumulation as f64;
            }
            losses.push(loss);
        }
        let loss = opt.step(&mean_of(&losses)?)?;
        history.push(StepLoss {
            loss,
            components: comps,
        });
    }
    Ok(history)
}

/// Training callbacks bound to one model and its data.
pub struct RetrainHooks<'a> {
    model: &'a KteleModel,
    opt: Optimizer,
    seqs: &'a [WrappedSequence],
    kg: &'a [KnowledgeTriple],
    pool: Vec<String>,
    known: HashSet<TripleKey>,
    settings: &'a RetrainSettings,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<'a> RetrainHooks<'a> {
    pub fn new(
        model: &'a KteleModel,
        seqs: &'a [WrappedSequence],
        kg: &'a [KnowledgeTriple],
        settings: &'a RetrainSettings,
        seed: u64,
    ) -> Result<Self> {
        if seqs.is_empty() || kg.is_empty() {
            return Err(Error::Config(
                "re-training needs both corpus sequences and KG triples".into(),
            ));
        }
        let pool: Vec<String> = kg
            .iter()
            .flat_map(|t| [t.head.clone(), t.tail.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            model,
            opt: Optimizer::new(
                model.ps.vars(),
                settings.optim.learning_rate,
                settings.optim.weight_decay,
            )?,
            seqs,
            kg,
            pool,
            known: kg.iter().map(key).collect(),
            settings,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn mask_micro(&mut self, step: u64, micro: usize) -> Result<(Tensor, BTreeMap<String, f64>)> {
        let picked: Vec<WrappedSequence> =
            sample_indices(&mut self.rng, self.seqs.len(), self.settings.optim.batch_size)
                .into_iter()
                .map(|i| self.seqs[i].clone())
                .collect();
        let seed = self.seed ^ (step << 20) ^ micro as u64;
        self.model
            .mask_loss(&picked, self.settings.mask_rate, seed, &mut self.rng)
    }

    fn ke_micro(&mut self, step: u64, micro: usize) -> Result<Tensor> {
        let picked: Vec<KnowledgeTriple> = sample_indices(&mut self.rng, self.kg.len(), self.settings.ke_batch)
            .into_iter()
            .map(|i| self.kg[i].clone())
            .collect();
        let seed = self.seed ^ (step << 20) ^ (micro as u64) ^ 0x5eed;
        self.model
            .ke_loss(&picked, &self.pool, &self.known, &self.settings.ke, seed, &mut self.rng)
    }

    /// Averages `accumulation` micro-batch losses into one update.
    fn accumulate<F>(&mut self, mut micro: F) -> Result<StepLoss>
    where
        F: FnMut(&mut Self, usize) -> Result<(Tensor, BTreeMap<String, f64>)>,
    {
        let n = self.settings.optim.accumulation;
        let mut losses = Vec::with_capacity(n);
        let mut comps: BTreeMap<String, f64> = BTreeMap::new();
        for m in 0..n {
            let (l, c) = micro(self, m)?;
            for (k, v) in c {
                *comps.entry(k).or_default() += v / n as f64;
            }
            losses.push(l);
        }
        let loss = self.opt.step(&mean_of(&losses)?)?;
        Ok(StepLoss {
            loss,
            components: comps,
        })
    }
}

impl TaskHooks for RetrainHooks<'_> {
    fn mask_step(&mut self, _stage: usize, step: u64) -> Result<StepLoss> {
        self.accumulate(|h, m| h.mask_micro(step, m))
    }

    fn ke_step(&mut self, _stage: usize, step: u64) -> Result<StepLoss> {
        self.accumulate(|h, m| {
            let l = h.ke_micro(step, m)?;
            let v = ops::to_scalar(&l)?;
            Ok((l, BTreeMap::from([("ke".to_string(), v)])))
        })
    }

    fn joint_step(&mut self, _stage: usize, step: u64) -> Result<StepLoss> {
        self.accumulate(|h, m| {
            let (mask, mut comps) = h.mask_micro(step, m)?;
            let ke = h.ke_micro(step, m)?;
            comps.insert("ke".into(), ops::to_scalar(&ke)?);
            Ok(((mask + ke)?, comps))
        })
    }
}

pub struct RetrainOutcome {
    pub plan: TrainingPlan,
    pub log: TrainingLog,
}

/// Runs the configured plan on `model` in place.
pub fn retrain(
    model: &KteleModel,
    seqs: &[WrappedSequence],
    kg: &[KnowledgeTriple],
    settings: &RetrainSettings,
    seed: u64,
) -> Result<RetrainOutcome> {
    let plan = build_plan(settings.strategy, parse_scale(&settings.scale)?)?;
    let mut hooks = RetrainHooks::new(model, seqs, kg, settings, seed)?;
    let log = run_plan(&plan, &mut hooks).into_result()?;
    Ok(RetrainOutcome { plan, log })
}
