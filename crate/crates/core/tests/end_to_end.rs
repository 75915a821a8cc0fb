use std::collections::HashSet;

use ktele_core::backbone::{mlm_loss, Backbone, EncoderConfig, TokenBatch};
use ktele_core::checkpoint;
use ktele_core::corpus::{
    fit_normalization, read_corpus, write_corpus, CorpusRecord, KnowledgeTriple, MachineLogRow, Modality,
    NormalizationStats, SpecialTokenSet,
};
use ktele_core::ke::{self, embed_elements, ke_loss, KeConfig, TripleKey};
use ktele_core::nn::{ops, Mode, Optimizer, ParamStore};
use ktele_core::prompting::{wrap_record, UnitKind};
use ktele_core::tokenizer::{build_mask_plan, word_groups, Lexicon, MaskStrategy, Vocabulary};

fn records() -> Vec<CorpusRecord> {
    let row = MachineLogRow {
        ne_id: "ne7".into(),
        timestamp: 1_700_000_000,
        alarm: Some("link down".into()),
        attrs: vec![("board".into(), "main board".into())],
        entries: vec![("cpu usage".into(), 71.0), ("rx power".into(), -3.5)],
    };
    vec![
        CorpusRecord::sentence("s0", Modality::CausalSentence, "link down causes port flap"),
        CorpusRecord::log("l0", row),
        CorpusRecord::triple("t0", KnowledgeTriple::new("port flap", "cause", "service loss")),
    ]
}

fn encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size,
        max_len: 32,
        dropout_rate: 0.0,
        generator_layers: 1,
    }
}

#[test]
fn records_survive_disk_and_wrap_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let recs = records();
    write_corpus(&path, &recs).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), recs);

    let logs: Vec<MachineLogRow> = recs
        .iter()
        .filter_map(|r| match &r.payload {
            ktele_core::corpus::Payload::Log(row) => Some(row.clone()),
            _ => None,
        })
        .collect();
    let stats = fit_normalization(&logs).unwrap();
    for r in &recs {
        let s = wrap_record(r, &stats).unwrap();
        assert_eq!(s.units.first().unwrap().kind, UnitKind::Cls);
        assert_eq!(s.units.last().unwrap().kind, UnitKind::Sep);
    }
    let log = wrap_record(&recs[1], &stats).unwrap();
    assert_eq!(log.anchor_positions().len(), 2);
}

#[test]
fn masked_training_then_checkpoint_round_trip() {
    let recs = records();
    let stats = NormalizationStats::default();
    let seqs: Vec<_> = [&recs[0], &recs[2]]
        .iter()
        .map(|r| wrap_record(r, &stats).unwrap())
        .collect();
    let words: HashSet<String> = seqs
        .iter()
        .flat_map(|s| {
            s.units
                .iter()
                .filter(|u| u.kind == UnitKind::TextToken)
                .map(|u| u.surface.clone())
        })
        .collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str), &SpecialTokenSet::default()).unwrap();
    let lexicon = Lexicon::new(["link down", "port flap"].map(String::from));
    let batch = TokenBatch::from_sequences(&seqs, &vocab, 32).unwrap();
    let plans: Vec<_> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            build_mask_plan(
                s,
                &vocab.encode_units(s),
                &word_groups(s, &lexicon),
                0.5,
                MaskStrategy::Wwm,
                i as u64,
                &vocab,
            )
            .unwrap()
        })
        .collect();
    let (masked, targets) = batch.masked(&plans, vocab.mask_id()).unwrap();
    assert!(!targets.is_empty());

    let mut ps = ParamStore::new(1);
    let bb = Backbone::new(&mut ps, encoder(vocab.len())).unwrap();
    let mut opt = Optimizer::new(ps.vars(), 5e-3, 0.0).unwrap();
    let loss = || mlm_loss(&bb.mlm, &bb.forward(&masked, None, &mut Mode::Eval).unwrap(), &targets).unwrap();
    let first = ops::to_scalar(&loss()).unwrap();
    for _ in 0..60 {
        opt.step(&loss()).unwrap();
    }
    let last = ops::to_scalar(&loss()).unwrap();
    assert!(last < 0.2 * first, "{first} -> {last}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    checkpoint::save(&path, &ps, &bb.config).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let cfg: EncoderConfig = ckpt.config().unwrap();
    let mut fresh = ParamStore::new(99);
    let restored = Backbone::new(&mut fresh, cfg).unwrap();
    let report = checkpoint::restore(&fresh, &ckpt, &[]).unwrap();
    assert!(report.missing.is_empty() && report.unexpected.is_empty());
    let a = ops::to_rows(&bb.forward(&batch, None, &mut Mode::Eval).unwrap().pooled).unwrap();
    let b = ops::to_rows(&restored.forward(&batch, None, &mut Mode::Eval).unwrap().pooled).unwrap();
    assert_eq!(a, b);
}

#[test]
fn knowledge_loss_separates_true_triples() {
    let triples = vec![
        KnowledgeTriple::new("router", "hosts", "board"),
        KnowledgeTriple::new("board", "hosts", "port"),
        KnowledgeTriple::new("port", "carries", "link"),
        KnowledgeTriple::new("link", "carries", "service"),
    ];
    let entities: Vec<String> = ["router", "board", "port", "link", "service"]
        .map(String::from)
        .to_vec();
    let vocab = Vocabulary::build(
        entities.iter().map(String::as_str).chain(["hosts", "carries"]),
        &SpecialTokenSet::default(),
    )
    .unwrap();
    let known: HashSet<TripleKey> = triples.iter().map(ke::key).collect();
    let cfg = KeConfig {
        margin: 4.0,
        negatives: 3,
        ..Default::default()
    };
    let mut ps = ParamStore::new(5);
    let bb = Backbone::new(&mut ps, encoder(vocab.len())).unwrap();
    let mut opt = Optimizer::new(ps.vars_with_prefix(&["backbone."]), 3e-3, 0.0).unwrap();
    let mut losses = Vec::new();
    for step in 0..80 {
        let batch = ke::build_batch(&triples, &entities, &known, &cfg, step).unwrap();
        let loss = ke_loss(&batch, &cfg, |els| embed_elements(&bb, &vocab, els, &mut Mode::Eval)).unwrap();
        losses.push(opt.step(&loss).unwrap());
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[70..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}
