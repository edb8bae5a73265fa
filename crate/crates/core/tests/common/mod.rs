#![allow(dead_code)]

use multee::corpus::{gen_synthetic_qa, qa_token_lists, QaExample, QaRecord, SyntheticQaConfig, Vocab};
use multee::model::{AggregatorConfig, JoinLayer, ModelConfig, ModelKind, QaModel};
use multee::relevance::RelevanceKind;

pub fn qa_records(n: usize, distractors: usize, seed: u64) -> Vec<QaRecord> {
    gen_synthetic_qa(&SyntheticQaConfig {
        n_entities: 30,
        n_relations: 6,
        n_questions: n,
        n_distractors: distractors,
        max_distractors: None,
        n_choices: 4,
        seed,
        contiguous: false,
    })
    .unwrap()
}

pub fn vocab_for(records: &[QaRecord]) -> Vocab {
    let lists = qa_token_lists(records).unwrap();
    Vocab::build(lists.iter().map(Vec::as_slice))
}

pub fn examples(records: &[QaRecord], vocab: &Vocab) -> Vec<QaExample> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| QaExample::from_record(r, i, vocab).unwrap())
        .collect()
}

/// A small synthetic dataset with its vocabulary.
pub fn tiny_data(n: usize, seed: u64) -> (Vocab, Vec<QaExample>) {
    let records = qa_records(n, 3, seed);
    let vocab = vocab_for(&records);
    let ex = examples(&records, &vocab);
    (vocab, ex)
}

pub fn multee_config(layers: &[JoinLayer], kind: RelevanceKind, d: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Multee,
        d_emb: d,
        d_hidden: d,
        aggregator: AggregatorConfig::new(layers, kind),
        seed,
        ..ModelConfig::default()
    }
}

pub fn baseline_config(kind: ModelKind, d: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        d_emb: d,
        d_hidden: d,
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_multee(vocab: &Vocab, layers: &[JoinLayer], kind: RelevanceKind, seed: u64) -> QaModel {
    QaModel::new(multee_config(layers, kind, 4, seed), vocab).unwrap()
}

pub const CA_FL: [JoinLayer; 2] = [JoinLayer::CrossAttention, JoinLayer::FinalLayer];

/// Applies `perm` (new position -> old index) to premises and relevance labels.
pub fn permute_premises(ex: &QaExample, perm: &[usize]) -> QaExample {
    let mut out = ex.clone();
    out.premises = perm.iter().map(|&i| ex.premises[i].clone()).collect();
    out.premise_texts = perm.iter().map(|&i| ex.premise_texts[i].clone()).collect();
    out.relevance_labels = ex
        .relevance_labels
        .as_ref()
        .map(|y| perm.iter().map(|&i| y[i]).collect());
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
