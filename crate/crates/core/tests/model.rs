mod common;

use common::*;
use multee::checkpoint::Checkpoint;
use multee::corpus::{QaExample, TaskType, TokenSeq};
use multee::entailment::{cross_attend, CrossAttention, EntailmentModel};
use multee::graph::Graph;
use multee::joins::{join_cross_attention, join_embedding, join_final};
use multee::model::{decide, AggregatorConfig, JoinLayer, ModelKind, Parts, QaModel};
use multee::relevance::RelevanceKind;
use multee::tensor::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn multee_parts(m: &QaModel) -> multee::model::MulteeParts {
    match m.parts {
        Parts::Multee(p) => p,
        Parts::Baseline(_) => panic!("expected a Multee model"),
    }
}

#[test]
fn sub_aggregators_share_layers_below_the_lowest_join() {
    let (vocab, _) = tiny_data(2, 1);
    let m = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 0);
    let p = multee_parts(&m);
    let (ca, fl) = (p.ca.unwrap(), p.fl.unwrap());
    assert_eq!(ca.encoder, fl.encoder);
    assert_eq!(ca.encoder, p.encoder);
    assert_ne!(ca.composer, fl.composer);
    assert!(m.store.name(ca.composer.projection.w).starts_with("ca."));
    assert!(m.store.name(fl.composer.projection.w).starts_with("fl."));

    let mut cfg = multee_config(&CA_FL, RelevanceKind::Learned, 4, 0);
    cfg.aggregator.share_below_min_join = false;
    let m = QaModel::new(cfg, &vocab).unwrap();
    let p = multee_parts(&m);
    let (ca, fl) = (p.ca.unwrap(), p.fl.unwrap());
    assert_ne!(ca.encoder.embedding, fl.encoder.embedding);
    assert_eq!(m.store.name(ca.encoder.embedding), "ca.embedding");
    assert_eq!(m.embedding_ids().len(), 3);
}

#[test]
fn mutating_the_shared_encoder_changes_both_paragraph_vectors() {
    let (vocab, ex) = tiny_data(1, 2);
    let mut m = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 3);
    let before = m.forward(&ex[0], 0).unwrap();
    let bw = multee_parts(&m).encoder.bilstm.bw.w;
    m.store.get_mut(bw).data_mut()[0] += 0.5;
    let after = m.forward(&ex[0], 0).unwrap();
    for ((l0, v0), (l1, v1)) in before.paragraphs.iter().zip(&after.paragraphs) {
        assert_eq!(l0, l1);
        assert!(max_abs_diff(v0, v1) > 1e-9, "{} did not observe the change", l0.label());
    }
}

#[test]
fn fl_with_one_premise_is_a_head_over_the_sentence_vector() {
    let (vocab, mut ex) = tiny_data(1, 4);
    let ex = {
        let e = &mut ex[0];
        e.premises.truncate(1);
        e.premise_texts.truncate(1);
        e.relevance_labels = None;
        e.clone()
    };
    let m = tiny_multee(&vocab, &[JoinLayer::FinalLayer], RelevanceKind::Learned, 5);
    let p = multee_parts(&m);
    let fl = p.fl.unwrap();
    for c in 0..ex.choices.len() {
        let score = m.forward(&ex, c).unwrap();
        assert_eq!(score.alpha.as_ref().unwrap().values(), &[1.0]);
        let g = Graph::new(&m.store);
        let pe = fl.encoder.embed_encode(&g, &ex.premises[0]).unwrap();
        let he = fl.encoder.embed_encode(&g, &ex.hypotheses[c]).unwrap();
        let v = fl.composer.compose_and_pool(&g, &cross_attend(&g, &pe, &he));
        let logit = p.head.out.forward(&g, g.tanh(p.head.hidden.forward(&g, v)));
        assert!((g.scalar_value(logit) - score.logit).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&score.probability));
    }
}

#[test]
fn one_hot_alpha_isolates_a_premise_in_both_joins() {
    let (vocab, ex) = tiny_data(1, 6);
    let ex = &ex[0];
    let m = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 7);
    let p = multee_parts(&m);
    let g = Graph::new(&m.store);
    let h = p.encoder.embed_encode(&g, &ex.hypotheses[0]).unwrap();
    let atts: Vec<CrossAttention> = ex
        .premises
        .iter()
        .map(|s| cross_attend(&g, &p.encoder.embed_encode(&g, s).unwrap(), &h))
        .collect();
    let n = atts.len();
    for j in 0..n {
        let mut onehot = vec![0.0; n];
        onehot[j] = 1.0;
        let alpha = g.constant(Mat::row_vector(onehot));
        let joined = join_cross_attention(&g, &atts, alpha).unwrap();
        let m_hp = g.value(joined.attention.m_hp);
        let seg = joined.segment(j);
        let own = g.value(atts[j].m_hp);
        for r in 0..m_hp.rows() {
            for c in 0..m_hp.cols() {
                if seg.contains(&c) {
                    assert!((m_hp.get(r, c) - own.get(r, c - seg.start)).abs() < 1e-12);
                } else {
                    assert_eq!(m_hp.get(r, c), 0.0);
                }
            }
        }
        let hs: Vec<_> = atts.iter().map(|a| p.fl.unwrap().composer.compose_and_pool(&g, a)).collect();
        let y = join_final(&g, &hs, alpha).unwrap();
        assert_eq!(g.value(y).data(), g.value(hs[j]).data());
    }
}

#[test]
fn both_joins_pass_gradient_to_the_relevance_head() {
    let (vocab, ex) = tiny_data(1, 8);
    for layers in [vec![JoinLayer::CrossAttention], vec![JoinLayer::FinalLayer]] {
        let m = tiny_multee(&vocab, &layers, RelevanceKind::Learned, 9);
        let head = multee_parts(&m).relevance.head;
        let g = Graph::new(&m.store);
        let out = m.forward_example(&g, &ex[0]).unwrap();
        let grads = g.backward(out[0].logit);
        let gw = grads.param(head.w).expect("relevance head receives a gradient");
        assert!(gw.data().iter().any(|v| v.abs() > 1e-12), "{layers:?}");
    }
}

#[test]
fn identical_choices_get_equal_scores() {
    let records = qa_records(3, 3, 10);
    let vocab = vocab_for(&records);
    for kind in [ModelKind::Multee, ModelKind::Max, ModelKind::Concat] {
        let m = QaModel::new(baseline_config(kind, 4, 11), &vocab).unwrap();
        for r in &records {
            let mut r = r.clone();
            r.choices[1] = r.choices[0].clone();
            let h = r.hypotheses.as_mut().unwrap();
            h[1] = h[0].clone();
            let ex = QaExample::from_record(&r, 0, &vocab).unwrap();
            let pred = m.predict(&ex).unwrap();
            assert!((pred.scores[0] - pred.scores[1]).abs() < 1e-6, "{kind:?}");
        }
    }
}

fn padded(ex: &QaExample, n: usize) -> QaExample {
    let mut out = ex.clone();
    out.premises = ex.premises.iter().map(|p| p.padded(n)).collect();
    out.hypotheses = ex.hypotheses.iter().map(|h| h.padded(n + 1)).collect();
    out
}

#[test]
fn padding_changes_no_output() {
    let (vocab, ex) = tiny_data(4, 12);
    let models = [
        tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 13),
        tiny_multee(&vocab, &[JoinLayer::CrossAttention], RelevanceKind::ConstantOnes, 13),
        QaModel::new(baseline_config(ModelKind::Max, 4, 13), &vocab).unwrap(),
        QaModel::new(baseline_config(ModelKind::Concat, 4, 13), &vocab).unwrap(),
    ];
    for m in &models {
        for e in &ex {
            let a = m.predict(e).unwrap();
            let b = m.predict(&padded(e, 3)).unwrap();
            assert!(max_abs_diff(&a.logits, &b.logits) <= 1e-6);
            for (x, y) in a.alphas.iter().zip(&b.alphas) {
                if let (Some(x), Some(y)) = (x, y) {
                    assert!(max_abs_diff(x, y) <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn permuting_premises_permutes_alpha_and_keeps_predictions() {
    let (vocab, ex) = tiny_data(4, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for kind in [RelevanceKind::Learned, RelevanceKind::Direct, RelevanceKind::ConstantOnes] {
        let m = tiny_multee(&vocab, &CA_FL, kind, 16);
        for e in &ex {
            assert!(!e.contiguous);
            let mut perm: Vec<usize> = (0..e.premises.len()).collect();
            perm.shuffle(&mut rng);
            let a = m.predict(e).unwrap();
            let b = m.predict(&permute_premises(e, &perm)).unwrap();
            assert!(max_abs_diff(&a.scores, &b.scores) <= 1e-6);
            assert!(max_abs_diff(&a.logits, &b.logits) <= 1e-6);
            assert_eq!(a.predicted, b.predicted);
            for (x, y) in a.alphas.iter().zip(&b.alphas) {
                if let (Some(x), Some(y)) = (x, y) {
                    let x_perm: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
                    assert!(max_abs_diff(&x_perm, y) <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn max_baseline_is_join_score_with_unit_weights() {
    let mut checked = 0;
    for seed in 0..25u64 {
        let records = qa_records(1, 1 + (seed as usize % 4), 100 + seed);
        let vocab = vocab_for(&records);
        let ex = examples(&records, &vocab);
        let m = QaModel::new(baseline_config(ModelKind::Max, 3, seed), &vocab).unwrap();
        for c in 0..ex[0].choices.len() {
            let probs = m.premise_probabilities(&ex[0], c).unwrap();
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(m.baseline_max(&ex[0], c).unwrap(), max);
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}

#[test]
fn single_premise_baselines_reduce_to_the_entailment_stack() {
    let (vocab, mut ex) = tiny_data(2, 17);
    for e in ex.iter_mut() {
        e.premises.truncate(1);
        e.premise_texts.truncate(1);
        e.relevance_labels = None;
    }
    for kind in [ModelKind::Max, ModelKind::Concat] {
        let m = QaModel::new(baseline_config(kind, 4, 18), &vocab).unwrap();
        let Parts::Baseline(stack) = m.parts else { unreachable!() };
        for e in &ex {
            assert_eq!(m.concat_premise(e), e.premises[0]);
            for c in 0..e.choices.len() {
                let g = Graph::new(&m.store);
                let p = g.value(stack.f_e_p(&g, &e.premises[0], &e.hypotheses[c]).unwrap().probs).get(0, 0);
                let got = match kind {
                    ModelKind::Max => m.baseline_max(e, c).unwrap(),
                    _ => m.baseline_concat(e, c).unwrap(),
                };
                assert_eq!(got, p);
                let lp = m.forward(e, c).unwrap().probability;
                assert!((lp - p).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn concat_embedding_is_join_embedding_with_unit_weights() {
    let (vocab, ex) = tiny_data(3, 19);
    let m = QaModel::new(baseline_config(ModelKind::Concat, 4, 20), &vocab).unwrap();
    let Parts::Baseline(stack) = m.parts else { unreachable!() };
    for e in &ex {
        let g = Graph::new(&m.store);
        let embedded: Vec<_> = e.premises.iter().map(|p| stack.encoder.embed(&g, p).unwrap()).collect();
        let h = stack.encoder.embed(&g, &e.hypotheses[0]).unwrap();
        let ones = g.constant(Mat::filled(1, e.premises.len(), 1.0));
        let (joined, _) = join_embedding(&g, &embedded, &h, ones).unwrap();
        let direct = stack.encoder.embed(&g, &TokenSeq::join(&e.premises, None)).unwrap();
        assert_eq!(*g.value(joined.x), *g.value(direct.x));
        assert_eq!(joined.mask, direct.mask);
        let with_sep = m.concat_premise(e);
        assert_eq!(with_sep.len(), direct.mask.len() + e.premises.len() - 1);
    }
}

#[test]
fn concat_premise_is_truncated_to_the_cap() {
    let (vocab, ex) = tiny_data(1, 21);
    let mut cfg = baseline_config(ModelKind::Concat, 4, 0);
    cfg.max_concat_len = 7;
    let m = QaModel::new(cfg, &vocab).unwrap();
    let joined = m.concat_premise(&ex[0]);
    assert_eq!(joined.len(), 7);
    assert_eq!(joined.tokens[..], m_first_tokens(&ex[0], 7)[..]);
    assert!(m.predict(&ex[0]).is_ok());
}

fn m_first_tokens(e: &QaExample, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for (i, p) in e.premises.iter().enumerate() {
        if i > 0 {
            out.push("<sep>".to_string());
        }
        out.extend(p.tokens.iter().cloned());
    }
    out.truncate(n);
    out
}

#[test]
fn predictions_are_deterministic_and_bounded() {
    let (vocab, ex) = tiny_data(3, 22);
    let a = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 23);
    let b = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 23);
    for e in &ex {
        let (pa, pb) = (a.predict(e).unwrap(), b.predict(e).unwrap());
        assert_eq!(pa, pb);
        assert!((pa.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..e.choices.len() {
            let s = a.forward(e, c).unwrap();
            assert!((0.0..=1.0).contains(&s.probability));
            let alpha = s.alpha.unwrap();
            assert!((alpha.values().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn multi_label_threshold_can_predict_nothing() {
    let (scores, predicted) = decide(&[-2.0, -1.0], &[0.1, 0.49], TaskType::MultiLabel);
    assert_eq!(scores, vec![0.1, 0.49]);
    assert!(predicted.is_empty());
    let (_, predicted) = decide(&[0.0, 0.0, 1.0], &[0.5, 0.2, 0.9], TaskType::MultiLabel);
    assert_eq!(predicted, vec![0, 2]);
    let (_, predicted) = decide(&[1.0, 1.0], &[0.7, 0.7], TaskType::SingleCorrect);
    assert_eq!(predicted, vec![0]);
}

#[test]
fn qa_checkpoint_round_trip_reproduces_predictions() {
    let (vocab, ex) = tiny_data(2, 24);
    let m = tiny_multee(&vocab, &CA_FL, RelevanceKind::Direct, 25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.json");
    m.to_checkpoint(&vocab).unwrap().save(&path).unwrap();
    let (back, v2) = QaModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(back.config, m.config);
    for e in &ex {
        assert_eq!(back.predict(e).unwrap(), m.predict(e).unwrap());
    }
}

#[test]
fn pretrained_weights_seed_every_stack_copy_but_not_the_head() {
    let (vocab, _) = tiny_data(1, 26);
    let mut m = tiny_multee(&vocab, &CA_FL, RelevanceKind::Learned, 27);
    let nli = EntailmentModel::new(m.dims, 28);
    let ck = Checkpoint::new("nli", m.dims, None, &vocab, nli.store.to_named());
    let head_before = m.store.to_named()["head.out.w"].clone();
    let copied = m.load_pretrained(&ck, &vocab).unwrap();
    assert!(copied > 0);
    let named = m.store.to_named();
    let src = nli.store.to_named();
    assert_eq!(named["embedding"], src["embedding"]);
    for prefix in ["ca.", "fl.", "relevance."] {
        assert_eq!(named[&format!("{prefix}compose.proj.w")], src["compose.proj.w"]);
    }
    assert_eq!(named["relevance.classifier.w"], src["classifier.w"]);
    assert_eq!(named["head.out.w"], head_before);
    let qa_ck = m.to_checkpoint(&vocab).unwrap();
    assert!(m.load_pretrained(&qa_ck, &vocab).is_err());
}

#[test]
fn invalid_aggregator_configs_are_rejected() {
    let (vocab, _) = tiny_data(1, 29);
    for layers in [vec![], vec![JoinLayer::FinalLayer, JoinLayer::FinalLayer]] {
        let mut cfg = multee_config(&CA_FL, RelevanceKind::Learned, 4, 0);
        cfg.aggregator = AggregatorConfig::new(&layers, RelevanceKind::Learned);
        let err = QaModel::new(cfg, &vocab).unwrap_err();
        assert_eq!(err.kind(), "ConfigError");
    }
}
