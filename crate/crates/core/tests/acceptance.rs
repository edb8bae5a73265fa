//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use multee::checkpoint::Checkpoint;
use multee::corpus::{QaExample, SyntheticQaConfig, TokenSeq};
use multee::entailment::{cross_attend, EncodedSeq};
use multee::gradcheck::check_params;
use multee::graph::Graph;
use multee::harness::{
    prepare_data, relevance_diagnostics, run_pretrain, run_with_data, DataConfig, EvalConfig, EvalSplit,
    ExperimentConfig, NliSource, PreparedData, PretrainSummary, QaSource, SyntheticNliSource,
};
use multee::joins::{join_cross_attention, join_embedding, join_score};
use multee::metrics::metric_multirc;
use multee::model::{JoinLayer, ModelKind, Parts, QaModel};
use multee::params::ParamStore;
use multee::relevance::{RelevanceKind, RelevanceWeights};
use multee::tensor::Mat;
use multee::training::{evaluate_qa, qa_example_loss, Evaluation, Init, RelevanceLoss, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> std::result::Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

// ---------------------------------------------------------------------------
// 1. reductions

fn reductions() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new();
    for case in 0..100 {
        let g = Graph::new(&store);
        let n = rng.gen_range(1..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let joined = join_score(&g, g.constant(Mat::row_vector(s.clone())), g.constant(Mat::filled(1, n, 1.0)))
            .map_err(|e| e.to_string())?;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure(g.scalar_value(joined) == max, || format!("case {case}: join_score differs from max"))?;
    }

    // the Max baseline itself, on model-produced premise probabilities
    let mut model_cases = 0;
    for seed in 0..25u64 {
        let records = qa_records(1, 1 + seed as usize % 4, 500 + seed);
        let vocab = vocab_for(&records);
        let ex = examples(&records, &vocab);
        let m = QaModel::new(baseline_config(ModelKind::Max, 6, seed), &vocab).map_err(|e| e.to_string())?;
        for c in 0..ex[0].choices.len() {
            let probs = m.premise_probabilities(&ex[0], c).map_err(|e| e.to_string())?;
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let got = m.baseline_max(&ex[0], c).map_err(|e| e.to_string())?;
            ensure(got == max, || format!("Max baseline {got} vs max {max}"))?;
            model_cases += 1;
        }
    }

    let (vocab, ex) = tiny_data(20, 2);
    let m = QaModel::new(baseline_config(ModelKind::Concat, 6, 3), &vocab).map_err(|e| e.to_string())?;
    let Parts::Baseline(stack) = m.parts else {
        return Err("Concat model has no entailment stack".into());
    };
    for e in &ex {
        let g = Graph::new(&m.store);
        let embedded = e
            .premises
            .iter()
            .map(|p| stack.encoder.embed(&g, p))
            .collect::<multee::error::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let h = stack.encoder.embed(&g, &e.hypotheses[0]).map_err(|e| e.to_string())?;
        let ones = g.constant(Mat::filled(1, e.premises.len(), 1.0));
        let (joined, _) = join_embedding(&g, &embedded, &h, ones).map_err(|e| e.to_string())?;
        let direct = stack
            .encoder
            .embed(&g, &TokenSeq::join(&e.premises, None))
            .map_err(|e| e.to_string())?;
        ensure(*g.value(joined.x) == *g.value(direct.x) && joined.mask == direct.mask, || {
            format!("example {}: joined embedding differs from the concatenation", e.id)
        })?;
    }
    within(start.elapsed(), Duration::from_secs(10), "reductions")?;
    Ok(format!(
        "100 score joins + {model_cases} Max-baseline choices exact, {} embedding joins exact, {:.2?}",
        ex.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 2. normalisation

fn random_encoded(g: &Graph, rng: &mut ChaCha8Rng, len: usize, d: usize) -> EncodedSeq {
    let real = rng.gen_range(1..=len);
    EncodedSeq {
        x: g.constant(random_mat(rng, len, d)),
        mask: (0..len).map(|i| i < real).collect(),
    }
}

fn normalisation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParamStore::new();
    let mut worst_row = 0.0f64;
    let mut worst_alpha = 0.0f64;
    for case in 0..100 {
        let g = Graph::new(&store);
        let n = rng.gen_range(1..=6);
        let h_len = rng.gen_range(1..=10);
        let d = rng.gen_range(1..=5);
        let h = random_encoded(&g, &mut rng, h_len, d);
        let atts: Vec<_> = (0..n)
            .map(|_| {
                let p_len = rng.gen_range(1..=12);
                cross_attend(&g, &random_encoded(&g, &mut rng, p_len, d), &h)
            })
            .collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let alpha = RelevanceWeights::softmax(&logits);
        let sum: f64 = alpha.values().iter().sum();
        worst_alpha = worst_alpha.max((sum - 1.0).abs());
        let joined = join_cross_attention(&g, &atts, alpha.to_var(&g)).map_err(|e| e.to_string())?;
        let m = g.value(joined.attention.m_hp);
        ensure(m.shape() == (h_len, *joined.boundaries.last().unwrap()), || {
            format!("case {case}: joined shape {:?}", m.shape())
        })?;
        for r in 0..m.rows() {
            worst_row = worst_row.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_row <= 1e-5, || format!("joined row sum off by {worst_row:e}"))?;

    // α from freshly initialised models on generated examples
    let records = gen_qa(40, 3, Some(9), 5);
    let vocab = vocab_for(&records);
    let ex = examples(&records, &vocab);
    for layers in [&CA_FL[..], &[JoinLayer::CrossAttention], &[JoinLayer::FinalLayer]] {
        let m = QaModel::new(multee_config(layers, RelevanceKind::Learned, 6, 6), &vocab).map_err(|e| e.to_string())?;
        for e in &ex {
            let p = m.predict(e).map_err(|e| e.to_string())?;
            for a in p.alphas.iter().flatten() {
                worst_alpha = worst_alpha.max((a.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst_alpha <= 1e-6, || format!("α sum off by {worst_alpha:e}"))?;
    Ok(format!(
        "max |row sum - 1| = {worst_row:.1e} over 100 shapes, max |Σα - 1| = {worst_alpha:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. gradients

fn gradients() -> Check {
    let start = Instant::now();
    let records = qa_records(1, 3, 7);
    let vocab = vocab_for(&records);
    let ex = examples(&records, &vocab).remove(0);
    let mut m = QaModel::new(multee_config(&CA_FL, RelevanceKind::Learned, 8, 8), &vocab).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        relevance_loss: RelevanceLoss::Bce,
        ..TrainConfig::default()
    };
    let groups = m.param_groups();
    let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
    let shell = m.clone();
    let reports = check_params(&mut m.store, &ids, &[1e-5, 1e-6], 8, |g| {
        qa_example_loss(&shell, g, &ex, &cfg).expect("loss").total
    });
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no parameters")?;
    ensure(reports.iter().all(|r| r.entries_checked > 0), || "a parameter was skipped".into())?;
    ensure(worst.max_rel_error < 1e-4, || {
        format!("{} relative error {:e}", worst.name, worst.max_rel_error)
    })?;
    within(start.elapsed(), Duration::from_secs(120), "gradient check")?;
    Ok(format!(
        "{} groups / {} tensors, worst {} at {:.1e}, {:.1?}",
        groups.len(),
        reports.len(),
        worst.name,
        worst.max_rel_error,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 4. padding and permutation

fn padded(ex: &QaExample, n: usize) -> QaExample {
    let mut out = ex.clone();
    out.premises = ex.premises.iter().map(|p| p.padded(n)).collect();
    out.hypotheses = ex.hypotheses.iter().map(|h| h.padded(n + 2)).collect();
    out
}

fn invariances() -> Check {
    let records = gen_qa(12, 3, Some(7), 10);
    let vocab = vocab_for(&records);
    let ex = examples(&records, &vocab);
    let mut models = Vec::new();
    for kind in [RelevanceKind::Learned, RelevanceKind::Direct, RelevanceKind::ConstantOnes] {
        for layers in [&CA_FL[..], &[JoinLayer::CrossAttention], &[JoinLayer::FinalLayer]] {
            models.push(QaModel::new(multee_config(layers, kind, 6, 11), &vocab).map_err(|e| e.to_string())?);
        }
    }
    for kind in [ModelKind::Max, ModelKind::Concat] {
        models.push(QaModel::new(baseline_config(kind, 6, 11), &vocab).map_err(|e| e.to_string())?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut pad_diff, mut perm_diff) = (0.0f64, 0.0f64);
    for m in &models {
        for e in &ex {
            let a = m.predict(e).map_err(|e| e.to_string())?;
            let b = m.predict(&padded(e, 3)).map_err(|e| e.to_string())?;
            pad_diff = pad_diff.max(max_abs_diff(&a.logits, &b.logits));
            pad_diff = pad_diff.max(max_abs_diff(&a.scores, &b.scores));
            for (x, y) in a.alphas.iter().zip(&b.alphas) {
                if let (Some(x), Some(y)) = (x, y) {
                    pad_diff = pad_diff.max(max_abs_diff(x, y));
                }
            }
            if m.config.kind == ModelKind::Multee && !e.contiguous {
                let mut perm: Vec<usize> = (0..e.premises.len()).collect();
                perm.shuffle(&mut rng);
                let c = m.predict(&permute_premises(e, &perm)).map_err(|e| e.to_string())?;
                perm_diff = perm_diff.max(max_abs_diff(&a.scores, &c.scores));
                perm_diff = perm_diff.max(max_abs_diff(&a.logits, &c.logits));
                ensure(a.predicted == c.predicted, || format!("example {}: prediction changed", e.id))?;
                for (x, y) in a.alphas.iter().zip(&c.alphas) {
                    if let (Some(x), Some(y)) = (x, y) {
                        let moved: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
                        perm_diff = perm_diff.max(max_abs_diff(&moved, y));
                    }
                }
            }
        }
    }
    ensure(pad_diff <= 1e-6, || format!("padding moved an output by {pad_diff:e}"))?;
    ensure(perm_diff <= 1e-6, || format!("permutation moved an output by {perm_diff:e}"))?;
    Ok(format!(
        "{} models x {} examples: pad Δ {pad_diff:.1e}, permutation Δ {perm_diff:.1e}",
        models.len(),
        ex.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. metrics

/// Counts over every choice index that appears anywhere, one question at a time.
fn brute_force(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> (f64, f64, f64) {
    let k = pred.iter().chain(gold).flatten().max().map_or(0, |m| m + 1);
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    let (mut f1m, mut em) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        let inp: Vec<bool> = (0..k).map(|c| p.contains(&c)).collect();
        let ing: Vec<bool> = (0..k).map(|c| g.contains(&c)).collect();
        let qtp = (0..k).filter(|&c| inp[c] && ing[c]).count();
        let qp = inp.iter().filter(|&&b| b).count();
        let qg = ing.iter().filter(|&&b| b).count();
        tp += qtp;
        np += qp;
        ng += qg;
        f1m += if qp + qg == 0 {
            1.0
        } else {
            2.0 * qtp as f64 / (qp + qg) as f64
        };
        em += f64::from(u8::from(inp == ing));
    }
    let f1a = if np + ng == 0 { 1.0 } else { 2.0 * tp as f64 / (np + ng) as f64 };
    let q = pred.len() as f64;
    (f1a, f1m / q, em / q)
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let subset = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> { (0..k).filter(|_| rng.gen_bool(0.45)).collect() };
    for case in 0..1000 {
        let q = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=5);
        let pred: Vec<Vec<usize>> = (0..q).map(|_| subset(&mut rng, k)).collect();
        let gold: Vec<Vec<usize>> = (0..q).map(|_| subset(&mut rng, k)).collect();
        let r = metric_multirc(&pred, &gold).map_err(|e| e.to_string())?;
        let (f1a, f1m, em) = brute_force(&pred, &gold);
        ensure(
            (r.f1a.f1 - f1a).abs() < 1e-12 && (r.f1m - f1m).abs() < 1e-12 && r.em == em,
            || format!("case {case}: {:?} vs oracle ({f1a}, {f1m}, {em})", r),
        )?;
    }
    let hand = metric_multirc(&[vec![0]], &[vec![0, 1]]).map_err(|e| e.to_string())?;
    ensure((hand.f1a.f1 - 2.0 / 3.0).abs() < 1e-12 && hand.em == 0.0, || {
        format!("hand case gave F1 {} EM {}", hand.f1a.f1, hand.em)
    })?;
    Ok("1000 random cases match the oracle; hand case F1 = 2/3, EM = 0".into())
}

// ---------------------------------------------------------------------------
// training suite (criteria 5-8 and 10)

fn gen_qa(n: usize, min_distractors: usize, max_distractors: Option<usize>, seed: u64) -> Vec<multee::corpus::QaRecord> {
    multee::corpus::gen_synthetic_qa(&SyntheticQaConfig {
        n_entities: 30,
        n_relations: 6,
        n_questions: n,
        n_distractors: min_distractors,
        max_distractors,
        n_choices: 4,
        seed,
        contiguous: false,
    })
    .expect("synthetic QA")
}

const MIN_DISTRACTORS: usize = 3;
const MAX_DISTRACTORS: usize = 9;
const TRAIN_QUESTIONS: usize = 1000;
const DEV_QUESTIONS: usize = 200;
const DIM: usize = 16;
const FINETUNE_EPOCHS: usize = 16;
const FINETUNE_LR: f64 = 5e-3;

fn qa_source(n: usize, seed: u64) -> QaSource {
    QaSource::Synthetic(SyntheticQaConfig {
        n_entities: 30,
        n_relations: 6,
        n_questions: n,
        n_distractors: MIN_DISTRACTORS,
        max_distractors: Some(MAX_DISTRACTORS),
        n_choices: 4,
        seed,
        contiguous: false,
    })
}

fn nli_source(n: usize, seed: u64) -> NliSource {
    NliSource::Synthetic(SyntheticNliSource {
        n_examples: n,
        seed,
        n_entities: 30,
        n_relations: 6,
        n_facts: 150,
        world_seed: 4,
    })
}

fn base_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        data: DataConfig {
            train: qa_source(TRAIN_QUESTIONS, 1),
            dev: qa_source(DEV_QUESTIONS, 2),
            test: None,
            nli_train: Some(nli_source(3000, 3)),
            nli_dev: Some(nli_source(300, 5)),
            vocab: None,
        },
        model: multee_config(&CA_FL, RelevanceKind::Learned, DIM, 0),
        pretrain: Some(TrainConfig {
            epochs: 10,
            learning_rate: 3e-3,
            freeze_embeddings: false,
            ..TrainConfig::default()
        }),
        train: TrainConfig {
            epochs: FINETUNE_EPOCHS,
            learning_rate: FINETUNE_LR,
            freeze_embeddings: false,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            output_dir: out.to_path_buf(),
            split: EvalSplit::Dev,
            save_predictions: false,
        },
    }
}

struct Run {
    accuracy: f64,
    eval: Evaluation,
    checkpoint: PathBuf,
    elapsed: Duration,
}

struct Suite {
    base: ExperimentConfig,
    data: PreparedData,
    pretrained: PretrainSummary,
    pretrain_time: Duration,
    root: tempfile::TempDir,
}

impl Suite {
    fn new() -> multee::error::Result<Suite> {
        let root = tempfile::tempdir()?;
        let base = base_config(&root.path().join("base"));
        let data = prepare_data(&base)?;
        let start = Instant::now();
        let pretrained = run_pretrain(&base, &data)?;
        Ok(Suite {
            base,
            data,
            pretrained,
            pretrain_time: start.elapsed(),
            root,
        })
    }

    fn variant(&self, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.name = name.into();
        cfg.eval.output_dir = self.root.path().join(name);
        edit(&mut cfg);
        cfg
    }

    fn run(&self, cfg: &ExperimentConfig, pretrained: bool) -> multee::error::Result<Run> {
        let start = Instant::now();
        let mut cfg = cfg.clone();
        if !pretrained {
            cfg.train.init = Init::Scratch;
        }
        let record = run_with_data(&cfg, &self.data, pretrained.then(|| self.pretrained.clone()))?;
        let (model, _) = QaModel::from_checkpoint(&Checkpoint::load(&record.checkpoint)?)?;
        let eval = evaluate_qa(&model, &self.data.dev)?;
        let run = Run {
            accuracy: record.metrics.accuracy.unwrap_or(0.0),
            eval,
            checkpoint: record.checkpoint,
            elapsed: start.elapsed(),
        };
        println!(
            "  run {:<14} dev accuracy {:.3} ({:.0?})",
            cfg.name, run.accuracy, run.elapsed
        );
        Ok(run)
    }
}

struct Runs {
    multee: Run,
    max: Run,
    concat: Run,
    no_alpha: Run,
    ca: Run,
    fl: Run,
    scratch: Run,
    bce: Run,
    irsum: Run,
}

fn train_all(s: &Suite) -> multee::error::Result<Runs> {
    let multee = s.run(&s.variant("multee", |_| {}), true)?;
    let max = s.run(
        &s.variant("max", |c| c.model = baseline_config(ModelKind::Max, DIM, 0)),
        true,
    )?;
    let concat = s.run(
        &s.variant("concat", |c| c.model = baseline_config(ModelKind::Concat, DIM, 0)),
        true,
    )?;
    let no_alpha = s.run(
        &s.variant("no_alpha", |c| c.model.aggregator.use_relevance = RelevanceKind::ConstantOnes),
        true,
    )?;
    let ca = s.run(
        &s.variant("ca", |c| c.model.aggregator.join_layers = vec![JoinLayer::CrossAttention]),
        true,
    )?;
    let fl = s.run(
        &s.variant("fl", |c| c.model.aggregator.join_layers = vec![JoinLayer::FinalLayer]),
        true,
    )?;
    let scratch = s.run(&s.variant("scratch", |_| {}), false)?;
    let bce = s.run(&s.variant("bce", |c| c.train.relevance_loss = RelevanceLoss::Bce), true)?;
    let irsum = s.run(&s.variant("irsum", |c| c.train.relevance_loss = RelevanceLoss::Irsum), true)?;
    Ok(Runs {
        multee,
        max,
        concat,
        no_alpha,
        ca,
        fl,
        scratch,
        bce,
        irsum,
    })
}

fn separation(r: &Runs) -> Check {
    let (m, mx, cc) = (r.multee.accuracy, r.max.accuracy, r.concat.accuracy);
    let elapsed = r.multee.elapsed + r.max.elapsed + r.concat.elapsed;
    let detail = format!("Multee {m:.3}, Max {mx:.3}, Concat {cc:.3}, {elapsed:.0?}");
    ensure(m >= 0.90, || format!("Multee below 0.90: {detail}"))?;
    ensure(mx <= 0.60, || format!("Max above 0.60: {detail}"))?;
    ensure(m - cc >= 0.05, || format!("Concat within 0.05 of Multee: {detail}"))?;
    within(elapsed, Duration::from_secs(15 * 60), "the three fine-tuning runs")?;
    Ok(detail)
}

fn ablation(r: &Runs) -> Check {
    let (with, without) = (r.multee.accuracy, r.no_alpha.accuracy);
    let (ca, fl) = (r.ca.accuracy, r.fl.accuracy);
    let detail = format!("α {with:.3} vs no α {without:.3}; CA+FL {with:.3}, CA {ca:.3}, FL {fl:.3}");
    ensure(with - without >= 0.03, || format!("α margin below 0.03: {detail}"))?;
    ensure(with >= ca.max(fl) - 0.01, || format!("CA+FL regresses beyond tolerance: {detail}"))?;
    Ok(detail)
}

fn pretraining(s: &Suite, r: &Runs) -> Check {
    let nli = s.pretrained.dev_accuracy;
    let (pre, scratch) = (r.multee.accuracy, r.scratch.accuracy);
    let detail = format!(
        "NLI dev {nli:.3} ({:.0?}); QA pretrained {pre:.3} vs scratch {scratch:.3} at {FINETUNE_EPOCHS} epochs",
        s.pretrain_time
    );
    ensure(nli > 0.85, || format!("NLI pre-training too weak: {detail}"))?;
    ensure(pre - scratch >= 0.03, || format!("pre-training gain below 0.03: {detail}"))?;
    Ok(detail)
}

fn supervision(s: &Suite, r: &Runs) -> Check {
    let (bce_top2, bce_h) = relevance_diagnostics(&r.bce.eval, &s.data.dev).ok_or("BCE model produced no α")?;
    let (ir_top2, ir_h) = relevance_diagnostics(&r.irsum.eval, &s.data.dev).ok_or("IR-Sum model produced no α")?;
    let detail = format!("BCE top-2 {bce_top2:.3} entropy {bce_h:.3}; IR-Sum top-2 {ir_top2:.3} entropy {ir_h:.3}");
    ensure(bce_top2 > 0.9, || format!("BCE top-2 not above 0.9: {detail}"))?;
    ensure(ir_h < bce_h, || format!("IR-Sum α not sharper than BCE: {detail}"))?;
    Ok(detail)
}

fn determinism(s: &Suite, r: &Runs) -> Check {
    let again = prepare_data(&s.base).map_err(|e| e.to_string())?;
    ensure(
        again.train == s.data.train && again.dev == s.data.dev && again.nli_train == s.data.nli_train,
        || "regenerated data differs".into(),
    )?;
    ensure(again.vocab.tokens() == s.data.vocab.tokens(), || "rebuilt vocabulary differs".into())?;

    let pre_cfg = s.variant("pretrain_again", |_| {});
    let pre = run_pretrain(&pre_cfg, &s.data).map_err(|e| e.to_string())?;
    let a = std::fs::read(&s.pretrained.checkpoint).map_err(|e| e.to_string())?;
    let b = std::fs::read(&pre.checkpoint).map_err(|e| e.to_string())?;
    ensure(a == b, || "NLI checkpoint differs between identical runs".into())?;
    ensure(pre.report.epochs == s.pretrained.report.epochs, || "NLI epoch history differs".into())?;

    let rerun = s
        .run(
            &s.variant("concat_again", |c| c.model = baseline_config(ModelKind::Concat, DIM, 0)),
            true,
        )
        .map_err(|e| e.to_string())?;
    let a = Checkpoint::load(&r.concat.checkpoint).map_err(|e| e.to_string())?;
    let b = Checkpoint::load(&rerun.checkpoint).map_err(|e| e.to_string())?;
    ensure(a == b, || "QA checkpoint differs between identical runs".into())?;
    ensure(rerun.eval == r.concat.eval, || "QA predictions differ between identical runs".into())?;

    let (first, second) = (normalisation()?, normalisation()?);
    ensure(first == second, || "property sweep differs between runs".into())?;
    Ok("data, NLI checkpoint, QA checkpoint and predictions identical across reruns".into())
}

// ---------------------------------------------------------------------------

fn report(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    match &outcome {
        Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{elapsed:.1?}]"),
        Err(why) => println!("criterion {n:>2} {name}: FAIL ({why}) [{elapsed:.1?}]"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let only_fast = std::env::args().any(|a| a == "--fast");
    let mut results = vec![
        report(1, "reduction equivalences", reductions),
        report(2, "normalisation invariants", normalisation),
        report(3, "gradient correctness", gradients),
        report(4, "pad and permutation invariance", invariances),
        report(9, "metric oracles", metrics),
    ];
    if !only_fast {
        println!("training the synthetic suite ...");
        match Suite::new().and_then(|s| train_all(&s).map(|r| (s, r))) {
            Ok((s, r)) => {
                results.push(report(5, "multi-hop separation", || separation(&r)));
                results.push(report(6, "ablation directions", || ablation(&r)));
                results.push(report(7, "pre-training effect", || pretraining(&s, &r)));
                results.push(report(8, "relevance supervision", || supervision(&s, &r)));
                results.push(report(10, "determinism", || determinism(&s, &r)));
            }
            Err(e) => {
                for (n, name) in [
                    (5, "multi-hop separation"),
                    (6, "ablation directions"),
                    (7, "pre-training effect"),
                    (8, "relevance supervision"),
                    (10, "determinism"),
                ] {
                    results.push(report(n, name, || Err(format!("training suite failed: {e}"))));
                }
            }
        }
    }
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
