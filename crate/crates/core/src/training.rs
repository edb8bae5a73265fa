//! Losses, NLI pre-training and QA fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{NliExample, QaExample, TaskType, Vocab};
use crate::entailment::{EntailmentModel, EntailmentStack, StackDims};
use crate::error::{MulteeError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{metric_accuracy, metric_multirc, MetricReport};
use crate::model::{decide, Prediction, QaModel};
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::relevance::{relevance_loss_bce, relevance_loss_irsum};
use crate::tensor::Mat;

/// Clamp for probabilities entering binary cross entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceLoss {
    #[default]
    None,
    Bce,
    Irsum,
}

/// Which choices' α receive relevance supervision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceTarget {
    /// Only hypotheses built from correct answers.
    #[default]
    Gold,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Scratch,
    Pretrained(PathBuf),
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lambda() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}
fn d_patience() -> usize {
    5
}
fn d_clip() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task_type: TaskType,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub relevance_loss: RelevanceLoss,
    #[serde(default = "d_lambda")]
    pub relevance_lambda: f64,
    #[serde(default)]
    pub relevance_target: RelevanceTarget,
    #[serde(default = "d_true")]
    pub freeze_embeddings: bool,
    #[serde(default)]
    pub init: Init,
    /// Epochs without dev improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task_type: TaskType::SingleCorrect,
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            seed: 0,
            relevance_loss: RelevanceLoss::None,
            relevance_lambda: d_lambda(),
            relevance_target: RelevanceTarget::Gold,
            freeze_embeddings: true,
            init: Init::Scratch,
            patience: d_patience(),
            clip_norm: d_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MulteeError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MulteeError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MulteeError::config("train.learning_rate", "must be positive"));
        }
        if !(self.relevance_lambda >= 0.0 && self.relevance_lambda.is_finite()) {
            return Err(MulteeError::config("train.relevance_lambda", "must be non-negative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Accuracy for single-correct QA and NLI, F1a for multi-label QA.
    pub dev_metric: f64,
    /// Running minimum of `dev_loss`.
    pub best_dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Cross entropy of the softmax over choice logits (`1 x k`) against `gold`.
pub fn loss_single_correct(g: &Graph, logits: Var, gold: usize) -> Result<Var> {
    let (rows, k) = g.shape(logits);
    if rows != 1 || k < 2 {
        return Err(MulteeError::Shape(format!("need a 1xk row of k >= 2 logits, got {rows}x{k}")));
    }
    if gold >= k {
        return Err(MulteeError::Index(format!("gold index {gold} out of range for {k} choices")));
    }
    Ok(g.scale(g.pick(g.log_softmax(logits), 0, gold), -1.0))
}

/// Mean binary cross entropy of per-choice probabilities (`1 x k`) against membership in `gold`.
pub fn loss_multi_label(g: &Graph, probs: Var, gold: &[usize]) -> Result<Var> {
    let (rows, k) = g.shape(probs);
    if rows != 1 || k == 0 {
        return Err(MulteeError::Shape(format!("need a 1xk row of probabilities, got {rows}x{k}")));
    }
    if let Some(&bad) = gold.iter().find(|&&i| i >= k) {
        return Err(MulteeError::Index(format!("gold index {bad} out of range for {k} choices")));
    }
    let y: Vec<f64> = (0..k).map(|i| f64::from(u8::from(gold.contains(&i)))).collect();
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let q = g.add_const(g.scale(p, -1.0), 1.0);
    let pos = g.constant(Mat::row_vector(y.clone()));
    let neg = g.constant(Mat::row_vector(y.iter().map(|v| 1.0 - v).collect()));
    let terms = g.add(g.mul(pos, g.log(p)), g.mul(neg, g.log(q)));
    Ok(g.scale(g.sum(terms), -1.0 / k as f64))
}

/// Loss terms for one QA example.
#[derive(Clone, Copy, Debug)]
pub struct QaLoss {
    pub qa: Var,
    pub relevance: Option<Var>,
    pub total: Var,
}

/// QA loss plus `λ` times the relevance loss, when configured.
pub fn qa_example_loss(model: &QaModel, g: &Graph, ex: &QaExample, cfg: &TrainConfig) -> Result<QaLoss> {
    if ex.task_type != cfg.task_type {
        return Err(MulteeError::config(
            "train.task_type",
            format!("example {} is {:?}, training expects {:?}", ex.id, ex.task_type, cfg.task_type),
        ));
    }
    let outs = model.forward_example(g, ex)?;
    let qa = match cfg.task_type {
        TaskType::SingleCorrect => {
            let logits = g.concat_cols(&outs.iter().map(|o| o.logit).collect::<Vec<_>>());
            loss_single_correct(g, logits, ex.gold[0])?
        }
        TaskType::MultiLabel => {
            let probs: Vec<Var> = outs.iter().map(|o| model.choice_probability(g, o.logit)).collect();
            loss_multi_label(g, g.concat_cols(&probs), &ex.gold)?
        }
    };
    let relevance = match cfg.relevance_loss {
        RelevanceLoss::None => None,
        kind => {
            let y = ex.relevance_labels.as_ref().ok_or_else(|| {
                MulteeError::config(
                    "train.relevance_loss",
                    format!("example {} has no relevance labels", ex.id),
                )
            })?;
            let choices: Vec<usize> = match cfg.relevance_target {
                RelevanceTarget::Gold => ex.gold.clone(),
                RelevanceTarget::All => (0..outs.len()).collect(),
            };
            let mut terms = Vec::with_capacity(choices.len());
            for c in choices {
                let alpha = outs[c].alpha.ok_or_else(|| {
                    MulteeError::config("train.relevance_loss", "model produces no learned relevance weights")
                })?;
                terms.push(match kind {
                    RelevanceLoss::Bce => relevance_loss_bce(g, alpha, y)?,
                    _ => relevance_loss_irsum(g, alpha, y)?,
                });
            }
            if terms.is_empty() {
                None
            } else {
                let n = terms.len() as f64;
                Some(g.scale(g.sum(g.concat_cols(&terms)), 1.0 / n))
            }
        }
    };
    let total = match relevance {
        Some(r) => g.add(qa, g.scale(r, cfg.relevance_lambda)),
        None => qa,
    };
    Ok(QaLoss { qa, relevance, total })
}

/// 3-way cross entropy of one NLI pair.
fn nli_loss(stack: &EntailmentStack, g: &Graph, ex: &NliExample) -> Result<Var> {
    let out = stack.f_e_p(g, &ex.premise, &ex.hypothesis)?;
    Ok(g.scale(g.pick(g.log_softmax(out.logits), 0, ex.label.index()), -1.0))
}

fn add_grads(acc: &mut BTreeMap<ParamId, Mat>, grads: BTreeMap<ParamId, Mat>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

/// One epoch of minibatch Adam over `order`; returns the mean training loss.
fn run_epoch<E>(
    store: &mut ParamStore,
    opt: &mut Adam,
    data: &[E],
    order: &[usize],
    batch_size: usize,
    loss: &dyn Fn(&Graph, &E) -> Result<Var>,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let mut acc = BTreeMap::new();
        for &i in batch {
            let g = Graph::new(store);
            let l = loss(&g, &data[i])?;
            total += g.scalar_value(l);
            add_grads(&mut acc, g.backward(l).into_params());
        }
        let scale = 1.0 / batch.len() as f64;
        for m in acc.values_mut() {
            m.scale_assign(scale);
        }
        opt.step(store, &acc);
    }
    Ok(total / order.len() as f64)
}

/// Keeps the parameters of the best dev epoch and counts epochs since dev loss last improved.
struct Selection {
    best_metric: f64,
    best_metric_loss: f64,
    best_epoch: usize,
    best_loss: f64,
    since_loss_improved: usize,
    snapshot: Option<ParamStore>,
}

impl Selection {
    fn new() -> Self {
        Selection {
            best_metric: f64::NEG_INFINITY,
            best_metric_loss: f64::INFINITY,
            best_epoch: 0,
            best_loss: f64::INFINITY,
            since_loss_improved: 0,
            snapshot: None,
        }
    }

    fn offer(&mut self, epoch: usize, metric: f64, loss: f64, store: &ParamStore) {
        if metric > self.best_metric || (metric == self.best_metric && loss < self.best_metric_loss) {
            self.best_metric = metric;
            self.best_metric_loss = loss;
            self.best_epoch = epoch;
            self.snapshot = Some(store.clone());
        }
        if loss < self.best_loss {
            self.best_loss = loss;
            self.since_loss_improved = 0;
        } else {
            self.since_loss_improved += 1;
        }
    }
}

/// Dev loss and accuracy of an entailment model.
pub fn evaluate_nli(model: &EntailmentModel, data: &[NliExample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for ex in data {
        let g = Graph::new(&model.store);
        let out = model.stack.f_e_p(&g, &ex.premise, &ex.hypothesis)?;
        let lp = g.value(g.log_softmax(out.logits));
        loss -= lp.get(0, ex.label.index());
        let mut best = 0;
        for k in 1..lp.cols() {
            if lp.get(0, k) > lp.get(0, best) {
                best = k;
            }
        }
        correct += usize::from(best == ex.label.index());
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `f_e_p` with 3-way cross entropy. The returned model holds the epoch with the
/// lowest dev loss, which is also written to `checkpoint` when given.
pub fn pretrain_nli(
    train: &[NliExample],
    dev: &[NliExample],
    dims: StackDims,
    cfg: &TrainConfig,
    vocab: &Vocab,
    checkpoint: Option<&Path>,
) -> Result<(EntailmentModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MulteeError::config("data.nli_train", "no NLI training examples"));
    }
    let mut model = EntailmentModel::new(dims, cfg.seed);
    let ids = model.store.trainable_ids();
    let mut opt = Adam::new(cfg.adam(), &model.store, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sel = Selection::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let stack = model.stack;
        let loss = move |g: &Graph, ex: &NliExample| nli_loss(&stack, g, ex);
        let train_loss = run_epoch(&mut model.store, &mut opt, train, &order, cfg.batch_size, &loss)?;
        let (dev_loss, dev_acc) = if dev.is_empty() {
            (train_loss, 0.0)
        } else {
            evaluate_nli(&model, dev)?
        };
        sel.offer(epoch, -dev_loss, dev_loss, &model.store);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_metric: dev_acc,
            best_dev_loss: sel.best_loss,
        });
        log::info!("nli epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4} acc {dev_acc:.3}");
        if sel.since_loss_improved >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some(best) = sel.snapshot.take() {
        model.store = best;
    }
    let best_dev_metric = epochs[sel.best_epoch].dev_metric;
    let best_checkpoint = match checkpoint {
        Some(path) => {
            Checkpoint::new("nli", model.dims, None, vocab, model.store.to_named()).save(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch: sel.best_epoch,
            best_dev_metric,
            best_checkpoint,
            stopped_early,
            seed: cfg.seed,
            config: cfg.clone(),
        },
    ))
}

/// Predictions, mean QA loss and metrics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: MetricReport,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate_qa(model: &QaModel, data: &[QaExample]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    for ex in data {
        let g = Graph::new(&model.store);
        let outs = model.forward_example(&g, ex)?;
        let logit_vars: Vec<Var> = outs.iter().map(|o| o.logit).collect();
        let prob_vars: Vec<Var> = logit_vars.iter().map(|&l| model.choice_probability(&g, l)).collect();
        let l = match ex.task_type {
            TaskType::SingleCorrect => loss_single_correct(&g, g.concat_cols(&logit_vars), ex.gold[0])?,
            TaskType::MultiLabel => loss_multi_label(&g, g.concat_cols(&prob_vars), &ex.gold)?,
        };
        loss += g.scalar_value(l);
        let logits: Vec<f64> = logit_vars.iter().map(|&v| g.scalar_value(v)).collect();
        let probs: Vec<f64> = prob_vars.iter().map(|&v| g.scalar_value(v)).collect();
        let (scores, predicted) = decide(&logits, &probs, ex.task_type);
        predictions.push(Prediction {
            id: ex.id.clone(),
            logits,
            scores,
            predicted,
            alphas: outs.iter().map(|o| o.alpha.map(|a| g.value(a).data().to_vec())).collect(),
        });
    }
    let metrics = qa_metrics(data, &predictions)?;
    Ok(Evaluation {
        loss: if data.is_empty() { 0.0 } else { loss / data.len() as f64 },
        metrics,
        predictions,
    })
}

/// Metrics for predictions aligned with `data`.
pub fn qa_metrics(data: &[QaExample], predictions: &[Prediction]) -> Result<MetricReport> {
    let pred_sets: Vec<Vec<usize>> = predictions.iter().map(|p| p.predicted.clone()).collect();
    let gold_sets: Vec<Vec<usize>> = data.iter().map(|e| e.gold.clone()).collect();
    let mut report = metric_multirc(&pred_sets, &gold_sets)?;
    report.choices = data.iter().map(|e| e.choices.len()).sum();
    if !data.is_empty() && data.iter().all(|e| e.task_type == TaskType::SingleCorrect) {
        let p: Vec<usize> = pred_sets.iter().map(|s| s[0]).collect();
        let g: Vec<usize> = gold_sets.iter().map(|s| s[0]).collect();
        report.accuracy = Some(metric_accuracy(&p, &g)?);
    }
    Ok(report)
}

/// Accuracy for single-correct tasks, F1a otherwise.
pub fn selection_metric(report: &MetricReport) -> f64 {
    report.accuracy.unwrap_or(report.f1a.f1)
}

/// Applies `cfg.init` and the embedding freeze; returns the ids the optimizer should track.
pub fn prepare_finetune(model: &mut QaModel, cfg: &TrainConfig, vocab: &Vocab) -> Result<Vec<ParamId>> {
    if let Init::Pretrained(path) = &cfg.init {
        if !path.exists() {
            return Err(MulteeError::config(
                "train.init.pretrained",
                format!("checkpoint {} does not exist", path.display()),
            ));
        }
        let ck = Checkpoint::load(path)?;
        let n = model.load_pretrained(&ck, vocab)?;
        log::info!("initialised {n} parameters from {}", path.display());
    }
    for id in model.embedding_ids() {
        model.store.set_trainable(id, !cfg.freeze_embeddings);
    }
    Ok(model.store.trainable_ids())
}

/// Fine-tunes `model` on QA. On return the model holds the parameters of the best dev epoch.
pub fn finetune_qa(
    model: &mut QaModel,
    train: &[QaExample],
    dev: &[QaExample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MulteeError::config("data.train", "no QA training examples"));
    }
    if cfg.relevance_loss != RelevanceLoss::None {
        if let Some(ex) = train.iter().find(|e| e.relevance_labels.is_none()) {
            return Err(MulteeError::config(
                "train.relevance_loss",
                format!("relevance loss requested but example {} has no relevance labels", ex.id),
            ));
        }
    }
    let ids = prepare_finetune(model, cfg, vocab)?;
    let mut opt = Adam::new(cfg.adam(), &model.store, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sel = Selection::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // the forward pass reads parameters only through the graph, so the store can be moved out
        let mut store = std::mem::take(&mut model.store);
        let shell: &QaModel = model;
        let loss = |g: &Graph, ex: &QaExample| Ok(qa_example_loss(shell, g, ex, cfg)?.total);
        let result = run_epoch(&mut store, &mut opt, train, &order, cfg.batch_size, &loss);
        model.store = store;
        let train_loss = result?;
        let (dev_loss, dev_metric) = if dev.is_empty() {
            (train_loss, 0.0)
        } else {
            let ev = evaluate_qa(model, dev)?;
            (ev.loss, selection_metric(&ev.metrics))
        };
        sel.offer(epoch, dev_metric, dev_loss, &model.store);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_metric,
            best_dev_loss: sel.best_loss,
        });
        log::info!("qa epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4} metric {dev_metric:.3}");
        if sel.since_loss_improved >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some(best) = sel.snapshot.take() {
        model.store = best;
    }
    let best_checkpoint = match checkpoint {
        Some(path) => {
            model.to_checkpoint(vocab)?.save(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok(TrainReport {
        best_dev_metric: epochs[sel.best_epoch].dev_metric,
        epochs,
        best_epoch: sel.best_epoch,
        best_checkpoint,
        stopped_early,
        seed: cfg.seed,
        config: cfg.clone(),
    })
}
