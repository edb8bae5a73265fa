//! Config-driven experiments, the ablation grid and attention export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    gen_synthetic_nli, gen_synthetic_qa, nli_token_lists, qa_token_lists, read_nli_records, read_qa_records,
    NliExample, NliRecord, QaExample, QaRecord, SyntheticNliConfig, SyntheticQaConfig, SyntheticWorld, Vocab,
};
use crate::error::{MulteeError, Result};
use crate::metrics::MetricReport;
use crate::model::{JoinLayer, ModelConfig, QaModel};
use crate::relevance::{entropy, RelevanceKind};
use crate::training::{
    evaluate_nli, evaluate_qa, finetune_qa, pretrain_nli, selection_metric, Evaluation, Init, RelevanceLoss,
    TrainConfig, TrainReport,
};

/// A QA split read from a JSONL file or generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QaSource {
    Path(PathBuf),
    Synthetic(SyntheticQaConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticNliSource {
    pub n_examples: usize,
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub world_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NliSource {
    Path(PathBuf),
    Synthetic(SyntheticNliSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: QaSource,
    pub dev: QaSource,
    #[serde(default)]
    pub test: Option<QaSource>,
    #[serde(default)]
    pub nli_train: Option<NliSource>,
    #[serde(default)]
    pub nli_dev: Option<NliSource>,
    /// Fixed vocabulary file; built from all configured splits when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: EvalSplit,
    #[serde(default)]
    pub save_predictions: bool,
}

/// One experiment file. `pretrain`, when present, trains the NLI stack before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: Option<TrainConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const BLOCKS: [&str; 6] = ["name", "data", "model", "pretrain", "train", "eval"];

fn block<T: serde::de::DeserializeOwned>(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<T> {
    let v = obj
        .remove(key)
        .ok_or_else(|| MulteeError::config(key, "missing block"))?;
    serde_json::from_value(v).map_err(|e| MulteeError::config(key, e.to_string()))
}

impl ExperimentConfig {
    /// Parses an experiment document. Errors name the offending block.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| MulteeError::config("<root>", e.to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(MulteeError::config("<root>", "experiment must be a JSON object"));
        };
        if let Some(k) = obj.keys().find(|k| !BLOCKS.contains(&k.as_str())) {
            return Err(MulteeError::config(k.clone(), "unknown block"));
        }
        let name = match obj.remove("name") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(MulteeError::config("name", "must be a string")),
            None => "experiment".to_string(),
        };
        let pretrain = match obj.remove("pretrain") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| MulteeError::config("pretrain", e.to_string()))?),
        };
        let cfg = ExperimentConfig {
            name,
            data: block(&mut obj, "data")?,
            model: block(&mut obj, "model")?,
            pretrain,
            train: block(&mut obj, "train")?,
            eval: block(&mut obj, "eval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| MulteeError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate().map_err(|e| match e {
                MulteeError::Config { field, message } => {
                    MulteeError::config(field.replacen("train.", "pretrain.", 1), message)
                }
                other => other,
            })?;
            if self.data.nli_train.is_none() {
                return Err(MulteeError::config("data.nli_train", "required by the pretrain block"));
            }
        }
        if self.eval.split == EvalSplit::Test && self.data.test.is_none() {
            return Err(MulteeError::config("data.test", "eval.split is `test` but no test split is configured"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for src in [Some(&mut d.train), Some(&mut d.dev), d.test.as_mut()].into_iter().flatten() {
            if let QaSource::Path(p) = src {
                fix(p);
            }
        }
        for src in [d.nli_train.as_mut(), d.nli_dev.as_mut()].into_iter().flatten() {
            if let NliSource::Path(p) = src {
                fix(p);
            }
        }
        if let Some(p) = d.vocab.as_mut() {
            fix(p);
        }
        if let Init::Pretrained(p) = &mut self.train.init {
            fix(p);
        }
        fix(&mut self.eval.output_dir);
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn nli_checkpoint_path(&self) -> PathBuf {
        self.eval.output_dir.join("nli_checkpoint.json")
    }

    pub fn qa_checkpoint_path(&self) -> PathBuf {
        self.eval.output_dir.join("qa_checkpoint.json")
    }
}

fn load_qa(src: &QaSource) -> Result<Vec<QaRecord>> {
    match src {
        QaSource::Path(p) => read_qa_records(p),
        QaSource::Synthetic(cfg) => gen_synthetic_qa(cfg),
    }
}

fn load_nli(src: &NliSource) -> Result<Vec<NliRecord>> {
    match src {
        NliSource::Path(p) => read_nli_records(p),
        NliSource::Synthetic(s) => {
            let world = SyntheticWorld::generate(s.n_entities, s.n_relations, s.n_facts, s.world_seed)?;
            gen_synthetic_nli(
                &SyntheticNliConfig {
                    n_examples: s.n_examples,
                    seed: s.seed,
                },
                &world,
            )
        }
    }
}

/// All splits of an experiment, tokenised with one vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
    pub test: Vec<QaExample>,
    pub nli_train: Vec<NliExample>,
    pub nli_dev: Vec<NliExample>,
}

impl PreparedData {
    pub fn eval_split(&self, split: EvalSplit) -> &[QaExample] {
        match split {
            EvalSplit::Dev => &self.dev,
            EvalSplit::Test => &self.test,
        }
    }
}

/// Loads every split. The vocabulary comes from `data.vocab`, else from a pretrained
/// checkpoint named by `train.init`, else from the tokens of all splits.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let train = load_qa(&d.train)?;
    let dev = load_qa(&d.dev)?;
    let test = d.test.as_ref().map(load_qa).transpose()?.unwrap_or_default();
    let nli_train = d.nli_train.as_ref().map(load_nli).transpose()?.unwrap_or_default();
    let nli_dev = d.nli_dev.as_ref().map(load_nli).transpose()?.unwrap_or_default();
    let vocab = match (&d.vocab, &cfg.train.init) {
        (Some(path), _) => Vocab::load(path)?,
        (None, Init::Pretrained(path)) if cfg.pretrain.is_none() && path.exists() => Checkpoint::load(path)?.vocab()?,
        _ => {
            let mut lists = Vec::new();
            for split in [&train, &dev, &test] {
                lists.extend(qa_token_lists(split)?);
            }
            for split in [&nli_train, &nli_dev] {
                lists.extend(nli_token_lists(split)?);
            }
            Vocab::build(lists.iter().map(Vec::as_slice))
        }
    };
    let qa = |records: &[QaRecord]| -> Result<Vec<QaExample>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| QaExample::from_record(r, i, &vocab))
            .collect()
    };
    let nli = |records: &[NliRecord]| -> Result<Vec<NliExample>> {
        records.iter().map(|r| NliExample::from_record(r, &vocab)).collect()
    };
    Ok(PreparedData {
        train: qa(&train)?,
        dev: qa(&dev)?,
        test: qa(&test)?,
        nli_train: nli(&nli_train)?,
        nli_dev: nli(&nli_dev)?,
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub report: TrainReport,
    pub dev_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// What `run_experiment` persists to `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: EvalSplit,
    pub metrics: MetricReport,
    pub eval_loss: f64,
    pub checkpoint: PathBuf,
    pub pretrain: Option<PretrainSummary>,
    pub train: Option<TrainReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Pre-trains the NLI stack and saves its best checkpoint and report.
pub fn run_pretrain(cfg: &ExperimentConfig, data: &PreparedData) -> Result<PretrainSummary> {
    let pcfg = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| MulteeError::config("pretrain", "experiment has no pretrain block"))?;
    let dims = cfg.model.dims(data.vocab.len());
    let path = cfg.nli_checkpoint_path();
    let (model, report) = pretrain_nli(&data.nli_train, &data.nli_dev, dims, pcfg, &data.vocab, Some(&path))?;
    let dev_accuracy = if data.nli_dev.is_empty() {
        0.0
    } else {
        evaluate_nli(&model, &data.nli_dev)?.1
    };
    write_json(&cfg.eval.output_dir.join("nli_report.json"), &report)?;
    Ok(PretrainSummary {
        report,
        dev_accuracy,
        checkpoint: path,
    })
}

/// Fine-tuning config after the pretrain stage: a scratch init becomes the fresh NLI checkpoint.
fn effective_train_config(cfg: &ExperimentConfig, pretrained: Option<&PretrainSummary>) -> TrainConfig {
    let mut train = cfg.train.clone();
    if let (Some(p), Init::Scratch) = (pretrained, &train.init) {
        train.init = Init::Pretrained(p.checkpoint.clone());
    }
    train
}

/// Fine-tunes and evaluates with already prepared data. Writes the QA checkpoint, the train
/// report, optional predictions and `results.json` into `eval.output_dir`.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    pretrained: Option<PretrainSummary>,
) -> Result<ResultRecord> {
    let out = &cfg.eval.output_dir;
    fs::create_dir_all(out)?;
    let train_cfg = effective_train_config(cfg, pretrained.as_ref());
    let mut model = QaModel::new(cfg.model.clone(), &data.vocab)?;
    let ck = cfg.qa_checkpoint_path();
    let report = finetune_qa(&mut model, &data.train, &data.dev, &train_cfg, &data.vocab, Some(&ck))?;
    write_json(&out.join("train_report.json"), &report)?;
    let eval = evaluate_qa(&model, data.eval_split(cfg.eval.split))?;
    if cfg.eval.save_predictions {
        write_json(&out.join("predictions.json"), &eval.predictions)?;
    }
    let record = ResultRecord {
        name: cfg.name.clone(),
        config_hash: cfg.hash()?,
        seed: cfg.train.seed,
        split: cfg.eval.split,
        metrics: eval.metrics,
        eval_loss: eval.loss,
        checkpoint: ck,
        pretrain: pretrained,
        train: Some(report),
    };
    write_json(&out.join("results.json"), &record)?;
    Ok(record)
}

/// Optional pre-training, fine-tuning and evaluation for one experiment file.
pub fn run_experiment(config_path: &Path) -> Result<ResultRecord> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_experiment_config(&cfg)
}

pub fn run_experiment_config(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let data = prepare_data(cfg)?;
    let pretrained = cfg.pretrain.is_some().then(|| run_pretrain(cfg, &data)).transpose()?;
    run_with_data(cfg, &data, pretrained)
}

/// Evaluates a stored QA checkpoint on the configured split and writes `eval_results.json`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ResultRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, vocab) = QaModel::from_checkpoint(&ck)?;
    let mut cfg_fixed = cfg.clone();
    cfg_fixed.data.vocab = None;
    let data = prepare_with_vocab(&cfg_fixed, vocab)?;
    let eval = evaluate_qa(&model, data.eval_split(cfg.eval.split))?;
    let record = ResultRecord {
        name: cfg.name.clone(),
        config_hash: cfg.hash()?,
        seed: cfg.train.seed,
        split: cfg.eval.split,
        metrics: eval.metrics,
        eval_loss: eval.loss,
        checkpoint: checkpoint.to_path_buf(),
        pretrain: None,
        train: None,
    };
    write_json(&cfg.eval.output_dir.join("eval_results.json"), &record)?;
    Ok(record)
}

fn prepare_with_vocab(cfg: &ExperimentConfig, vocab: Vocab) -> Result<PreparedData> {
    let dir = cfg.eval.output_dir.join(".vocab");
    fs::create_dir_all(&dir)?;
    let path = dir.join("vocab.json");
    vocab.save(&path)?;
    let mut c = cfg.clone();
    c.data.vocab = Some(path);
    prepare_data(&c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceAxis {
    NoAlpha,
    Alpha,
    AlphaSupervised,
}

impl RelevanceAxis {
    pub const ALL: [RelevanceAxis; 3] = [RelevanceAxis::NoAlpha, RelevanceAxis::Alpha, RelevanceAxis::AlphaSupervised];

    pub fn label(self) -> &'static str {
        match self {
            RelevanceAxis::NoAlpha => "no_alpha",
            RelevanceAxis::Alpha => "alpha",
            RelevanceAxis::AlphaSupervised => "alpha_supervised",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AggregatorAxis {
    #[serde(rename = "CA")]
    Ca,
    #[serde(rename = "FL")]
    Fl,
    #[serde(rename = "CA_FL")]
    CaFl,
}

impl AggregatorAxis {
    pub const ALL: [AggregatorAxis; 3] = [AggregatorAxis::Ca, AggregatorAxis::Fl, AggregatorAxis::CaFl];

    pub fn label(self) -> &'static str {
        match self {
            AggregatorAxis::Ca => "CA",
            AggregatorAxis::Fl => "FL",
            AggregatorAxis::CaFl => "CA_FL",
        }
    }

    pub fn layers(self) -> Vec<JoinLayer> {
        match self {
            AggregatorAxis::Ca => vec![JoinLayer::CrossAttention],
            AggregatorAxis::Fl => vec![JoinLayer::FinalLayer],
            AggregatorAxis::CaFl => vec![JoinLayer::CrossAttention, JoinLayer::FinalLayer],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub relevance: RelevanceAxis,
    pub aggregator: AggregatorAxis,
    /// Accuracy for single-correct tasks, F1a otherwise.
    pub metric: f64,
    pub metrics: MetricReport,
}

/// The experiment config for one grid cell. Supervised cells use the configured relevance
/// loss, or BCE when the base config has none.
pub fn ablation_cell_config(base: &ExperimentConfig, relevance: RelevanceAxis, aggregator: AggregatorAxis) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = format!("{}-{}-{}", base.name, relevance.label(), aggregator.label());
    cfg.model.kind = crate::model::ModelKind::Multee;
    cfg.model.aggregator.join_layers = aggregator.layers();
    let (kind, loss) = match relevance {
        RelevanceAxis::NoAlpha => (RelevanceKind::ConstantOnes, RelevanceLoss::None),
        RelevanceAxis::Alpha => (RelevanceKind::Learned, RelevanceLoss::None),
        RelevanceAxis::AlphaSupervised => (
            RelevanceKind::Learned,
            match base.train.relevance_loss {
                RelevanceLoss::None => RelevanceLoss::Bce,
                other => other,
            },
        ),
    };
    cfg.model.aggregator.use_relevance = kind;
    cfg.train.relevance_loss = loss;
    cfg.eval.output_dir = base
        .eval
        .output_dir
        .join("ablation")
        .join(format!("{}_{}", relevance.label(), aggregator.label()));
    cfg
}

/// Trains and evaluates the given cells with shared data, seeds and (optional) pre-training.
pub fn run_ablation_cells(
    base: &ExperimentConfig,
    cells: &[(RelevanceAxis, AggregatorAxis)],
) -> Result<Vec<AblationCell>> {
    if cells.iter().any(|&(r, _)| r == RelevanceAxis::AlphaSupervised) {
        let data_has_labels = prepare_data(base)?.train.iter().all(|e| e.relevance_labels.is_some());
        if !data_has_labels {
            return Err(MulteeError::config(
                "data.train",
                "the alpha_supervised cells need relevance labels on every training example",
            ));
        }
    }
    let data = prepare_data(base)?;
    let pretrained = base.pretrain.is_some().then(|| run_pretrain(base, &data)).transpose()?;
    let mut out = Vec::with_capacity(cells.len());
    for &(relevance, aggregator) in cells {
        let cfg = ablation_cell_config(base, relevance, aggregator);
        log::info!("ablation cell {} / {}", relevance.label(), aggregator.label());
        let record = run_with_data(&cfg, &data, pretrained.clone())?;
        out.push(AblationCell {
            relevance,
            aggregator,
            metric: selection_metric(&record.metrics),
            metrics: record.metrics,
        });
    }
    Ok(out)
}

/// The full 3x3 grid; writes `ablation.json` and `ablation.md` into the output directory.
pub fn run_ablation(config_path: &Path) -> Result<Vec<AblationCell>> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_ablation_config(&cfg)
}

pub fn run_ablation_config(cfg: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let grid: Vec<(RelevanceAxis, AggregatorAxis)> = RelevanceAxis::ALL
        .iter()
        .flat_map(|&r| AggregatorAxis::ALL.iter().map(move |&a| (r, a)))
        .collect();
    let cells = run_ablation_cells(cfg, &grid)?;
    write_json(&cfg.eval.output_dir.join("ablation.json"), &cells)?;
    fs::write(cfg.eval.output_dir.join("ablation.md"), format_ablation_table(&cells))?;
    Ok(cells)
}

/// A markdown table with relevance settings as rows and aggregators as columns.
pub fn format_ablation_table(cells: &[AblationCell]) -> String {
    let lookup: BTreeMap<(RelevanceAxis, AggregatorAxis), f64> =
        cells.iter().map(|c| ((c.relevance, c.aggregator), c.metric)).collect();
    let mut s = String::from("| relevance |");
    for a in AggregatorAxis::ALL {
        let _ = write!(s, " {} |", a.label());
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(AggregatorAxis::ALL.len()));
    s.push('\n');
    for r in RelevanceAxis::ALL {
        let _ = write!(s, "| {} |", r.label());
        for a in AggregatorAxis::ALL {
            match lookup.get(&(r, a)) {
                Some(v) => {
                    let _ = write!(s, " {:.1} |", 100.0 * v);
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Files written by `export_attention`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub alpha_csv: PathBuf,
    pub heatmap_png: PathBuf,
    pub m_hp_csv: PathBuf,
    pub choice: usize,
    pub alpha_entropy: f64,
}

#[derive(Serialize)]
struct AlphaRow<'a> {
    index: usize,
    text: &'a str,
    alpha: f64,
    relevant: Option<u8>,
}

/// Cell size of the α heatmap in pixels.
const CELL: usize = 24;

/// Writes α for `choice` (the predicted one when `None`) as CSV, a choices x premises heatmap of
/// α as PNG, and the joined hypothesis-to-premise attention for that choice as CSV.
pub fn export_attention(
    model: &QaModel,
    example: &QaExample,
    choice: Option<usize>,
    out_dir: &Path,
) -> Result<AttentionExport> {
    fs::create_dir_all(out_dir)?;
    let prediction = model.predict(example)?;
    let choice = choice.unwrap_or(prediction.predicted.first().copied().unwrap_or(0));
    let n = example.premises.len();
    let alphas: Vec<Vec<f64>> = (0..example.choices.len())
        .map(|c| {
            prediction.alphas[c]
                .clone()
                .map_or_else(|| Ok(model.attention_map(example, c)?.alpha), Ok)
        })
        .collect::<Result<_>>()?;
    let map = model.attention_map(example, choice)?;
    let alpha = &alphas[choice];

    let alpha_csv = out_dir.join("alpha.csv");
    let mut w = csv::Writer::from_path(&alpha_csv)?;
    for i in 0..n {
        w.serialize(AlphaRow {
            index: i,
            text: &example.premise_texts[i],
            alpha: alpha.get(i).copied().unwrap_or(f64::NAN),
            relevant: example.relevance_labels.as_ref().map(|y| y[i]),
        })?;
    }
    w.flush()?;

    let m_hp_csv = out_dir.join("m_hp.csv");
    let mut w = csv::Writer::from_path(&m_hp_csv)?;
    let mut header = vec![String::from("hypothesis_token")];
    header.extend(map.premise_tokens.iter().cloned());
    w.write_record(&header)?;
    for (r, tok) in map.hypothesis_tokens.iter().enumerate() {
        let mut row = vec![tok.clone()];
        row.extend(map.m_hp.row(r).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let heatmap_png = out_dir.join("alpha_heatmap.png");
    write_heatmap(&heatmap_png, &alphas)?;
    Ok(AttentionExport {
        alpha_csv,
        heatmap_png,
        m_hp_csv,
        choice,
        alpha_entropy: entropy(alpha),
    })
}

/// Rows are choices, columns premises; white is 0 and dark red the row maximum of 1.
fn write_heatmap(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let (w, h) = (cols * CELL, rows.len().max(1) * CELL);
    let mut pixels = vec![255u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = v.clamp(0.0, 1.0);
            let rgb = [
                (255.0 - 100.0 * t) as u8,
                (255.0 * (1.0 - t)) as u8,
                (255.0 * (1.0 - t)) as u8,
            ];
            for y in r * CELL..(r + 1) * CELL {
                for x in c * CELL..(c + 1) * CELL {
                    let at = (y * w + x) * 3;
                    pixels[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| MulteeError::Image(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| MulteeError::Image(e.to_string()))?;
    writer.finish().map_err(|e| MulteeError::Image(e.to_string()))?;
    Ok(())
}

/// Loads a QA checkpoint and a dataset, then exports attention for the example with `example_id`.
pub fn visualize(checkpoint: &Path, dataset: &Path, example_id: &str, out_dir: &Path) -> Result<AttentionExport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, vocab) = QaModel::from_checkpoint(&ck)?;
    let records = read_qa_records(dataset)?;
    let (i, record) = records
        .iter()
        .enumerate()
        .find(|(i, r)| r.id.as_deref().map_or(i.to_string() == example_id, |id| id == example_id))
        .ok_or_else(|| MulteeError::Index(format!("no example with id `{example_id}` in {}", dataset.display())))?;
    let example = QaExample::from_record(record, i, &vocab)?;
    export_attention(&model, &example, None, out_dir)
}

/// Mean top-2 retrieval accuracy and mean α entropy on the gold choices of `data`.
pub fn relevance_diagnostics(eval: &Evaluation, data: &[QaExample]) -> Option<(f64, f64)> {
    let mut top2 = 0.0;
    let mut ent = 0.0;
    let mut n = 0usize;
    for (p, ex) in eval.predictions.iter().zip(data) {
        let (Some(y), Some(&g)) = (ex.relevance_labels.as_ref(), ex.gold.first()) else {
            continue;
        };
        let Some(Some(a)) = p.alphas.get(g) else {
            continue;
        };
        let mut idx: Vec<usize> = (0..a.len()).collect();
        idx.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
        let relevant = y.iter().filter(|&&v| v == 1).count();
        let k = relevant.min(2).max(1);
        top2 += f64::from(u8::from(idx[..k].iter().all(|&i| y[i] == 1)));
        ent += entropy(a);
        n += 1;
    }
    (n > 0).then(|| (top2 / n as f64, ent / n as f64))
}
