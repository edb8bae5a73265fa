//! QA models over an entailment stack: Multee, and the Max and Concat baselines.
//!
//! Multee scores a (question, choice) pair by computing relevance weights α over
//! premises, joining premise representations at the cross-attention layer (CA)
//! and/or the final layer (FL), and projecting the concatenated paragraph
//! vectors to one logit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{QaExample, TaskType, TokenSeq, Vocab};
use crate::entailment::{cross_attend, Composer, CrossAttention, EncodedSeq, Encoder, EntailmentStack, StackDims};
use crate::error::{MulteeError, Result};
use crate::graph::{Graph, Var};
use crate::joins::{join_cross_attention, join_final, join_score, JoinedCrossAttention};
use crate::nn::Affine;
use crate::params::{ParamId, ParamStore};
use crate::relevance::{RelevanceKind, RelevanceModule, RelevanceWeights};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JoinLayer {
    #[serde(rename = "CA")]
    CrossAttention,
    #[serde(rename = "FL")]
    FinalLayer,
}

impl JoinLayer {
    pub fn label(self) -> &'static str {
        match self {
            JoinLayer::CrossAttention => "CA",
            JoinLayer::FinalLayer => "FL",
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub join_layers: Vec<JoinLayer>,
    #[serde(default)]
    pub use_relevance: RelevanceKind,
    #[serde(default = "yes")]
    pub share_below_min_join: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            join_layers: vec![JoinLayer::CrossAttention, JoinLayer::FinalLayer],
            use_relevance: RelevanceKind::Learned,
            share_below_min_join: true,
        }
    }
}

impl AggregatorConfig {
    pub fn new(join_layers: &[JoinLayer], use_relevance: RelevanceKind) -> Self {
        AggregatorConfig {
            join_layers: join_layers.to_vec(),
            use_relevance,
            share_below_min_join: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.join_layers.is_empty() {
            return Err(MulteeError::config("model.aggregator.join_layers", "must not be empty"));
        }
        let mut sorted = self.join_layers.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.join_layers.len() {
            return Err(MulteeError::config("model.aggregator.join_layers", "contains duplicates"));
        }
        Ok(())
    }

    pub fn has(&self, layer: JoinLayer) -> bool {
        self.join_layers.contains(&layer)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Multee,
    /// Max over per-premise entailment probabilities.
    Max,
    /// One entailment decision over the concatenated premises.
    Concat,
}

fn default_dim() -> usize {
    64
}

fn default_concat_len() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "default_dim")]
    pub d_emb: usize,
    #[serde(default = "default_dim")]
    pub d_hidden: usize,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
    /// Encode contiguous premises as one passage before splitting into sentences.
    #[serde(default)]
    pub paragraph_encoding: bool,
    /// Token cap for the Concat baseline's joined premise.
    #[serde(default = "default_concat_len")]
    pub max_concat_len: usize,
    /// Initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Multee,
            d_emb: default_dim(),
            d_hidden: default_dim(),
            aggregator: AggregatorConfig::default(),
            paragraph_encoding: false,
            max_concat_len: default_concat_len(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(MulteeError::config("model.d_emb", "must be positive"));
        }
        if self.d_hidden == 0 {
            return Err(MulteeError::config("model.d_hidden", "must be positive"));
        }
        if self.max_concat_len == 0 {
            return Err(MulteeError::config("model.max_concat_len", "must be positive"));
        }
        self.aggregator.validate()
    }

    pub fn dims(&self, vocab_size: usize) -> StackDims {
        StackDims {
            vocab_size,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
        }
    }
}

/// Encoder and composer copy of one sub-aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Aggregator {
    pub encoder: Encoder,
    pub composer: Composer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FinalHead {
    pub hidden: Affine,
    pub out: Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MulteeParts {
    /// Encoder feeding the relevance module.
    pub encoder: Encoder,
    pub relevance: RelevanceModule,
    pub ca: Option<Aggregator>,
    pub fl: Option<Aggregator>,
    pub head: FinalHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parts {
    Multee(MulteeParts),
    Baseline(EntailmentStack),
}

/// Graph-level output for one answer choice.
#[derive(Clone, Debug)]
pub struct ChoiceOutput {
    /// `1 x 1` logit.
    pub logit: Var,
    /// `1 x n` relevance weights (Multee only).
    pub alpha: Option<Var>,
    /// Paragraph vectors in join-layer order.
    pub paragraphs: Vec<(JoinLayer, Var)>,
    pub joined: Option<JoinedCrossAttention>,
}

/// Value-level output for one answer choice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChoiceScore {
    pub probability: f64,
    pub logit: f64,
    pub paragraphs: Vec<(JoinLayer, Vec<f64>)>,
    pub alpha: Option<RelevanceWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub logits: Vec<f64>,
    /// Softmax over choices for single-correct tasks, independent probabilities otherwise.
    pub scores: Vec<f64>,
    pub predicted: Vec<usize>,
    /// α per choice for Multee models with learned or direct relevance.
    pub alphas: Vec<Option<Vec<f64>>>,
}

/// A joined attention matrix with the tokens labelling its rows (hypothesis) and columns (premises).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub m_hp: Mat,
    pub premise_tokens: Vec<String>,
    pub hypothesis_tokens: Vec<String>,
    pub boundaries: Vec<usize>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: ModelConfig,
    pub dims: StackDims,
    pub store: ParamStore,
    pub parts: Parts,
    /// Separator id used by the Concat baseline.
    pub sep_id: usize,
}

impl QaModel {
    pub fn new(config: ModelConfig, vocab: &Vocab) -> Result<QaModel> {
        config.validate()?;
        let dims = config.dims(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let parts = match config.kind {
            ModelKind::Max | ModelKind::Concat => Parts::Baseline(EntailmentStack::new(&mut store, "", dims, &mut rng)),
            ModelKind::Multee => {
                let agg = &config.aggregator;
                let encoder = Encoder::new(&mut store, "", dims, &mut rng);
                let relevance = RelevanceModule::new(&mut store, "relevance.", dims, &mut rng);
                let mut make = |layer: JoinLayer, store: &mut ParamStore| {
                    let prefix = format!("{}.", layer.label().to_lowercase());
                    let enc = if agg.share_below_min_join {
                        encoder
                    } else {
                        Encoder::new(store, &prefix, dims, &mut rng)
                    };
                    Aggregator {
                        encoder: enc,
                        composer: Composer::new(store, &prefix, dims, &mut rng),
                    }
                };
                let ca = agg
                    .has(JoinLayer::CrossAttention)
                    .then(|| make(JoinLayer::CrossAttention, &mut store));
                let fl = agg.has(JoinLayer::FinalLayer).then(|| make(JoinLayer::FinalLayer, &mut store));
                let d_in = dims.d_final() * agg.join_layers.len();
                let head = FinalHead {
                    hidden: Affine::new(&mut store, "head.hidden", d_in, dims.d_final(), &mut rng),
                    out: Affine::new(&mut store, "head.out", dims.d_final(), 1, &mut rng),
                };
                Parts::Multee(MulteeParts {
                    encoder,
                    relevance,
                    ca,
                    fl,
                    head,
                })
            }
        };
        Ok(QaModel {
            config,
            dims,
            store,
            parts,
            sep_id: vocab.sep_id(),
        })
    }

    /// All distinct embedding tables.
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = match &self.parts {
            Parts::Baseline(stack) => vec![stack.encoder.embedding],
            Parts::Multee(m) => std::iter::once(m.encoder.embedding)
                .chain(m.ca.map(|a| a.encoder.embedding))
                .chain(m.fl.map(|a| a.encoder.embedding))
                .collect(),
        };
        ids.sort();
        ids.dedup();
        ids
    }

    /// Initialises every layer that has a counterpart in an NLI checkpoint and
    /// returns the number of parameters copied. Composer weights seed every composer copy.
    pub fn load_pretrained(&mut self, ck: &Checkpoint, vocab: &Vocab) -> Result<usize> {
        if ck.kind != "nli" {
            return Err(MulteeError::Checkpoint(format!(
                "expected an NLI checkpoint, found kind `{}`",
                ck.kind
            )));
        }
        ck.check_compatible(&self.dims, vocab)?;
        let mut copied = 0;
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id);
            let source = ["ca.", "fl.", "relevance."]
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .unwrap_or(name);
            if let Some(value) = ck.params.get(source) {
                self.store.set(id, value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            "qa",
            self.dims,
            Some(serde_json::to_value(&self.config)?),
            vocab,
            self.store.to_named(),
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(QaModel, Vocab)> {
        if ck.kind != "qa" {
            return Err(MulteeError::Checkpoint(format!(
                "expected a QA checkpoint, found kind `{}`",
                ck.kind
            )));
        }
        let value = ck
            .model
            .clone()
            .ok_or_else(|| MulteeError::Checkpoint("QA checkpoint without model config".into()))?;
        let config: ModelConfig = serde_json::from_value(value)?;
        let vocab = ck.vocab()?;
        let mut model = QaModel::new(config, &vocab)?;
        ck.check_compatible(&model.dims, &vocab)?;
        model.store.load_named(&ck.params)?;
        Ok((model, vocab))
    }

    fn encode_premises(&self, g: &Graph, encoder: &Encoder, ex: &QaExample) -> Result<Vec<EncodedSeq>> {
        if self.config.paragraph_encoding && ex.contiguous && ex.premises.len() > 1 {
            let passage = encoder.embed_encode(g, &TokenSeq::join(&ex.premises, None))?;
            let mut start = 0;
            Ok(ex
                .premises
                .iter()
                .map(|p| {
                    let seg = EncodedSeq {
                        x: g.slice_rows(passage.x, start, p.len()),
                        mask: passage.mask[start..start + p.len()].to_vec(),
                    };
                    start += p.len();
                    seg
                })
                .collect())
        } else {
            ex.premises.iter().map(|p| encoder.embed_encode(g, p)).collect()
        }
    }

    /// Outputs for every choice of `ex`.
    pub fn forward_example(&self, g: &Graph, ex: &QaExample) -> Result<Vec<ChoiceOutput>> {
        if ex.premises.is_empty() {
            return Err(MulteeError::Validation(format!("example {} has no premises", ex.id)));
        }
        match &self.parts {
            Parts::Multee(parts) => self.multee_forward(g, parts, ex),
            Parts::Baseline(stack) => match self.config.kind {
                ModelKind::Concat => self.concat_forward(g, stack, ex),
                _ => self.max_forward(g, stack, ex),
            },
        }
    }

    fn multee_forward(&self, g: &Graph, parts: &MulteeParts, ex: &QaExample) -> Result<Vec<ChoiceOutput>> {
        let agg = &self.config.aggregator;
        // one encoding per distinct encoder, keyed by its embedding table
        let mut encoders: Vec<Encoder> = vec![parts.encoder];
        for a in [parts.ca, parts.fl].into_iter().flatten() {
            if !encoders.contains(&a.encoder) {
                encoders.push(a.encoder);
            }
        }
        let premises: Vec<Vec<EncodedSeq>> = encoders
            .iter()
            .map(|e| self.encode_premises(g, e, ex))
            .collect::<Result<_>>()?;
        let slot = |e: &Encoder| encoders.iter().position(|x| x == e).expect("registered encoder");

        let n = ex.premises.len();
        let mut out = Vec::with_capacity(ex.hypotheses.len());
        for hyp in &ex.hypotheses {
            let atts: Vec<Vec<CrossAttention>> = encoders
                .iter()
                .zip(&premises)
                .map(|(e, ps)| {
                    let h = e.embed_encode(g, hyp)?;
                    Ok(ps.iter().map(|p| cross_attend(g, p, &h)).collect())
                })
                .collect::<Result<_>>()?;

            let alpha = match agg.use_relevance {
                RelevanceKind::ConstantOnes => g.constant(Mat::filled(1, n, 1.0)),
                kind => {
                    let xs: Vec<Var> = atts[0]
                        .iter()
                        .map(|a| parts.relevance.composer.compose_and_pool(g, a))
                        .collect();
                    let x = g.concat_rows(&xs);
                    parts.relevance.weights(g, kind, x, ex.contiguous)
                }
            };

            let mut paragraphs = Vec::with_capacity(2);
            let mut joined = None;
            if let Some(ca) = parts.ca {
                let j = join_cross_attention(g, &atts[slot(&ca.encoder)], alpha)?;
                let bounds: &[usize] = if ex.contiguous { &[] } else { &j.boundaries };
                let y = ca.composer.compose_and_pool_segments(g, &j.attention, bounds);
                paragraphs.push((JoinLayer::CrossAttention, y));
                joined = Some(j);
            }
            if let Some(fl) = parts.fl {
                let hs: Vec<Var> = atts[slot(&fl.encoder)]
                    .iter()
                    .map(|a| fl.composer.compose_and_pool(g, a))
                    .collect();
                paragraphs.push((JoinLayer::FinalLayer, join_final(g, &hs, alpha)?));
            }
            let ys: Vec<Var> = paragraphs.iter().map(|&(_, v)| v).collect();
            let hidden = g.tanh(parts.head.hidden.forward(g, g.concat_cols(&ys)));
            let logit = parts.head.out.forward(g, hidden);
            let alpha = (agg.use_relevance != RelevanceKind::ConstantOnes).then_some(alpha);
            out.push(ChoiceOutput {
                logit,
                alpha,
                paragraphs,
                joined,
            });
        }
        Ok(out)
    }

    /// Per-premise entailment probabilities and log-probabilities as `1 x n` rows, one pair per choice.
    fn premise_entailment(&self, g: &Graph, stack: &EntailmentStack, ex: &QaExample) -> Result<Vec<(Var, Var)>> {
        let premises = self.encode_premises(g, &stack.encoder, ex)?;
        ex.hypotheses
            .iter()
            .map(|hyp| {
                let h = stack.encoder.embed_encode(g, hyp)?;
                let mut probs = Vec::with_capacity(premises.len());
                let mut logps = Vec::with_capacity(premises.len());
                for p in &premises {
                    let v = stack.composer.compose_and_pool(g, &cross_attend(g, p, &h));
                    let out = stack.classify(g, v);
                    probs.push(g.slice_cols(out.probs, 0, 1));
                    logps.push(g.slice_cols(g.log_softmax(out.logits), 0, 1));
                }
                Ok((g.concat_cols(&probs), g.concat_cols(&logps)))
            })
            .collect()
    }

    fn max_forward(&self, g: &Graph, stack: &EntailmentStack, ex: &QaExample) -> Result<Vec<ChoiceOutput>> {
        Ok(self
            .premise_entailment(g, stack, ex)?
            .into_iter()
            .map(|(_, logps)| ChoiceOutput {
                // ln max_i p_i, computed as max_i ln p_i
                logit: g.max_elem(logps),
                alpha: None,
                paragraphs: Vec::new(),
                joined: None,
            })
            .collect())
    }

    /// The Concat baseline's premise: sentences joined by a separator, capped at `max_concat_len`.
    pub fn concat_premise(&self, ex: &QaExample) -> TokenSeq {
        let sep = (ex.premises.len() > 1).then_some((crate::corpus::vocab::SEP_TOKEN, self.sep_id));
        let mut joined = TokenSeq::join(&ex.premises, sep);
        let cap = self.config.max_concat_len;
        if joined.len() > cap {
            log::warn!(
                "truncating concatenated premises of example {} from {} to {cap} tokens",
                ex.id,
                joined.len()
            );
            joined.tokens.truncate(cap);
            joined.ids.truncate(cap);
        }
        joined
    }

    fn concat_forward(&self, g: &Graph, stack: &EntailmentStack, ex: &QaExample) -> Result<Vec<ChoiceOutput>> {
        let premise = stack.encoder.embed_encode(g, &self.concat_premise(ex))?;
        ex.hypotheses
            .iter()
            .map(|hyp| {
                let h = stack.encoder.embed_encode(g, hyp)?;
                let out = stack.classify(g, stack.composer.compose_and_pool(g, &cross_attend(g, &premise, &h)));
                Ok(ChoiceOutput {
                    logit: g.pick(g.log_softmax(out.logits), 0, 0),
                    alpha: None,
                    paragraphs: Vec::new(),
                    joined: None,
                })
            })
            .collect()
    }

    /// Value-level score for one choice.
    pub fn forward(&self, ex: &QaExample, choice: usize) -> Result<ChoiceScore> {
        check_choice(ex, choice)?;
        let g = Graph::new(&self.store);
        let outs = self.forward_example(&g, ex)?;
        let o = &outs[choice];
        let logit = g.scalar_value(o.logit);
        let probability = g.scalar_value(self.choice_probability(&g, o.logit));
        Ok(ChoiceScore {
            probability,
            logit,
            paragraphs: o
                .paragraphs
                .iter()
                .map(|&(l, v)| (l, g.value(v).data().to_vec()))
                .collect(),
            alpha: o
                .alpha
                .map(|a| RelevanceWeights::from_values(g.value(a).data().to_vec(), self.config.aggregator.use_relevance)),
        })
    }

    /// Entailment probability of the Max baseline: `join_score` of per-premise probabilities with all-ones α.
    pub fn baseline_max(&self, ex: &QaExample, choice: usize) -> Result<f64> {
        check_choice(ex, choice)?;
        let Parts::Baseline(stack) = &self.parts else {
            return Err(MulteeError::config("model.kind", "baseline_max needs a baseline model"));
        };
        let g = Graph::new(&self.store);
        let rows = self.premise_entailment(&g, stack, ex)?;
        let ones = g.constant(Mat::filled(1, ex.premises.len(), 1.0));
        Ok(g.scalar_value(join_score(&g, rows[choice].0, ones)?))
    }

    /// Per-premise entailment probabilities for one choice.
    pub fn premise_probabilities(&self, ex: &QaExample, choice: usize) -> Result<Vec<f64>> {
        check_choice(ex, choice)?;
        let Parts::Baseline(stack) = &self.parts else {
            return Err(MulteeError::config("model.kind", "premise probabilities need a baseline model"));
        };
        let g = Graph::new(&self.store);
        let rows = self.premise_entailment(&g, stack, ex)?;
        Ok(g.value(rows[choice].0).data().to_vec())
    }

    /// Entailment probability of the Concat baseline.
    pub fn baseline_concat(&self, ex: &QaExample, choice: usize) -> Result<f64> {
        check_choice(ex, choice)?;
        let Parts::Baseline(stack) = &self.parts else {
            return Err(MulteeError::config("model.kind", "baseline_concat needs a baseline model"));
        };
        let g = Graph::new(&self.store);
        let premise = self.concat_premise(ex);
        let out = stack.f_e_p(&g, &premise, &ex.hypotheses[choice])?;
        Ok(g.value(out.probs).get(0, 0))
    }

    pub fn predict(&self, ex: &QaExample) -> Result<Prediction> {
        if ex.choices.len() < 2 {
            return Err(MulteeError::Validation(format!(
                "example {} needs at least two choices",
                ex.id
            )));
        }
        let g = Graph::new(&self.store);
        let outs = self.forward_example(&g, ex)?;
        let logits: Vec<f64> = outs.iter().map(|o| g.scalar_value(o.logit)).collect();
        let probs: Vec<f64> = outs
            .iter()
            .map(|o| g.scalar_value(self.choice_probability(&g, o.logit)))
            .collect();
        let alphas = outs
            .iter()
            .map(|o| o.alpha.map(|a| g.value(a).data().to_vec()))
            .collect();
        let (scores, predicted) = decide(&logits, &probs, ex.task_type);
        Ok(Prediction {
            id: ex.id.clone(),
            logits,
            scores,
            predicted,
            alphas,
        })
    }

    /// The passage-wide hypothesis-to-premise attention for one choice, with the α used to join it.
    /// Models without a CA join, and the baselines, report the per-premise matrices joined with their
    /// own α (all ones when there is none); Concat reports its single attention over the joined premise.
    pub fn attention_map(&self, ex: &QaExample, choice: usize) -> Result<AttentionMap> {
        check_choice(ex, choice)?;
        let g = Graph::new(&self.store);
        let hypothesis_tokens = ex.hypotheses[choice].tokens.clone();
        let n = ex.premises.len();
        let (m_hp, alpha) = match (&self.parts, self.config.kind) {
            (Parts::Baseline(stack), ModelKind::Concat) => {
                let premise = self.concat_premise(ex);
                let p = stack.encoder.embed_encode(&g, &premise)?;
                let h = stack.encoder.embed_encode(&g, &ex.hypotheses[choice])?;
                let att = cross_attend(&g, &p, &h);
                return Ok(AttentionMap {
                    m_hp: (*g.value(att.m_hp)).clone(),
                    premise_tokens: premise.tokens,
                    hypothesis_tokens,
                    boundaries: vec![0, p.mask.len()],
                    alpha: vec![1.0],
                });
            }
            (Parts::Baseline(stack), _) => {
                let ps = self.encode_premises(&g, &stack.encoder, ex)?;
                let h = stack.encoder.embed_encode(&g, &ex.hypotheses[choice])?;
                let atts: Vec<CrossAttention> = ps.iter().map(|p| cross_attend(&g, p, &h)).collect();
                let ones = g.constant(Mat::filled(1, n, 1.0));
                (join_cross_attention(&g, &atts, ones)?, vec![1.0; n])
            }
            (Parts::Multee(parts), _) => {
                let outs = self.forward_example(&g, ex)?;
                let out = &outs[choice];
                let alpha_var = out.alpha.unwrap_or_else(|| g.constant(Mat::filled(1, n, 1.0)));
                let joined = match &out.joined {
                    Some(j) => j.clone(),
                    None => {
                        let ps = self.encode_premises(&g, &parts.encoder, ex)?;
                        let h = parts.encoder.embed_encode(&g, &ex.hypotheses[choice])?;
                        let atts: Vec<CrossAttention> = ps.iter().map(|p| cross_attend(&g, p, &h)).collect();
                        join_cross_attention(&g, &atts, alpha_var)?
                    }
                };
                (joined, g.value(alpha_var).data().to_vec())
            }
        };
        Ok(AttentionMap {
            m_hp: (*g.value(m_hp.attention.m_hp)).clone(),
            premise_tokens: ex.premises.iter().flat_map(|p| p.tokens.iter().cloned()).collect(),
            hypothesis_tokens,
            boundaries: m_hp.boundaries,
            alpha,
        })
    }

    /// Independent entailment probability of a choice from its logit: a sigmoid for
    /// Multee, `exp` for the baselines whose logit is a log-probability.
    pub fn choice_probability(&self, g: &Graph, logit: Var) -> Var {
        match self.parts {
            Parts::Multee(_) => g.sigmoid(logit),
            Parts::Baseline(_) => g.exp(logit),
        }
    }

    /// Parameter groups by name prefix, for diagnostics.
    pub fn param_groups(&self) -> BTreeMap<String, Vec<ParamId>> {
        let mut groups: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
        for (id, p) in self.store.iter() {
            let group = p.name.rsplit_once('.').map_or(p.name.as_str(), |(g, _)| g);
            groups.entry(group.to_string()).or_default().push(id);
        }
        groups
    }
}

fn check_choice(ex: &QaExample, choice: usize) -> Result<()> {
    if choice >= ex.choices.len() {
        return Err(MulteeError::Index(format!(
            "choice {choice} out of range for {} choices",
            ex.choices.len()
        )));
    }
    Ok(())
}

/// Scores and predicted set: softmax-argmax over logits for single-correct tasks,
/// a 0.5 threshold on independent probabilities for multi-label ones.
pub fn decide(logits: &[f64], probabilities: &[f64], task: TaskType) -> (Vec<f64>, Vec<usize>) {
    match task {
        TaskType::SingleCorrect => {
            let mut scores = vec![0.0; logits.len()];
            crate::graph::softmax_into(logits, &vec![true; logits.len()], &mut scores);
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            (scores, vec![best])
        }
        TaskType::MultiLabel => {
            let scores = probabilities.to_vec();
            let predicted = (0..scores.len()).filter(|&i| scores[i] >= 0.5).collect();
            (scores, predicted)
        }
    }
}
