//! Sentence relevance: hypothesis-aware sentence vectors, optional contextualization
//! across sentences, the weights α and the two supervision losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::entailment::{cross_attend, Composer, EncodedSeq, Encoder, StackDims, NUM_CLASSES};
use crate::error::{MulteeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Affine, BiLstm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Clamp applied to α before taking logs in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

/// How α is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceKind {
    /// Softmax over a learned scalar head on contextual sentence vectors.
    #[default]
    Learned,
    /// Every weight is 1 (the "no α" ablation).
    ConstantOnes,
    /// Each weight is the entailment probability of its sentence, unnormalised.
    Direct,
}

/// A realised α vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceWeights {
    alpha: Vec<f64>,
    kind: RelevanceKind,
}

impl RelevanceWeights {
    pub fn softmax(logits: &[f64]) -> Self {
        let mut alpha = vec![0.0; logits.len()];
        crate::graph::softmax_into(logits, &vec![true; logits.len()], &mut alpha);
        RelevanceWeights {
            alpha,
            kind: RelevanceKind::Learned,
        }
    }

    pub fn ones(n: usize) -> Self {
        RelevanceWeights {
            alpha: vec![1.0; n],
            kind: RelevanceKind::ConstantOnes,
        }
    }

    pub fn direct(probabilities: Vec<f64>) -> Self {
        RelevanceWeights {
            alpha: probabilities,
            kind: RelevanceKind::Direct,
        }
    }

    /// Wraps α read back from a graph.
    pub fn from_values(alpha: Vec<f64>, kind: RelevanceKind) -> Self {
        RelevanceWeights { alpha, kind }
    }

    pub fn kind(&self) -> RelevanceKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// As a `1 x n` constant.
    pub fn to_var(&self, g: &Graph) -> Var {
        g.constant(Mat::row_vector(self.alpha.clone()))
    }

    /// Shannon entropy in nats of α renormalised to sum to one.
    pub fn entropy(&self) -> f64 {
        entropy(&self.alpha)
    }
}

pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .map(|w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Relevance layers on top of the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelevanceModule {
    pub composer: Composer,
    /// Runs over the sentence sequence when premises are contiguous.
    pub context: BiLstm,
    /// Stands in for `context` when they are not.
    pub adapter: Affine,
    pub head: Affine,
    /// Three-way classifier used by [`RelevanceKind::Direct`].
    pub classifier: Affine,
}

impl RelevanceModule {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: StackDims, rng: &mut ChaCha8Rng) -> Self {
        let d_final = dims.d_final();
        let d_rel = d_final / 2;
        RelevanceModule {
            composer: Composer::new(store, prefix, dims, rng),
            context: BiLstm::new(store, &format!("{prefix}context"), d_final, d_rel, rng),
            adapter: Affine::new(store, &format!("{prefix}adapter"), d_final, 2 * d_rel, rng),
            head: Affine::new(store, &format!("{prefix}head"), 2 * d_rel, 1, rng),
            classifier: Affine::new(store, &format!("{prefix}classifier"), d_final, NUM_CLASSES, rng),
        }
    }

    /// `x_i = f_e_v(P_i, H)` for already encoded premises, stacked as `n x d_final`.
    pub fn sentence_vectors(&self, g: &Graph, premises: &[EncodedSeq], hypothesis: &EncodedSeq) -> Var {
        let xs: Vec<Var> = premises
            .iter()
            .map(|p| self.composer.compose_and_pool(g, &cross_attend(g, p, hypothesis)))
            .collect();
        g.concat_rows(&xs)
    }

    /// `n x 2 d_rel` contextual vectors.
    pub fn contextualize(&self, g: &Graph, x: Var, contiguous: bool) -> Var {
        if contiguous {
            let n = g.shape(x).0;
            self.context.forward(g, x, &vec![true; n])
        } else {
            self.adapter.forward(g, x)
        }
    }

    /// `1 x n` α for `kind`, given stacked sentence vectors.
    pub fn weights(&self, g: &Graph, kind: RelevanceKind, x: Var, contiguous: bool) -> Var {
        let n = g.shape(x).0;
        match kind {
            RelevanceKind::Learned => relevance_weights(g, self.contextualize(g, x, contiguous), &self.head),
            RelevanceKind::ConstantOnes => g.constant(Mat::filled(1, n, 1.0)),
            RelevanceKind::Direct => {
                let probs = g.softmax(self.classifier.forward(g, x));
                let entail = g.slice_cols(probs, 0, 1);
                g.transpose(entail)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.composer.params();
        p.extend(self.context.params());
        p.extend(self.adapter.params());
        p.extend(self.head.params());
        p.extend(self.classifier.params());
        p
    }
}

/// `x_i = f_e_v(P_i, H)` from raw token sequences.
pub fn sentence_vectors(
    g: &Graph,
    encoder: &Encoder,
    composer: &Composer,
    premises: &[TokenSeq],
    hypothesis: &TokenSeq,
) -> Result<Vec<Var>> {
    let h = encoder.embed_encode(g, hypothesis)?;
    premises
        .iter()
        .map(|p| {
            let p = encoder.embed_encode(g, p)?;
            Ok(composer.compose_and_pool(g, &cross_attend(g, &p, &h)))
        })
        .collect()
}

/// `softmax_i(W^T c_i + b)` as a `1 x n` row.
pub fn relevance_weights(g: &Graph, c: Var, head: &Affine) -> Var {
    let logits = head.forward(g, c);
    g.softmax(g.transpose(logits))
}

fn check_labels(g: &Graph, alpha: Var, y: &[u8]) -> Result<()> {
    let (rows, n) = g.shape(alpha);
    if rows != 1 || n != y.len() {
        return Err(MulteeError::Shape(format!(
            "{} relevance labels for α of shape {rows}x{n}",
            y.len()
        )));
    }
    Ok(())
}

/// `-(1/n) sum_i [y_i ln α_i + (1 - y_i) ln(1 - α_i)]` with α clamped to `[ε, 1 - ε]`.
pub fn relevance_loss_bce(g: &Graph, alpha: Var, y: &[u8]) -> Result<Var> {
    check_labels(g, alpha, y)?;
    let n = y.len();
    let a = g.clamp(alpha, BCE_EPS, 1.0 - BCE_EPS);
    let one_minus = g.add_const(g.scale(a, -1.0), 1.0);
    let pos = g.constant(Mat::row_vector(y.iter().map(|&v| f64::from(v)).collect()));
    let neg = g.constant(Mat::row_vector(y.iter().map(|&v| 1.0 - f64::from(v)).collect()));
    let terms = g.add(g.mul(pos, g.log(a)), g.mul(neg, g.log(one_minus)));
    Ok(g.scale(g.sum(terms), -1.0 / n as f64))
}

/// `sum_i α_i (1 - y_i)`: attention mass on irrelevant sentences.
pub fn relevance_loss_irsum(g: &Graph, alpha: Var, y: &[u8]) -> Result<Var> {
    check_labels(g, alpha, y)?;
    let neg = g.constant(Mat::row_vector(y.iter().map(|&v| 1.0 - f64::from(v)).collect()));
    Ok(g.sum(g.mul(alpha, neg)))
}
