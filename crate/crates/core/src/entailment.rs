//! The sentence-pair entailment function, split into layers whose outputs stay
//! visible so joins can splice in at any level.
//!
//! embed -> encode (BiLSTM) -> cross attention -> enhancement, projection,
//! composition BiLSTM and avg+max pooling -> classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, PAD_ID};
use crate::error::{MulteeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Affine, BiLstm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl StackDims {
    pub fn d_ctx(&self) -> usize {
        2 * self.d_hidden
    }

    /// avg + max pooling over both sides of the composition layer
    pub fn d_final(&self) -> usize {
        4 * self.d_ctx()
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddedSeq {
    pub x: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct EncodedSeq {
    pub x: Var,
    pub mask: Vec<bool>,
}

/// Both attention directions plus the sequences they were computed from.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// `h x p`, rows are distributions over unmasked premise tokens.
    pub m_hp: Var,
    /// `p x h`, rows are distributions over unmasked hypothesis tokens.
    pub m_ph: Var,
    pub premise: EncodedSeq,
    pub hypothesis: EncodedSeq,
}

/// Embedding table and contextual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: ParamId,
    pub bilstm: BiLstm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: StackDims, rng: &mut ChaCha8Rng) -> Self {
        let embedding = store.add_uniform(format!("{prefix}embedding"), dims.vocab_size, dims.d_emb, 0.1, rng);
        store.get_mut(embedding).row_mut(PAD_ID).fill(0.0);
        let bilstm = BiLstm::new(store, &format!("{prefix}encoder"), dims.d_emb, dims.d_hidden, rng);
        Encoder { embedding, bilstm }
    }

    pub fn embed(&self, g: &Graph, seq: &TokenSeq) -> Result<EmbeddedSeq> {
        let table = g.param(self.embedding);
        let rows = g.shape(table).0;
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= rows) {
            return Err(MulteeError::Index(format!(
                "token id {bad} outside embedding table of {rows} rows"
            )));
        }
        Ok(EmbeddedSeq {
            x: g.gather(table, &seq.ids, PAD_ID),
            mask: seq.mask(),
        })
    }

    pub fn encode(&self, g: &Graph, x: &EmbeddedSeq) -> EncodedSeq {
        EncodedSeq {
            x: self.bilstm.forward(g, x.x, &x.mask),
            mask: x.mask.clone(),
        }
    }

    pub fn embed_encode(&self, g: &Graph, seq: &TokenSeq) -> Result<EncodedSeq> {
        Ok(self.encode(g, &self.embed(g, seq)?))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embedding];
        p.extend(self.bilstm.params());
        p
    }
}

/// Dot-product attention in both directions, softmax restricted to unmasked positions.
pub fn cross_attend(g: &Graph, premise: &EncodedSeq, hypothesis: &EncodedSeq) -> CrossAttention {
    let e = g.matmul_bt(hypothesis.x, premise.x);
    let m_hp = g.masked_softmax(e, &premise.mask);
    let et = g.transpose(e);
    let m_ph = g.masked_softmax(et, &hypothesis.mask);
    CrossAttention {
        m_hp,
        m_ph,
        premise: premise.clone(),
        hypothesis: hypothesis.clone(),
    }
}

/// `[a; a~; a - a~; a * a~]` per row.
pub fn enhance(g: &Graph, a: Var, attended: Var) -> Var {
    let diff = g.sub(a, attended);
    let prod = g.mul(a, attended);
    g.concat_cols(&[a, attended, diff, prod])
}

/// Layers above cross attention up to the pooled vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Composer {
    pub projection: Affine,
    pub bilstm: BiLstm,
}

impl Composer {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: StackDims, rng: &mut ChaCha8Rng) -> Self {
        let projection = Affine::new(store, &format!("{prefix}compose.proj"), 4 * dims.d_ctx(), dims.d_hidden, rng);
        let bilstm = BiLstm::new(store, &format!("{prefix}compose.bilstm"), dims.d_hidden, dims.d_hidden, rng);
        Composer { projection, bilstm }
    }

    fn side(&self, g: &Graph, own: &EncodedSeq, other: &EncodedSeq, attention: Var, segments: &[usize]) -> [Var; 2] {
        let attended = g.matmul(attention, other.x);
        let enh = enhance(g, own.x, attended);
        let proj = g.relu(self.projection.forward(g, enh));
        let v = if segments.len() <= 2 {
            self.bilstm.forward(g, proj, &own.mask)
        } else {
            let parts: Vec<Var> = segments
                .windows(2)
                .map(|w| {
                    let x = g.slice_rows(proj, w[0], w[1] - w[0]);
                    self.bilstm.forward(g, x, &own.mask[w[0]..w[1]])
                })
                .collect();
            g.concat_rows(&parts)
        };
        [g.masked_mean_rows(v, &own.mask), g.masked_max_rows(v, &own.mask)]
    }

    /// `1 x d_final` vector: `[avg_p; max_p; avg_h; max_h]`.
    pub fn compose_and_pool(&self, g: &Graph, att: &CrossAttention) -> Var {
        self.compose_and_pool_segments(g, att, &[])
    }

    /// As [`Composer::compose_and_pool`], but the premise-side composition restarts at
    /// each boundary (segment starts followed by the total length) so that
    /// independent sentences are composed independently before pooling.
    pub fn compose_and_pool_segments(&self, g: &Graph, att: &CrossAttention, boundaries: &[usize]) -> Var {
        let [pa, pm] = self.side(g, &att.premise, &att.hypothesis, att.m_ph, boundaries);
        let [ha, hm] = self.side(g, &att.hypothesis, &att.premise, att.m_hp, &[]);
        g.concat_cols(&[pa, pm, ha, hm])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.projection.params();
        p.extend(self.bilstm.params());
        p
    }
}

/// Logits and probabilities over entailment, contradiction, neutral.
#[derive(Clone, Copy, Debug)]
pub struct EntailmentOutput {
    pub logits: Var,
    pub probs: Var,
}

pub const NUM_CLASSES: usize = 3;

/// A full `f_e`: encoder, composer and classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntailmentStack {
    pub encoder: Encoder,
    pub composer: Composer,
    pub classifier: Affine,
}

impl EntailmentStack {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: StackDims, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::new(store, prefix, dims, rng);
        let composer = Composer::new(store, prefix, dims, rng);
        let classifier = Affine::new(store, &format!("{prefix}classifier"), dims.d_final(), NUM_CLASSES, rng);
        EntailmentStack {
            encoder,
            composer,
            classifier,
        }
    }

    pub fn f_e_v(&self, g: &Graph, premise: &TokenSeq, hypothesis: &TokenSeq) -> Result<Var> {
        let p = self.encoder.embed_encode(g, premise)?;
        let h = self.encoder.embed_encode(g, hypothesis)?;
        Ok(self.composer.compose_and_pool(g, &cross_attend(g, &p, &h)))
    }

    pub fn classify(&self, g: &Graph, final_vec: Var) -> EntailmentOutput {
        let logits = self.classifier.forward(g, final_vec);
        EntailmentOutput {
            logits,
            probs: g.softmax(logits),
        }
    }

    pub fn f_e_p(&self, g: &Graph, premise: &TokenSeq, hypothesis: &TokenSeq) -> Result<EntailmentOutput> {
        let v = self.f_e_v(g, premise, hypothesis)?;
        Ok(self.classify(g, v))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.composer.params());
        p.extend(self.classifier.params());
        p
    }
}

/// A standalone entailment model: the unit of NLI pre-training.
#[derive(Clone, Debug)]
pub struct EntailmentModel {
    pub dims: StackDims,
    pub store: ParamStore,
    pub stack: EntailmentStack,
}

impl EntailmentModel {
    pub fn new(dims: StackDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = EntailmentStack::new(&mut store, "", dims, &mut rng);
        EntailmentModel { dims, store, stack }
    }

    /// Class probabilities for one pair.
    pub fn probabilities(&self, premise: &TokenSeq, hypothesis: &TokenSeq) -> Result<Vec<f64>> {
        let g = Graph::new(&self.store);
        let out = self.stack.f_e_p(&g, premise, hypothesis)?;
        Ok(g.value(out.probs).data().to_vec())
    }

    /// The pooled vector for one pair.
    pub fn final_vector(&self, premise: &TokenSeq, hypothesis: &TokenSeq) -> Result<Mat> {
        let g = Graph::new(&self.store);
        let v = self.stack.f_e_v(&g, premise, hypothesis)?;
        Ok((*g.value(v)).clone())
    }
}
