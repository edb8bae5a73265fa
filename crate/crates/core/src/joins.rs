//! Join operations: merge per-sentence layer outputs, weighted by α, into one
//! paragraph-level output at the score, embedding, final or cross-attention layer.

use crate::entailment::{CrossAttention, EmbeddedSeq, EncodedSeq};
use crate::error::{MulteeError, Result};
use crate::graph::{Graph, Var};

/// Guard added to row sums when renormalising the joined attention matrix.
pub const RENORM_EPS: f64 = 1e-12;

/// Passage-wide cross attention.
#[derive(Clone, Debug)]
pub struct JoinedCrossAttention {
    /// `m_hp` spans the whole passage; `m_ph` stacks the per-segment matrices.
    pub attention: CrossAttention,
    /// Segment start offsets followed by the total length.
    pub boundaries: Vec<usize>,
}

impl JoinedCrossAttention {
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }
}

fn alpha_len(g: &Graph, alpha: Var, n: usize) -> Result<()> {
    let shape = g.shape(alpha);
    if shape != (1, n) {
        return Err(MulteeError::Shape(format!(
            "α has shape {}x{}, expected 1x{n}",
            shape.0, shape.1
        )));
    }
    Ok(())
}

fn weight(g: &Graph, alpha: Var, i: usize) -> Var {
    g.pick(alpha, 0, i)
}

/// `max_i α_i s_i`, ties to the lowest index.
pub fn join_score(g: &Graph, s: Var, alpha: Var) -> Result<Var> {
    let (rows, n) = g.shape(s);
    if rows != 1 || n == 0 {
        return Err(MulteeError::Shape(format!("scores must be 1xn, got {rows}x{n}")));
    }
    alpha_len(g, alpha, n)?;
    Ok(g.max_elem(g.mul(alpha, s)))
}

/// Scales each premise's embeddings by its weight and concatenates them.
pub fn join_embedding(
    g: &Graph,
    premises: &[EmbeddedSeq],
    hypothesis: &EmbeddedSeq,
    alpha: Var,
) -> Result<(EmbeddedSeq, EmbeddedSeq)> {
    if premises.is_empty() {
        return Err(MulteeError::Shape("no premises to join".into()));
    }
    alpha_len(g, alpha, premises.len())?;
    let width = g.shape(hypothesis.x).1;
    let mut parts = Vec::with_capacity(premises.len());
    let mut mask = Vec::new();
    for (i, p) in premises.iter().enumerate() {
        if g.shape(p.x).1 != width {
            return Err(MulteeError::Shape(format!(
                "premise {i} embedding width {} differs from hypothesis width {width}",
                g.shape(p.x).1
            )));
        }
        parts.push(g.scale_by(p.x, weight(g, alpha, i)));
        mask.extend_from_slice(&p.mask);
    }
    Ok((
        EmbeddedSeq {
            x: g.concat_rows(&parts),
            mask,
        },
        hypothesis.clone(),
    ))
}

/// `sum_i α_i h_i` over `1 x d` vectors.
pub fn join_final(g: &Graph, vectors: &[Var], alpha: Var) -> Result<Var> {
    if vectors.is_empty() {
        return Err(MulteeError::Shape("no vectors to join".into()));
    }
    alpha_len(g, alpha, vectors.len())?;
    let d = g.shape(vectors[0]);
    if let Some(bad) = vectors.iter().find(|&&v| g.shape(v) != d || d.0 != 1) {
        return Err(MulteeError::Shape(format!(
            "final vectors must share shape 1x{}, found {:?}",
            d.1,
            g.shape(*bad)
        )));
    }
    Ok(g.matmul(alpha, g.concat_rows(vectors)))
}

/// Column-concatenates `α_i M^{hp_i}`, renormalises each row, and concatenates the
/// premise encodings. The premise-to-hypothesis direction stays per segment.
pub fn join_cross_attention(g: &Graph, atts: &[CrossAttention], alpha: Var) -> Result<JoinedCrossAttention> {
    let first = atts
        .first()
        .ok_or_else(|| MulteeError::Shape("no attention matrices to join".into()))?;
    alpha_len(g, alpha, atts.len())?;
    let h = g.shape(first.m_hp).0;
    let mut scaled = Vec::with_capacity(atts.len());
    let mut ph = Vec::with_capacity(atts.len());
    let mut premise_parts = Vec::with_capacity(atts.len());
    let mut mask = Vec::new();
    let mut boundaries = vec![0];
    for (i, att) in atts.iter().enumerate() {
        if g.shape(att.m_hp).0 != h {
            return Err(MulteeError::Shape(format!(
                "premise {i} attends from {} hypothesis tokens, expected {h}",
                g.shape(att.m_hp).0
            )));
        }
        scaled.push(g.scale_by(att.m_hp, weight(g, alpha, i)));
        ph.push(att.m_ph);
        premise_parts.push(att.premise.x);
        mask.extend_from_slice(&att.premise.mask);
        boundaries.push(mask.len());
    }
    let m_hp = g.row_normalize(g.concat_cols(&scaled), RENORM_EPS);
    Ok(JoinedCrossAttention {
        attention: CrossAttention {
            m_hp,
            m_ph: g.concat_rows(&ph),
            premise: EncodedSeq {
                x: g.concat_rows(&premise_parts),
                mask,
            },
            hypothesis: first.hypothesis.clone(),
        },
        boundaries,
    })
}
