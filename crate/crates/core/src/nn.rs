//! Parameterised building blocks. Each block only holds [`ParamId`]s, so copying a
//! block shares its parameters.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// `x W + b`, applied row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), d_in, d_out, rng);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Affine { w, b }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let xw = g.matmul(x, g.param(self.w));
        g.add_row(xw, g.param(self.b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), d_in, 4 * hidden, rng);
        let u = store.add_xavier(format!("{name}.u"), hidden, 4 * hidden, rng);
        let mut bias = Mat::zeros(1, 4 * hidden);
        // forget gate starts open
        for j in hidden..2 * hidden {
            bias.set(0, j, 1.0);
        }
        let b = store.add(format!("{name}.b"), bias);
        Lstm { w, u, b }
    }

    pub fn forward(&self, g: &Graph, x: Var, mask: &[bool], reverse: bool) -> Var {
        g.lstm(
            x,
            g.param(self.w),
            g.param(self.u),
            g.param(self.b),
            mask,
            reverse,
        )
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.u, self.b]
    }
}

/// Forward and backward LSTMs with outputs concatenated per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub fw: Lstm,
    pub bw: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fw: Lstm::new(store, &format!("{name}.fw"), d_in, hidden, rng),
            bw: Lstm::new(store, &format!("{name}.bw"), d_in, hidden, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var, mask: &[bool]) -> Var {
        let f = self.fw.forward(g, x, mask, false);
        let b = self.bw.forward(g, x, mask, true);
        g.concat_cols(&[f, b])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fw.params();
        p.extend(self.bw.params());
        p
    }
}
