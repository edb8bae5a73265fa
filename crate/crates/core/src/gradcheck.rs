//! Central finite-difference checks of autodiff parameter gradients.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to rounding compare absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks up to `max_entries` evenly spaced entries of each parameter in `ids`.
/// `loss` must build a scalar from a fresh graph over the store.
///
/// Each entry is differenced with every step in `steps` and keeps its best
/// agreement, so an entry lying within one step of a ReLU or max kink can
/// still be checked with a smaller step.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    steps: &[f64],
    max_entries: usize,
    loss: F,
) -> Vec<GradCheck>
where
    F: for<'a> Fn(&Graph<'a>) -> Var,
{
    let grads = {
        let g = Graph::new(store);
        let l = loss(&g);
        g.backward(l).into_params()
    };
    let eval = |store: &ParamStore| {
        let g = Graph::new(store);
        let l = loss(&g);
        g.scalar_value(l)
    };
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = store.get(id).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let mut report = GradCheck {
            name: store.name(id).to_string(),
            entries_checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for k in (0..len).step_by(stride) {
            let orig = store.get(id).data()[k];
            let analytic = grads.get(&id).map_or(0.0, |m| m.data()[k]);
            let (mut rel, mut abs) = (f64::INFINITY, f64::INFINITY);
            for &step in steps {
                store.get_mut(id).data_mut()[k] = orig + step;
                let up = eval(store);
                store.get_mut(id).data_mut()[k] = orig - step;
                let down = eval(store);
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * step);
                rel = rel.min(rel_error(analytic, numeric));
                abs = abs.min((analytic - numeric).abs());
            }
            report.entries_checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max(abs);
        }
        out.push(report);
    }
    out
}
