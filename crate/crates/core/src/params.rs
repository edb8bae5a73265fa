//! Named parameter storage and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MulteeError, Result};
use crate::tensor::Mat;

/// Handle to one tensor inside a [`ParamStore`]. Layers that share weights hold equal ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        id
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    /// Glorot/Xavier uniform init.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, scale, rng)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Name-keyed snapshot in a stable order.
    pub fn to_named(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named`; missing or misshaped entries are errors.
    pub fn load_named(&mut self, named: &BTreeMap<String, Mat>) -> Result<()> {
        for p in &mut self.params {
            let src = named.get(&p.name).ok_or_else(|| {
                MulteeError::Checkpoint(format!("missing parameter `{}`", p.name))
            })?;
            if src.shape() != p.value.shape() {
                return Err(MulteeError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Replaces one parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(MulteeError::Checkpoint(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Copies `src` into `dst`; used to initialise several copies of a layer from one set of weights.
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) {
        let v = self.params[src.0].value.clone();
        assert_eq!(v.shape(), self.params[dst.0].value.shape());
        self.params[dst.0].value = v;
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// Adam over a fixed set of parameters. Parameters outside the set never change.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<ParamId, (Mat, Mat)>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: &[ParamId]) -> Self {
        let slots = ids
            .iter()
            .map(|&id| {
                let (r, c) = store.get(id).shape();
                (id, (Mat::zeros(r, c), Mat::zeros(r, c)))
            })
            .collect();
        Adam {
            config,
            step: 0,
            slots,
        }
    }

    pub fn tracks(&self, id: ParamId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    /// Applies one update. `grads` may contain entries for untracked parameters; they are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Mat>) {
        self.step += 1;
        let cfg = self.config;
        let mut scale = 1.0;
        if cfg.clip_norm > 0.0 {
            let norm_sq: f64 = grads
                .iter()
                .filter(|(id, _)| self.slots.contains_key(id))
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > cfg.clip_norm {
                scale = cfg.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let Some((m, v)) = self.slots.get_mut(id) else {
                continue;
            };
            let param = store.get_mut(*id);
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_only_tracked_parameters() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::scalar(1.0));
        let b = store.add("b", Mat::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::default(), &store, &[a]);
        let grads: BTreeMap<_, _> = [(a, Mat::scalar(1.0)), (b, Mat::scalar(1.0))].into();
        opt.step(&mut store, &grads);
        assert!(store.get(a).item() < 1.0);
        assert_eq!(store.get(b).item(), 1.0);
        assert!(opt.tracks(a) && !opt.tracks(b));
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::scalar(3.0));
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store, &[x]);
        for _ in 0..500 {
            let g = 2.0 * (store.get(x).item() - 1.0);
            opt.step(&mut store, &[(x, Mat::scalar(g))].into());
        }
        assert!((store.get(x).item() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", Mat::zeros(2, 2));
        let named: BTreeMap<_, _> = [("w".to_string(), Mat::zeros(3, 2))].into();
        assert!(store.load_named(&named).is_err());
    }
}
