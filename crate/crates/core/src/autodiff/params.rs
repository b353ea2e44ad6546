use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::{Graph, TensorContainer, Var};
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay is decoupled from the moment
/// estimates: `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// Named parameter tensors plus Adam state. Iteration is ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Graph leaves bound to a store's parameters for one step.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn merge(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Array2<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let dim = value.dim();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                m: Array2::zeros(dim),
                v: Array2::zeros(dim),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Every parameter becomes a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self
                .slots
                .iter()
                .map(|(k, s)| (k.clone(), g.param(s.value.clone())))
                .collect(),
        }
    }

    /// Every parameter becomes a constant of `g` (frozen).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self
                .slots
                .iter()
                .map(|(k, s)| (k.clone(), g.constant(s.value.clone())))
                .collect(),
        }
    }

    /// Reads gradients of bound parameters; unreached parameters get zeros.
    pub fn gradients(&self, g: &Graph, bindings: &Bindings) -> Grads {
        self.slots
            .iter()
            .map(|(k, s)| {
                let grad = bindings
                    .vars
                    .get(k)
                    .and_then(|&v| g.grad(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(s.value.dim()));
                (k.clone(), grad)
            })
            .collect()
    }

    /// One Adam step with bias correction. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &Grads, lr: f64, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if g.dim() != slot.value.dim() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: g.shape().to_vec(),
                    right: slot.value.shape().to_vec(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in &mut self.slots {
            let Slot { value, m, v } = slot;
            match grads.get(name) {
                Some(g) => Zip::from(value).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p);
                }),
                None => Zip::from(value).and(m).and(v).for_each(|p, m, v| {
                    *m *= cfg.beta1;
                    *v *= cfg.beta2;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p);
                }),
            }
        }
        Ok(())
    }

    /// Writes values, moments and the step counter under `prefix`.
    pub fn export(&self, out: &mut TensorContainer, prefix: &str) {
        for (name, slot) in &self.slots {
            out.push(format!("{prefix}{name}"), &slot.value);
        }
        for (name, slot) in &self.slots {
            out.push(format!("{prefix}@m/{name}"), &slot.m);
            out.push(format!("{prefix}@v/{name}"), &slot.v);
        }
        out.push(
            format!("{prefix}@step"),
            &Array2::from_elem((1, 1), f64::from_bits(self.step)),
        );
    }

    /// Inverse of [`ParamStore::export`]; only tensors under `prefix` are read.
    pub fn import(container: &TensorContainer, prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut moments: BTreeMap<String, (Option<Array2<f64>>, Option<Array2<f64>>)> = BTreeMap::new();
        for entry in container.entries() {
            let Some(rest) = entry.name.strip_prefix(prefix) else { continue };
            let arr = entry.to_array()?;
            if rest == "@step" {
                store.step = arr[[0, 0]].to_bits();
            } else if let Some(n) = rest.strip_prefix("@m/") {
                moments.entry(n.to_string()).or_default().0 = Some(arr);
            } else if let Some(n) = rest.strip_prefix("@v/") {
                moments.entry(n.to_string()).or_default().1 = Some(arr);
            } else {
                store.insert(rest.to_string(), arr);
            }
        }
        for (name, (m, v)) in moments {
            let slot = store
                .slots
                .get_mut(&name)
                .ok_or_else(|| Error::MissingTensor(format!("{prefix}{name}")))?;
            if let Some(m) = m {
                slot.m = m;
            }
            if let Some(v) = v {
                slot.v = v;
            }
        }
        if store.is_empty() {
            return Err(Error::MissingTensor(format!("{prefix}*")));
        }
        Ok(store)
    }

    /// True when every parameter value is bit-identical to `other`'s.
    pub fn values_bit_equal(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.dim() == b.value.dim()
                    && a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Divides the learning rate by `1/factor` once the monitored loss has
/// failed to improve by a relative `threshold` for more than `patience`
/// consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 0.1,
            patience: 5,
            threshold: 1e-3,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records an epoch loss (lower is better); returns the rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - self.threshold * best.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
