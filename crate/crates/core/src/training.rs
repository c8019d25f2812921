//! Parameter storage, the Adam optimizer, seeding, and the bridge that binds
//! stored parameters into a per-window autodiff graph.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

/// Named learnable tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone)]
pub struct ParameterStore<T: Real> {
    params: BTreeMap<String, Param<T>>,
    seed: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(
            name,
            Param {
                tensor,
                trainable,
                grad: None,
            },
        );
        Ok(())
    }

    /// Insert a tensor drawn from `N(0, std²)`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_f64(shape, &data)?, true)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::of(value)), true)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Mark exactly the parameters accepted by `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.tensor.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                grad.shape(),
                p.tensor.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (o, &v) in g.data_mut().iter_mut().zip(grad.data()) {
                    *o = *o + v;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over the names and raw bytes of every parameter accepted by
    /// `filter`.
    pub fn digest(&self, filter: impl Fn(&str, &Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in self.params.iter().filter(|(n, p)| filter(n, p)) {
            h.update(name.as_bytes());
            buf.clear();
            for &v in p.tensor.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

/// Total element count over parameters whose name passes `filter`.
pub fn count_params<T: Real>(store: &ParameterStore<T>, filter: impl Fn(&str) -> bool) -> usize {
    store
        .iter()
        .filter(|(n, _)| filter(n))
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Seeding

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Mask = 2,
    Shuffle = 3,
    Data = 4,
    Fault = 5,
    Dropout = 6,
    Subset = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with a path of stream/index words.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(root), |acc, &w| splitmix(acc ^ splitmix(w)))
}

/// Every stochastic decision in a run draws from a stream of this bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedBank {
    root: u64,
}

/// Build the seed bank for a run.
pub fn seed_all(seed: u64) -> SeedBank {
    SeedBank { root: seed }
}

impl SeedBank {
    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, stream: Stream, path: &[u64]) -> u64 {
        let mut full = Vec::with_capacity(path.len() + 1);
        full.push(stream as u64);
        full.extend_from_slice(path);
        derive_seed(self.root, &full)
    }

    pub fn rng(&self, stream: Stream, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, path))
    }
}

/// Stable 64-bit tag for a string (FNV-1a), for use in seed paths.
pub fn tag(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3.0e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments<T: Real> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Adam with bias correction.
///
/// Trainable parameters without a gradient are skipped unless
/// `require_all` is set, in which case they are a contract error. Pretraining
/// leaves it off: a fleet-homogeneous batch never touches other fleets'
/// token pools.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub require_all: bool,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReport {
    pub step: u64,
    pub updated: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            require_all: false,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Restore saved state (used by checkpoint loading).
    pub fn restore(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Adam {
            config,
            require_all: false,
            step,
            moments,
        }
    }

    /// One update of every trainable parameter that holds a gradient;
    /// gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> Result<StepReport> {
        for (name, p) in store.iter() {
            if !p.trainable && p.grad.is_some() {
                return Err(Error::FrozenGrad(name.to_string()));
            }
            if self.require_all && p.trainable && p.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let mut updated = 0;
        for (name, p) in store.params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![T::zero(); grad.numel()],
                second: vec![T::zero(); grad.numel()],
            });
            let data = p.tensor.data_mut();
            for (((w, &g), m), v) in data
                .iter_mut()
                .zip(grad.data())
                .zip(mom.first.iter_mut())
                .zip(mom.second.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
            updated += 1;
        }
        Ok(StepReport {
            step: self.step,
            updated,
        })
    }
}

// ---------------------------------------------------------------------------
// Binding parameters into a graph

/// One forward/backward context: a fresh graph plus lazily bound parameters.
///
/// With `track_grads` off every parameter enters the graph as a constant, so
/// inference builds no gradient bookkeeping.
pub struct Session<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParameterStore<T>,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
    /// Multiplies spent in the channel- and time-attention score/context
    /// products, for the complexity counters.
    pub channel_attn_mults: u64,
    pub time_attn_mults: u64,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParameterStore<T>, track_grads: bool) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            track_grads,
            channel_attn_mults: 0,
            time_attn_mults: 0,
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    /// Graph handle for parameter `name`, binding it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self.store.get(name)?;
        let v = self
            .g
            .leaf(param.tensor.clone(), self.track_grads && param.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Backward from `loss`; returns gradients of every bound trainable
    /// parameter the loss depends on, in name order.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(String, Tensor<T>)>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect())
    }
}

/// Sum per-window gradient lists (in order) and scale by `scale`.
pub fn reduce_grads<T: Real>(lists: Vec<Vec<(String, Tensor<T>)>>, scale: f64) -> BTreeMap<String, Tensor<T>> {
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for list in lists {
        for (name, g) in list {
            match acc.get_mut(&name) {
                Some(a) => {
                    for (o, &v) in a.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + v;
                    }
                }
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let s = T::of(scale);
    for g in acc.values_mut() {
        for v in g.data_mut() {
            *v = *v * s;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new(0);
        s.insert("w", Tensor::from_f64(&[1], &[w]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(cfg);
        let g = 0.37;
        store.accumulate_grad("w", &Tensor::from_f64(&[1], &[g]).unwrap()).unwrap();
        adam.step(&mut store).unwrap();
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((store.tensor("w").unwrap().data()[0] - expected).abs() < 1e-9);
        assert!(store.get("w").unwrap().grad.is_none(), "grads cleared after step");
    }

    #[test]
    fn zero_grads_leave_parameters_unchanged() {
        let mut store = scalar_store(2.5);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            store.accumulate_grad("w", &Tensor::zeros(&[1])).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.tensor("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let w = store.tensor("w").unwrap().data()[0];
            store
                .accumulate_grad("w", &Tensor::from_f64(&[1], &[2.0 * (w - 3.0)]).unwrap())
                .unwrap();
            adam.step(&mut store).unwrap();
        }
        let w = store.tensor("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn frozen_parameter_with_grad_is_rejected() {
        let mut store = scalar_store(1.0);
        store.accumulate_grad("w", &Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        store.set_trainable(|_| false);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(Error::FrozenGrad(_))));
    }

    #[test]
    fn missing_grad_is_a_contract_error_when_required() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        adam.require_all = true;
        assert!(matches!(adam.step(&mut store), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn linear_layer_param_count() {
        let mut store = ParameterStore::<f32>::new(0);
        assert_eq!(count_params(&store, |_| true), 0);
        store.insert_full("lin.w", &[128, 512], 0.0).unwrap();
        store.insert_full("lin.b", &[512], 0.0).unwrap();
        store.insert_full("other", &[3], 0.0).unwrap();
        assert_eq!(count_params(&store, |n| n.starts_with("lin.")), 66_048);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = seed_all(7);
        assert_eq!(a.seed(Stream::Mask, &[1, 2]), seed_all(7).seed(Stream::Mask, &[1, 2]));
        assert_ne!(a.seed(Stream::Mask, &[1, 2]), a.seed(Stream::Mask, &[2, 1]));
        assert_ne!(a.seed(Stream::Mask, &[1]), a.seed(Stream::Init, &[1]));
        assert_ne!(a.seed(Stream::Mask, &[1]), seed_all(8).seed(Stream::Mask, &[1]));
    }
}
