//! Named parameter storage, initialization and per-forward binding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, invalid, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Every learnable tensor of a model, keyed by hierarchical dotted path.
///
/// Iteration order is the lexicographic key order, which is also the order
/// parameters are laid out in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        ensure!(
            !self.tensors.contains_key(name),
            "parameter {name} declared twice"
        );
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Replaces an existing tensor, keeping the key set fixed.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        ensure!(
            slot.dims() == t.dims(),
            "parameter {name}: shape {:?} does not match {:?}",
            t.dims(),
            slot.dims()
        );
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Overwrites every parameter with `N(0, scale^2)` draws. Used by
    /// gradient checks, where the zero/identity initializations would hide
    /// whole branches from the check.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(z * scale);
            }
        }
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Normal with std 0.02, truncated to two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    /// Uniform on `[0, 1)`.
    Uniform,
}

/// Deterministic source of initial parameter values. Each tensor draws from
/// its own stream keyed by `(seed, name)`, so adding or removing a block never
/// changes the initial values of the others.
pub struct Initializer {
    seed: u64,
}

const INIT_STD: f64 = 0.02;

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn tensor<T: Real>(&self, name: &str, dims: &[usize], kind: InitKind) -> Tensor<T> {
        // FNV-1a over the name, mixed with the model seed.
        let key = name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(key ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let n: usize = dims.iter().product();
        let data = match kind {
            InitKind::Zeros => vec![T::zero(); n],
            InitKind::Ones => vec![T::one(); n],
            InitKind::Uniform => (0..n).map(|_| T::lit(rng.random::<f64>())).collect(),
            InitKind::TruncNormal => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::lit(z * INIT_STD);
                    }
                })
                .collect(),
        };
        Tensor::from_vec(dims, data).expect("dims match")
    }
}

/// Binds a [`ParamStore`] to a fresh [`Tape`] for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Parameters enter the tape as differentiable leaves.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants.
    pub fn infer(store: &'a ParamStore<T>) -> Self {
        Ctx {
            trainable: false,
            ..Self::train(store)
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))?
            .clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient of every parameter touched by this forward pass.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}
