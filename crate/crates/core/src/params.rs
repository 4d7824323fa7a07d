//! Named parameter plans and stores.

use dpt_tensor::{Scalar, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DptError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside two
    /// standard deviations.
    TruncNormal(f64),
    /// He-normal for a ReLU network: `std = sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Trained by gradient descent.
    Learnable,
    /// Stored state updated outside gradient descent (batch-norm statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: Kind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of every tensor a model owns. Counting parameters only
/// needs the plan, never the data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    specs: Vec<ParamSpec>,
}

impl Plan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init, kind: Kind) {
        let name = name.into();
        debug_assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            kind,
        });
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.push(name, shape, init, Kind::Learnable);
    }

    /// `weight [in, out]` and optional `bias [out]`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.param(format!("{prefix}.weight"), &[d_in, d_out], Init::TruncNormal(0.02));
        if bias {
            self.param(format!("{prefix}.bias"), &[d_out], Init::Zeros);
        }
    }

    /// `weight [out, in, k, k]` and optional `bias [out]`.
    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
        self.param(
            format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            Init::HeNormal { fan_in: c_in * k * k },
        );
        if bias {
            self.param(format!("{prefix}.bias"), &[c_out], Init::Zeros);
        }
    }

    /// `weight [in, out, k, k]` and optional `bias [out]`.
    pub fn conv_transpose(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
        self.param(
            format!("{prefix}.weight"),
            &[c_in, c_out, k, k],
            Init::HeNormal { fan_in: c_in * k * k },
        );
        if bias {
            self.param(format!("{prefix}.bias"), &[c_out], Init::Zeros);
        }
    }

    /// `weight` and `bias`, both `[dim]`.
    pub fn norm(&mut self, prefix: &str, dim: usize) {
        self.param(format!("{prefix}.weight"), &[dim], Init::Ones);
        self.param(format!("{prefix}.bias"), &[dim], Init::Zeros);
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.norm(prefix, channels);
        self.push(format!("{prefix}.running_mean"), &[channels], Init::Zeros, Kind::Buffer);
        self.push(format!("{prefix}.running_var"), &[channels], Init::Ones, Kind::Buffer);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Learnable element count.
    pub fn num_learnable(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind == Kind::Learnable)
            .map(ParamSpec::numel)
            .sum()
    }

    /// Every element stored in an archive, buffers included.
    pub fn num_stored(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Learnable elements whose name starts with `prefix`.
    pub fn num_learnable_under(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind == Kind::Learnable && s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }

    /// Fresh tensors for every entry, deterministic in `seed`.
    pub fn initialize<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in &self.specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::TruncNormal(std) => (0..n).map(|_| T::lit(trunc_normal(&mut rng) * std)).collect(),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::lit(z * std)
                        })
                        .collect()
                }
            };
            let t = Tensor::new(&spec.shape, data).expect("plan shape matches data");
            store.insert(&spec.name, t, spec.kind);
        }
        store
    }
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Tensors by name, in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, (Tensor<T>, Kind)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, kind: Kind) {
        self.tensors.insert(name.to_string(), (tensor, kind));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| DptError::MissingParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.tensors.get(name).map(|(_, k)| *k)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let (slot, _) = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| DptError::MissingParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(DptError::Input(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Overwrites every tensor whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, (t, _)) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, Kind)> {
        self.tensors.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Learnable)
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_learnable(&self) -> usize {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Learnable)
            .map(|(_, t, _)| t.numel())
            .sum()
    }

    pub fn num_stored(&self) -> usize {
        self.iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, (t, k))| (n.clone(), (t.cast::<U>(), *k)))
                .collect(),
        }
    }

    /// Checks that names, order, shapes and kinds agree with `plan`.
    pub fn check_against(&self, plan: &Plan) -> Result<()> {
        for spec in plan.specs() {
            let (t, kind) = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| DptError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(DptError::Input(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if *kind != spec.kind {
                return Err(DptError::Input(format!("parameter `{}` has the wrong kind", spec.name)));
            }
        }
        if let Some(extra) = self.names().find(|n| plan.get(n).is_none()) {
            return Err(DptError::Input(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}
