//! Named trainable parameters, kept as plain data between training steps.
//!
//! A [`ParamStore`] owns the values. Each forward pass binds them into fresh
//! leaf tensors ([`Bound`]), so the graph of one step never outlives it and
//! the store itself stays `Send`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result as TensorResult, Tensor};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declares parameters while a model is assembled.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl ParamStore {
    /// Materializes `specs` in declaration order from one seeded stream.
    pub fn initialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let entries = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::TruncNormal(std) => (0..n).map(|_| trunc_normal(rng, std)).collect(),
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                };
                ParamEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name)
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Checks names and shapes against a model's declared parameters.
    pub fn matches(&self, specs: &[ParamSpec]) -> bool {
        self.entries.len() == specs.len()
            && self
                .entries
                .iter()
                .zip(specs)
                .all(|(e, s)| e.name == s.name && e.shape == s.shape)
    }

    /// Wraps every value in a leaf tensor.
    pub fn bind(&self, requires_grad: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| Tensor::leaf(e.data.clone(), &e.shape, requires_grad).expect("entry shape"))
            .collect();
        Bound { tensors }
    }

    /// Flat index → (parameter, offset) for gradient probes.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.data.len() {
                return Some((ParamId(i), flat));
            }
            flat -= e.data.len();
        }
        None
    }

    pub fn sample_coordinates(&self, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
        let total = self.scalar_count();
        (0..count)
            .map(|_| self.locate(rng.random_range(0..total)).expect("in range"))
            .collect()
    }
}

/// Parameter values bound as leaves of one computation graph.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients per parameter; parameters the graph never reached get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }
}

pub(crate) fn bound_opt<'a>(p: &'a Bound, id: Option<ParamId>) -> Option<&'a Tensor> {
    id.map(|id| p.get(id))
}

/// Convenience used by modules that hold a weight and optional bias.
pub(crate) fn linear_fwd(
    p: &Bound,
    x: &Tensor,
    w: ParamId,
    b: Option<ParamId>,
) -> TensorResult<Tensor> {
    x.linear(p.get(w), bound_opt(p, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_truncated() {
        let mut reg = ParamRegistry::new();
        reg.add("w", &[10, 10], Init::TruncNormal(0.02));
        reg.add("b", &[10], Init::Zeros);
        reg.add("g", &[10], Init::Ones);
        let a = ParamStore::initialize(reg.specs(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = ParamStore::initialize(reg.specs(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.entries()[0].data.iter().all(|v| v.abs() <= 0.04));
        assert!(a.entries()[1].data.iter().all(|&v| v == 0.0));
        assert!(a.entries()[2].data.iter().all(|&v| v == 1.0));
        assert_eq!(a.scalar_count(), 120);
        assert_eq!(a.locate(105), Some((ParamId(1), 5)));
        assert!(a.matches(reg.specs()));
    }
}
