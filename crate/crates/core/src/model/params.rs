use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{rng_for, stream};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations. A model registers its tensors
/// here once and keeps only the returned ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws every tensor from one seeded stream in declaration order. Values
    /// are sampled in 64-bit and then rounded, so both precisions start from
    /// the same point.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = rng_for(seed, &[stream::INIT]);
        let tensors = self
            .specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let values: Vec<f64> = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Tensor::from_f64(&spec.shape, &values).expect("sized from spec")
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }
}

/// Parameter values, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks names and shapes against a layout, e.g. after loading a checkpoint.
    pub fn check_layout(&self, layout: &ParamLayout) -> Result<(), ModelError> {
        if self.tensors.len() != layout.len() {
            return Err(ModelError::Config(format!(
                "parameter count {} does not match the model's {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for ((name, t), spec) in self.names.iter().zip(&self.tensors).zip(&layout.specs) {
            if *name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on the tape, as gradient leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter after `backward`; untouched ones are zeros.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}
