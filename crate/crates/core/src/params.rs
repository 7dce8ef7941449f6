use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.push((name.into(), value));
    }

    /// Centered uniform initialization with half-width `1/sqrt(fan_in)`.
    pub fn push_uniform(&mut self, name: &str, dims: &[usize], fan_in: usize, rng: &mut StreamRng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = dims.iter().product();
        let data = (0..numel)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::new(dims.to_vec(), data).expect("dims match"));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Inserts every tensor as a graph leaf; `trainable` controls whether
    /// the leaves collect gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients collected on bound leaves, in parameter order.
    pub fn grads(&self, g: &mut Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.0.iter().map(|&v| g.take_grad(v)).collect()
    }

    /// Replaces tensors with those of `other`, requiring identical names and dims.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Mismatch(format!(
                "expected {} tensors, got {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, mine), (oname, theirs)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || mine.dims() != theirs.dims() {
                return Err(Error::Mismatch(format!(
                    "record {oname} {:?} does not fit {name} {:?}",
                    theirs.dims(),
                    mine.dims()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }

    /// Euclidean distance between two parameter sets of the same layout.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn bits_equal(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((n, a), (m, b))| {
                n == m
                    && a.dims() == b.dims()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Graph handles of a bound [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }
}
