//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::{cast, Float, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Names are unique; insertion order is
/// the serialization and optimizer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name {}", name)));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Replaces the tensor named `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| contract(format!("unknown parameter {}", name)))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(crate::error::shape_err(
                "set parameter",
                self.tensors[id.0].shape(),
                tensor.shape(),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Creates one graph leaf per parameter.
    pub fn bind(&self, graph: &Graph<T>, requires_grad: bool) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Parameters bound as leaves of one graph, indexed by [`ParamId`].
pub struct Bound<T: Float> {
    vars: Vec<Var<T>>,
}

impl<T: Float> Bound<T> {
    /// Wraps existing graph variables, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Float> std::ops::Index<ParamId> for Bound<T> {
    type Output = Var<T>;
    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Seeded initializer that registers parameters under a name prefix.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let saved = self.prefix.clone();
        self.prefix = format!("{}{}.", saved, name);
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, tensor)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                cast(if bound > 0.0 {
                    self.rng.gen_range(-bound..bound)
                } else {
                    0.0
                })
            })
            .collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape.to_vec(), cast(value)))
    }

    /// Uniform weight in ±1/sqrt(fan_in).
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Dense layer `x W + b`, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        init.scope(name, |init| {
            let w = init.fan_in("w", &[din, dout], din)?;
            let b = if bias {
                Some(init.fan_in("b", &[dout], din)?)
            } else {
                None
            };
            Ok(Linear { w, b, din, dout })
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.linear(&p[self.w], self.b.map(|b| &p[b]))
    }

    /// Applies the layer to `rows` contiguous input rows.
    pub fn rows<T: Float>(&self, p: &ParamStore<T>, x: &[T], out: &mut [T]) {
        let rows = x.len() / self.din;
        crate::tensor::rows_matmul(
            x,
            rows,
            crate::tensor::MatRef::new(p.get(self.w).data(), self.din, self.dout),
            self.b.map(|b| p.get(b).data()),
            out,
        );
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(LayerNorm {
                gamma: init.constant("gamma", &[dim], 1.0)?,
                beta: init.constant("beta", &[dim], 0.0)?,
                dim,
            })
        })
    }

    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&p[self.gamma], &p[self.beta], cast(LN_EPS))
    }

    /// In-place normalization of contiguous rows; same arithmetic as the
    /// graph op.
    pub fn rows<T: Float>(&self, p: &ParamStore<T>, x: &mut [T]) {
        let (g, b) = (p.get(self.gamma).data(), p.get(self.beta).data());
        crate::autodiff::layer_norm_rows(x, g, b, cast(LN_EPS));
    }
}
