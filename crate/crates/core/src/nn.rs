//! Named parameter storage and the small layer helpers shared by the
//! denoiser, the transformer and the discriminator.

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result, Rng};
use indexmap::IndexMap;
use std::collections::HashMap;

/// Ordered map from parameter name to value. Order is insertion order and
/// is what checkpoints and optimiser moments line up with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalar count over names starting with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Places every parameter on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            let v = if trainable {
                g.param(value.clone())?
            } else {
                g.constant(value.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Gradients of a bound store in store order; parameters the loss did
    /// not reach get zeros.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|(name, value)| {
                let v = bound.get(name)?;
                Ok(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(value.shape())))
            })
            .collect()
    }
}

/// Parameter handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Builds a binding from explicit `(name, var)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

/// Fan-in scaled Gaussian init.
pub fn init_weight(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in.max(1) as Real).sqrt(), rng)
}

/// Registers `{name}.w [in, out]` and `{name}.b [out]`.
pub fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut Rng) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        init_weight(&[fan_in, fan_out], fan_in, rng)
    };
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// Registers `{name}.g` (ones) and `{name}.b` (zeros).
pub fn add_layer_norm(store: &mut ParamStore, name: &str, width: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::ones(&[width]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[width]))
}

pub const LN_EPS: Real = 1e-5;

pub fn layer_norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{name}.g"))?;
    let bias = p.get(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Registers a 2-D conv `{name}.w [out, in, k, k]` and `{name}.b [out]`.
pub fn add_conv2d(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, zero: bool, rng: &mut Rng) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        init_weight(&[cout, cin, k, k], cin * k * k, rng)
    };
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

pub fn conv2d(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}
