//! Named parameters and the per-step session that binds them onto a tape.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Std of position embeddings.
pub const INIT_STD: f64 = 0.02;

/// Std of linear weights: `1/√fan_in`, so activations keep unit scale at any
/// width (about 0.03 at width 1024, ~0.18 at the toy widths).
pub fn linear_init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Ordered map of named parameters plus the subset excluded from updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Load(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        let names: Vec<String> = self.entries.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        for n in names {
            self.set_frozen(&n, frozen);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Shapes of every entry, for architecture compatibility checks.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn init_linear(&mut self, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let std = linear_init_std(fan_in);
        self.insert(
            format!("{name}.w"),
            Tensor::from_fn(&[fan_in, fan_out], |_| rng.truncated_normal(std)),
        );
        if bias {
            self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::ones(&[dim]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }
}

/// A tape plus lazily bound parameters for one forward (and backward) pass.
pub struct Session<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    dropout_rng: Option<&'a mut Rng>,
}

impl<'a> Session<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    /// Training mode: dropout masks drawn from `rng`.
    pub fn train(params: &'a ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = if self.params.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.param(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, p, rng),
            None => Ok(x),
        }
    }

    /// `x · W + b` with `W: [in, out]` stored as `{name}.w`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{name}.b");
        if self.params.contains(&bias) {
            let b = self.param(&bias)?;
            self.tape.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Runs the reverse pass and returns `(loss, gradient per trainable parameter)`.
    pub fn backward(self, loss: Var) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let value = self.tape.value(loss).item()?;
        let bound = self.bound;
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in bound {
            if let Some(g) = grads.take(var) {
                out.insert(name, g);
            }
        }
        Ok((value, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        store.init_linear(&mut rng, "a", 2, 2, true);
        store.init_linear(&mut rng, "b", 2, 1, false);
        store.set_frozen_prefix("a.", true);
        let mut s = Session::eval(&store);
        let x = s.tape.constant(Tensor::ones(&[3, 2]));
        let h = s.linear(x, "a").unwrap();
        let y = s.linear(h, "b").unwrap();
        let loss = s.tape.sum(y);
        let (_, grads) = s.backward(loss).unwrap();
        assert!(!grads.contains_key("a.w"));
        assert!(!grads.contains_key("a.b"));
        assert!(grads.contains_key("b.w"));
    }

    #[test]
    fn missing_parameter_is_a_load_error() {
        let store = ParamStore::new();
        let mut s = Session::eval(&store);
        assert!(matches!(s.param("nope"), Err(Error::Load(_))));
    }
}
