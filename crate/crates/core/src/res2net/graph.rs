use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nnops::{ConvGeometry, Mode, DEFAULT_EPSILON};
use crate::res2net::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// A forward pass in progress: the tape plus lazily registered parameters.
///
/// Parameters are copied onto the tape the first time a layer asks for
/// them, so gradients exist exactly for the tensors the pass touched.
pub struct Graph<'a, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    bn_epsilon: f64,
    bn_outputs: Vec<(String, Var)>,
    activations: IndexMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            mode,
            bn_epsilon: DEFAULT_EPSILON,
            bn_outputs: Vec::new(),
            activations: IndexMap::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn from_tape(tape: Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        let mut g = Self::new(store, mode);
        g.tape = tape;
        g
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Uses `v` for parameter `name` instead of reading the store.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn with_bn_epsilon(mut self, eps: f64) -> Self {
        self.bn_epsilon = eps;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters registered so far, by name.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn conv(&mut self, prefix: &str, x: Var, geo: ConvGeometry) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        self.tape.conv2d(x, w, geo)
    }

    /// Batch norm under `prefix.{gamma,beta,running_mean,running_var}`.
    pub fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let y = self
                    .tape
                    .batch_norm_train(x, gamma, beta, self.bn_epsilon)?;
                self.bn_outputs.push((prefix.to_string(), y));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.param(&format!("{prefix}.running_mean"))?;
                let var = self.param(&format!("{prefix}.running_var"))?;
                self.tape
                    .batch_norm_eval(x, gamma, beta, mean, var, self.bn_epsilon)
            }
        }
    }

    /// `{prefix}.conv` followed by `{prefix}.bn`, optionally ReLU.
    pub fn conv_bn(&mut self, prefix: &str, x: Var, geo: ConvGeometry, relu: bool) -> Result<Var> {
        let h = self.conv(&format!("{prefix}.conv"), x, geo)?;
        let h = self.bn(&format!("{prefix}.bn"), h)?;
        Ok(if relu { self.tape.relu(h) } else { h })
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, b)
    }

    /// Train-mode batch norms recorded so far, as `(prefix, output)` pairs.
    pub fn bn_outputs(&self) -> &[(String, Var)] {
        &self.bn_outputs
    }

    pub fn mark(&mut self, name: impl Into<String>, v: Var) {
        self.activations.insert(name.into(), v);
    }

    pub fn activation(&self, name: &str) -> Result<Var> {
        self.activations
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn activations(&self) -> &IndexMap<String, Var> {
        &self.activations
    }
}
