//! Layer definitions: initialization into a [`ParameterSet`] and forward
//! builders onto a [`Graph`].
//!
//! Layers are descriptions, not containers — weights live in the parameter
//! set under `<layer>.w` / `<layer>.b` names. [`ParamVars`] binds each named
//! parameter into a graph exactly once per forward pass, so recurrent unrolls
//! accumulate their gradients into a single leaf.

use super::adam::ParameterSet;
use super::spectral::as_matrix_dims;
use super::tape::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::NnError;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// Standard normal via Box-Muller, kept local for cross-version stability.
pub fn sample_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(sample_normal(rng) * std))
        .collect();
    Tensor::from_vec(shape, data)
}

fn unit_vector<S: Scalar>(n: usize, rng: &mut ChaCha12Rng) -> Vec<S> {
    let mut v: Vec<f64> = (0..n).map(|_| sample_normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v.into_iter().map(S::from_f64).collect()
}

/// Per-graph cache of bound parameter leaves (and their spectrally
/// normalized views), so each parameter appears on the tape exactly once.
#[derive(Default)]
pub struct ParamVars {
    leaves: BTreeMap<String, Var>,
    effective: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds the raw parameter value as a leaf (cached).
    pub fn leaf<S: Scalar>(
        &mut self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        name: &str,
    ) -> Result<Var, NnError> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = g.leaf(ps.get(name).clone())?;
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds the parameter and, when it carries spectral state, divides by
    /// the current power-iteration estimate of its top singular value.
    /// The persisted `u` is not advanced here; call
    /// [`advance_spectral_state`] once per training step for that.
    pub fn effective<S: Scalar>(
        &mut self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        name: &str,
    ) -> Result<Var, NnError> {
        if let Some(&v) = self.effective.get(name) {
            return Ok(v);
        }
        let leaf = self.leaf(g, ps, name)?;
        let entry = ps.entry(name);
        let out = match &entry.spectral {
            None => leaf,
            Some(state) => {
                let shape = entry.value.shape().to_vec();
                let (rows, cols) = as_matrix_dims(&shape);
                let u = state.u.clone();
                let v = right_vector(&entry.value, &u, rows, cols);
                let sigma = sigma_estimate(&entry.value, &u, &v, rows, cols);
                if sigma < 1e-12 {
                    // Degenerate (zero) weight: used unnormalized.
                    leaf
                } else {
                    let mat = g.reshape(leaf, &[rows, cols])?;
                    let sn = g.spectral_norm(mat, u, v)?;
                    g.reshape(sn, &shape)?
                }
            }
        };
        self.effective.insert(name.to_string(), out);
        Ok(out)
    }

    /// Collects leaf gradients by parameter name after a backward pass.
    pub fn grads<S: Scalar>(&self, g: &Graph<S>) -> BTreeMap<String, Tensor<S>> {
        self.leaves.iter().map(|(name, &v)| (name.clone(), g.grad(v))).collect()
    }

    /// Pre-seeds the cache with an existing leaf, so tests can route layer
    /// forwards through externally created vars.
    pub fn insert_leaf_for_test(&mut self, name: &str, var: Var) {
        self.leaves.insert(name.to_string(), var);
    }
}

/// v = normalize(W^T u) for the current u estimate.
fn right_vector<S: Scalar>(w: &Tensor<S>, u: &[S], rows: usize, cols: usize) -> Vec<S> {
    let wd = w.data();
    let mut v = vec![S::ZERO; cols];
    for r in 0..rows {
        let ur = u[r];
        if ur == S::ZERO {
            continue;
        }
        for c in 0..cols {
            v[c] += ur * wd[r * cols + c];
        }
    }
    let norm = v.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
    if norm > 0.0 {
        let inv = S::from_f64(1.0 / norm);
        for x in &mut v {
            *x = *x * inv;
        }
    }
    v
}

fn sigma_estimate<S: Scalar>(w: &Tensor<S>, u: &[S], v: &[S], rows: usize, cols: usize) -> f64 {
    let wd = w.data();
    let mut sigma = 0.0;
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += wd[r * cols + c].to_f64() * v[c].to_f64();
        }
        sigma += u[r].to_f64() * acc;
    }
    sigma
}

/// Runs `iters` persisted power-iteration rounds on every spectral parameter.
/// One call per training step is the deployed mode.
pub fn advance_spectral_state<S: Scalar>(ps: &mut ParameterSet<S>, iters: usize) {
    let names: Vec<String> =
        ps.iter().filter(|(_, e)| e.spectral.is_some()).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let entry = ps.entry_mut(&name);
        let w = entry.value.clone();
        if let Some(state) = entry.spectral.as_mut() {
            let _ = super::spectral::spectral_normalize(&w, state, iters);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub spectral: bool,
}

impl Dense {
    pub fn new(name: &str, input: usize, output: usize) -> Self {
        Dense { name: name.to_string(), input, output, spectral: false }
    }

    pub fn spectral(name: &str, input: usize, output: usize) -> Self {
        Dense { name: name.to_string(), input, output, spectral: true }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterSet<S>, rng: &mut ChaCha12Rng) {
        ps.insert(&self.w(), he_normal(&[self.output, self.input], self.input, rng));
        ps.insert(&self.b(), Tensor::zeros(&[self.output]));
        if self.spectral {
            let u = unit_vector(self.output, rng);
            ps.enable_spectral(&self.w(), u);
        }
    }

    /// y[n, out] = x[n, in] W^T + b
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        x: Var,
    ) -> Result<Var, NnError> {
        let w = vars.effective(g, ps, &self.w())?;
        let b = vars.leaf(g, ps, &self.b())?;
        let y = g.matmul_nt(x, w)?;
        g.add_bias_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub spectral: bool,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.to_string(), in_ch, out_ch, k, stride, pad, spectral: false }
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterSet<S>, rng: &mut ChaCha12Rng) {
        let fan_in = self.in_ch * self.k * self.k;
        ps.insert(&self.w(), he_normal(&[self.out_ch, self.in_ch, self.k, self.k], fan_in, rng));
        ps.insert(&self.b(), Tensor::zeros(&[self.out_ch]));
        if self.spectral {
            let u = unit_vector(self.out_ch, rng);
            ps.enable_spectral(&self.w(), u);
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        x: Var,
    ) -> Result<Var, NnError> {
        let w = vars.effective(g, ps, &self.w())?;
        let b = vars.leaf(g, ps, &self.b())?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_bias_chan(y, b)
    }
}

/// Gated recurrent cell: h' = h + z * (n - h), the update-gate convention.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        GruCell { name: name.to_string(), input, hidden }
    }

    fn p(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterSet<S>, rng: &mut ChaCha12Rng) {
        for gate in ["z", "r", "n"] {
            ps.insert(&self.p(&format!("wx{gate}")), he_normal(&[self.hidden, self.input], self.input, rng));
            ps.insert(&self.p(&format!("wh{gate}")), he_normal(&[self.hidden, self.hidden], self.hidden, rng));
            ps.insert(&self.p(&format!("b{gate}")), Tensor::zeros(&[self.hidden]));
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        x: Var,
        h: Var,
    ) -> Result<Var, NnError> {
        let gate = |g: &mut Graph<S>, vars: &mut ParamVars, xin: Var, hin: Var, n: &str| -> Result<Var, NnError> {
            let wx = vars.effective(g, ps, &self.p(&format!("wx{n}")))?;
            let wh = vars.effective(g, ps, &self.p(&format!("wh{n}")))?;
            let b = vars.leaf(g, ps, &self.p(&format!("b{n}")))?;
            let a = g.matmul_nt(xin, wx)?;
            let c = g.matmul_nt(hin, wh)?;
            let s = g.add(a, c)?;
            g.add_bias_row(s, b)
        };
        let z_pre = gate(g, vars, x, h, "z")?;
        let z = g.sigmoid(z_pre)?;
        let r_pre = gate(g, vars, x, h, "r")?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h)?;
        let n_pre = gate(g, vars, x, rh, "n")?;
        let n = g.tanh(n_pre)?;
        let delta = g.sub(n, h)?;
        let zd = g.mul(z, delta)?;
        g.add(h, zd)
    }
}
