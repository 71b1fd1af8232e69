//! Spectral normalization by power iteration.
//!
//! Each normalized layer keeps a persistent estimate `u` of the top left
//! singular vector of its weight matrix (conv weights are viewed as
//! `out_channels x everything_else`). The deployed mode runs one iteration
//! per discriminator training step; tests may run arbitrarily many.

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<S: Scalar> {
    /// Left singular vector estimate, unit norm.
    pub u: Vec<S>,
    /// Set when a zero weight matrix forced the normalization to bail out.
    pub warned_zero: bool,
}

impl<S: Scalar> SpectralState<S> {
    pub fn new(init_u: Vec<S>) -> Self {
        let mut s = SpectralState { u: init_u, warned_zero: false };
        normalize(&mut s.u);
        s
    }
}

fn normalize<S: Scalar>(v: &mut [S]) {
    let mut sq = S::ZERO;
    for &x in v.iter() {
        sq += x * x;
    }
    let n = sq.sqrt();
    if n.to_f64() > 0.0 {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

/// Views a parameter tensor as the 2-D matrix spectral normalization acts on:
/// `[dim0, product_of_rest]`.
pub fn as_matrix_dims(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty());
    (shape[0], shape[1..].iter().product::<usize>().max(1))
}

/// Result of one normalization call.
pub struct SnResult<S: Scalar> {
    pub normalized: Tensor<S>,
    /// Estimated top singular value u^T W v.
    pub sigma: f64,
    /// Right singular vector estimate matching the final `u`.
    pub v: Vec<S>,
    /// True when the weight was all zeros and returned unchanged.
    pub degenerate: bool,
}

/// Runs `iters` power-iteration rounds updating `state.u` in place, then
/// returns `W / sigma_hat`. A zero weight matrix is returned unchanged with
/// `degenerate = true` and the warning recorded on the state.
pub fn spectral_normalize<S: Scalar>(
    weight: &Tensor<S>,
    state: &mut SpectralState<S>,
    iters: usize,
) -> SnResult<S> {
    let (rows, cols) = as_matrix_dims(weight.shape());
    assert_eq!(state.u.len(), rows, "spectral state size mismatch");
    let w = weight.data();

    let mut v = vec![S::ZERO; cols];
    for _ in 0..iters.max(1) {
        // v = normalize(W^T u)
        for x in v.iter_mut() {
            *x = S::ZERO;
        }
        for r in 0..rows {
            let ur = state.u[r];
            if ur == S::ZERO {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                v[c] += ur * row[c];
            }
        }
        normalize(&mut v);
        // u = normalize(W v)
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = S::ZERO;
            for c in 0..cols {
                acc += row[c] * v[c];
            }
            state.u[r] = acc;
        }
        normalize(&mut state.u);
    }

    // sigma = u^T W v
    let mut sigma = S::ZERO;
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = S::ZERO;
        for c in 0..cols {
            acc += row[c] * v[c];
        }
        sigma += state.u[r] * acc;
    }

    if sigma.to_f64() < 1e-12 {
        state.warned_zero = true;
        return SnResult { normalized: weight.clone(), sigma: sigma.to_f64(), v, degenerate: true };
    }
    let inv = S::ONE / sigma;
    SnResult { normalized: weight.map(|x| x * inv), sigma: sigma.to_f64(), v, degenerate: false }
}
