//! Independent reference implementations used to verify the main code paths.
//!
//! Everything here deliberately takes the slow, brute-force route (dense
//! sampling, Jacobi eigensolves, hand-rolled recursions) so that agreement
//! with the production implementations is meaningful. Production code must
//! not call into this module.

use crate::geom::Point;

/// Distance from `p` to a curve, by dense sampling (capsule membership test:
/// inside the stroke iff this is <= the brush radius).
pub fn capsule_distance(p: Point, curve: &impl Fn(f64) -> Point, samples: usize) -> f64 {
    let mut best = f64::INFINITY;
    let mut prev = curve(0.0);
    best = best.min(p.dist(prev));
    for i in 1..=samples {
        let q = curve(i as f64 / samples as f64);
        // Distance to the segment prev..q.
        let vx = q.x - prev.x;
        let vy = q.y - prev.y;
        let len2 = vx * vx + vy * vy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.x - prev.x) * vx + (p.y - prev.y) * vy) / len2).clamp(0.0, 1.0)
        };
        let proj = Point::new(prev.x + t * vx, prev.y + t * vy);
        best = best.min(p.dist(proj));
        prev = q;
    }
    best
}

/// Top singular value of a row-major matrix via a cyclic Jacobi eigensolve of
/// the smaller Gram matrix. Exact to near machine precision for the small
/// layer matrices we verify.
pub fn top_singular_value(a: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(a.len(), rows * cols);
    // Gram over the smaller side.
    let n = rows.min(cols);
    let mut g = vec![0.0f64; n * n];
    if rows <= cols {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..cols {
                    acc += a[i * cols + k] * a[j * cols + k];
                }
                g[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..rows {
                    acc += a[k * cols + i] * a[k * cols + j];
                }
                g[i * n + j] = acc;
            }
        }
    }
    let lambda_max = jacobi_max_eigenvalue(&mut g, n);
    lambda_max.max(0.0).sqrt()
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_max_eigenvalue(g: &mut [f64], n: usize) -> f64 {
    if n == 1 {
        return g[0];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += g[i * n + j] * g[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(g, n)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = g[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = g[p * n + p];
                let aqq = g[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gkp = g[k * n + p];
                    let gkq = g[k * n + q];
                    g[k * n + p] = c * gkp - s * gkq;
                    g[k * n + q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let gpk = g[p * n + k];
                    let gqk = g[q * n + k];
                    g[p * n + k] = c * gpk - s * gqk;
                    g[q * n + k] = s * gpk + c * gqk;
                }
            }
        }
    }
    (0..n).map(|i| g[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}

fn frobenius(g: &[f64], n: usize) -> f64 {
    g.iter().take(n * n).map(|v| v * v).sum::<f64>().sqrt()
}

/// Hand-rolled Adam used as a cross-check for the production optimizer.
pub struct ReferenceAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ReferenceAdam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        ReferenceAdam { lr, beta1, beta2, eps, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Discounted returns by the textbook backward recursion
/// `G_t = r_t + gamma * G_{t+1}`, with `bootstrap` standing in for the value
/// beyond the last step.
pub fn reference_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Central finite difference of a scalar function at `x` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
