//! Named parameter storage with per-weight Adam state and per-layer spectral
//! normalization state, plus the bias-corrected Adam update.

use super::spectral::SpectralState;
use super::tensor::{Scalar, Tensor};
use super::NnError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Discriminator defaults: lr 1e-4, beta1 0.5, beta2 0.999.
    pub fn disc_default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { learning_rate: lr, ..AdamConfig::disc_default() }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) {
            return Err(NnError::Usage(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NnError::Usage(format!("betas must be in [0,1): {} / {}", self.beta1, self.beta2)));
        }
        if self.epsilon < 0.0 {
            return Err(NnError::Usage("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub value: Tensor<S>,
    pub adam_m: Tensor<S>,
    pub adam_v: Tensor<S>,
    /// Present on spectrally normalized layers.
    pub spectral: Option<SpectralState<S>>,
}

/// All learnable weights of one network, keyed by name. Iteration order is
/// the BTreeMap's lexicographic order, which keeps every whole-set operation
/// (updates, checkpoints, checksums) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
    step: u64,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet { entries: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                adam_m: Tensor::zeros(&shape),
                adam_v: Tensor::zeros(&shape),
                spectral: None,
            },
        );
    }

    /// Marks a parameter as spectrally normalized, initializing its
    /// persistent left-singular-vector estimate.
    pub fn enable_spectral(&mut self, name: &str, init_u: Vec<S>) {
        let e = self.entries.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
        e.spectral = Some(SpectralState::new(init_u));
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.entries.get(name).unwrap_or_else(|| panic!("no parameter {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}")).value
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<S> {
        self.entries.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn entry_mut(&mut self, name: &str) -> &mut ParamEntry<S> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// FNV-1a checksum over exact value bits, Adam state, and step counter.
    /// Used by population training to verify bit-exact weight copies.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        eat(&self.step.to_le_bytes());
        for (name, e) in &self.entries {
            eat(name.as_bytes());
            for t in [&e.value, &e.adam_m, &e.adam_v] {
                for v in t.data() {
                    eat(&v.to_f64().to_bits().to_le_bytes());
                }
            }
            if let Some(sn) = &e.spectral {
                for v in &sn.u {
                    eat(&v.to_f64().to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    /// One bias-corrected Adam step over the named gradients. Parameters
    /// without a gradient entry are left untouched (zero gradient).
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<S>>, cfg: &AdamConfig) -> Result<(), NnError> {
        cfg.validate()?;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(NnError::NonFinite(format!("gradient for {name}")));
            }
            if !self.entries.contains_key(name) {
                return Err(NnError::Usage(format!("gradient for unknown parameter {name}")));
            }
        }
        self.step += 1;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one = S::ONE;
        let bc1 = S::from_f64(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - cfg.beta2.powi(self.step as i32));
        let lr = S::from_f64(cfg.learning_rate);
        let eps = S::from_f64(cfg.epsilon);
        for (name, g) in grads {
            let e = self.entries.get_mut(name).expect("validated above");
            let (m, v, p) = (e.adam_m.data_mut(), e.adam_v.data_mut(), e.value.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Converts the whole set (values, optimizer moments, spectral state)
    /// between scalar types.
    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        out.step = self.step;
        for (name, e) in &self.entries {
            out.entries.insert(
                name.clone(),
                ParamEntry {
                    value: e.value.cast(),
                    adam_m: e.adam_m.cast(),
                    adam_v: e.adam_v.cast(),
                    spectral: e.spectral.as_ref().map(|s| SpectralState {
                        u: s.u.iter().map(|v| T::from_f64(v.to_f64())).collect(),
                        warned_zero: s.warned_zero,
                    }),
                },
            );
        }
        out
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for v in g.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ReferenceAdam;

    #[test]
    fn first_step_moves_by_lr_in_eps_zero_limit() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.37));
        let cfg = AdamConfig { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 0.0 };
        ps.adam_step(&grads, &cfg).unwrap();
        // Bias-corrected first step: m_hat = g, v_hat = g^2 -> step = lr * sign(g).
        assert!((ps.get("w").item() - (1.0 - 0.01)).abs() < 1e-15);

        let mut neg = BTreeMap::new();
        neg.insert("w".to_string(), Tensor::scalar(-2.0));
        let mut ps2: ParameterSet<f64> = ParameterSet::new();
        ps2.insert("w", Tensor::scalar(1.0));
        ps2.adam_step(&neg, &cfg).unwrap();
        assert!((ps2.get("w").item() - (1.0 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let cfg = AdamConfig::disc_default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[3]));
        for _ in 0..5 {
            ps.adam_step(&grads, &cfg).unwrap();
        }
        assert_eq!(ps.get("w").data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn matches_reference_adam_on_quadratic_bowl() {
        // Minimize 0.5 * sum(w^2); gradient is w itself.
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![1.5, -0.75]));
        let mut reference = ReferenceAdam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut ref_w = vec![1.5, -0.75];
        for _ in 0..3 {
            let g = ps.get("w").data().to_vec();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(&[2], g));
            ps.adam_step(&grads, &cfg).unwrap();

            let ref_g = ref_w.clone();
            reference.step(&mut ref_w, &ref_g);
        }
        for (a, b) in ps.get("w").data().iter().zip(ref_w.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn nan_gradient_is_a_hard_error() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        assert!(matches!(
            ps.adam_step(&grads, &AdamConfig::disc_default()),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        grads.insert("a".into(), Tensor::from_vec(&[2], vec![3.0, 0.0]));
        grads.insert("b".into(), Tensor::from_vec(&[1], vec![4.0]));
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }
}
