//! Population-based training of the generators.
//!
//! N policies share one discriminator. Each member tracks an exponentially
//! smoothed fitness (mean final-step discriminator reward). Periodically the
//! bottom truncation fraction copies weights and optimizer state bit-exactly
//! from a uniformly chosen top member and multiplicatively perturbs its
//! learning rate and entropy cost, clamped to global ranges. No explicit
//! diversity mechanism.

use crate::agent::{AgentHyperparams, PolicyNetwork};
use crate::nn::tensor::Scalar;
use crate::nn::ParameterSet;
use crate::util::{rng_for, stream};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtConfig {
    pub population_size: usize,
    /// Learner steps between evolution barriers.
    pub evolution_period: u64,
    /// Fraction replaced (and the size of the donor pool), in (0, 0.5].
    pub truncation_fraction: f64,
    pub perturb_up: f64,
    pub perturb_down: f64,
    /// Log-uniform initial sampling ranges.
    pub lr_init: (f64, f64),
    pub entropy_init: (f64, f64),
    /// Hard clamps applied after every perturbation.
    pub lr_clamp: (f64, f64),
    pub entropy_clamp: (f64, f64),
    /// Fitness EMA decay.
    pub fitness_decay: f64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        PbtConfig {
            population_size: 10,
            evolution_period: 2000,
            truncation_fraction: 0.2,
            perturb_up: 1.2,
            perturb_down: 0.8,
            lr_init: (1e-5, 3e-4),
            entropy_init: (2e-3, 1e-1),
            lr_clamp: (1e-6, 1e-2),
            entropy_clamp: (1e-4, 1.0),
            fitness_decay: 0.99,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.population_size == 0 {
            return Err("population_size must be >= 1".into());
        }
        if !(self.truncation_fraction > 0.0 && self.truncation_fraction <= 0.5) {
            return Err(format!(
                "truncation_fraction must be in (0, 0.5], got {}",
                self.truncation_fraction
            ));
        }
        for (lo, hi) in [self.lr_init, self.entropy_init, self.lr_clamp, self.entropy_clamp] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(format!("invalid range ({lo}, {hi})"));
            }
        }
        if !(0.0..1.0).contains(&self.fitness_decay) {
            return Err("fitness_decay must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Members replaced per evolution: ceil(fraction * N), but never half or
    /// more of the population.
    pub fn replaced_count(&self, n: usize) -> usize {
        if n < 2 {
            return 0;
        }
        ((self.truncation_fraction * n as f64).ceil() as usize).min(n / 2).max(1)
    }
}

/// One generator: policy weights + evolvable hyperparameters + fitness.
#[derive(Debug, Clone)]
pub struct PopulationMember<S: Scalar> {
    pub id: usize,
    pub params: ParameterSet<S>,
    pub hyper: AgentHyperparams,
    /// EMA of the final-step discriminator reward; None until the first
    /// completed episode.
    pub fitness: Option<f64>,
    pub steps_since_evolution: u64,
}

fn log_uniform(range: (f64, f64), rng: &mut ChaCha12Rng) -> f64 {
    let (lo, hi) = range;
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

/// Fresh population: independent weight initializations, hyperparameters
/// sampled log-uniformly within the init ranges.
pub fn init_population<S: Scalar>(
    cfg: &PbtConfig,
    base_hyper: &AgentHyperparams,
    policy: &PolicyNetwork,
    root_seed: u64,
) -> Vec<PopulationMember<S>> {
    (0..cfg.population_size)
        .map(|id| {
            let mut wrng = rng_for(root_seed, &[stream::WEIGHT_INIT, id as u64]);
            let mut hrng = rng_for(root_seed, &[stream::PBT_INIT, id as u64]);
            let hyper = AgentHyperparams {
                learning_rate: log_uniform(cfg.lr_init, &mut hrng),
                entropy_cost: log_uniform(cfg.entropy_init, &mut hrng),
                ..base_hyper.clone()
            };
            PopulationMember {
                id,
                params: policy.init(&mut wrng),
                hyper,
                fitness: None,
                steps_since_evolution: 0,
            }
        })
        .collect()
}

/// Exponential moving average update; the first observation initializes.
pub fn update_fitness<S: Scalar>(member: &mut PopulationMember<S>, reward: f64, decay: f64) {
    member.fitness = Some(match member.fitness {
        None => reward,
        Some(f) => decay * f + (1.0 - decay) * reward,
    });
}

/// One population log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionEvent {
    pub member: usize,
    pub fitness: f64,
    pub learning_rate: f64,
    pub entropy_cost: f64,
    pub copied_from: Option<usize>,
}

/// Truncation selection: the bottom `ceil(f*N)` members copy weights and
/// optimizer state bit-exactly from a uniformly chosen top-`ceil(f*N)`
/// member, then perturb each evolvable hyperparameter by the up/down factor
/// (fair coin), clamped to the global ranges. Ties in fitness are broken by
/// member id (ascending), making the operation deterministic.
pub fn evolve<S: Scalar>(
    population: &mut [PopulationMember<S>],
    cfg: &PbtConfig,
    rng: &mut ChaCha12Rng,
) -> Vec<EvolutionEvent> {
    let n = population.len();
    let count = cfg.replaced_count(n);
    let mut events = Vec::with_capacity(n);
    if count == 0 {
        for m in population.iter() {
            events.push(EvolutionEvent {
                member: m.id,
                fitness: m.fitness.unwrap_or(f64::NAN),
                learning_rate: m.hyper.learning_rate,
                entropy_cost: m.hyper.entropy_cost,
                copied_from: None,
            });
        }
        return events;
    }

    // Rank by (fitness desc, id asc).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = population[a].fitness.expect("evolve requires fitness on every member");
        let fb = population[b].fitness.expect("evolve requires fitness on every member");
        fb.partial_cmp(&fa).unwrap().then(population[a].id.cmp(&population[b].id))
    });
    let top: Vec<usize> = order[..count].to_vec();
    let bottom: Vec<usize> = order[n - count..].to_vec();

    let mut copied_from: Vec<Option<usize>> = vec![None; n];
    for &loser in &bottom {
        let src_idx = top[rng.random_range(0..top.len())];
        let perturb = |v: f64, clamp: (f64, f64), rng: &mut ChaCha12Rng| {
            let factor = if rng.random::<bool>() { cfg.perturb_up } else { cfg.perturb_down };
            (v * factor).clamp(clamp.0, clamp.1)
        };
        let (src, dst) = if src_idx < loser {
            let (a, b) = population.split_at_mut(loser);
            (&a[src_idx], &mut b[0])
        } else {
            let (a, b) = population.split_at_mut(src_idx);
            (&b[0], &mut a[loser])
        };
        dst.params = src.params.clone();
        dst.fitness = src.fitness;
        let mut hyper = src.hyper.clone();
        hyper.learning_rate = perturb(hyper.learning_rate, cfg.lr_clamp, rng);
        hyper.entropy_cost = perturb(hyper.entropy_cost, cfg.entropy_clamp, rng);
        dst.hyper = hyper;
        dst.steps_since_evolution = 0;
        copied_from[loser] = Some(population[src_idx].id);
    }

    for (i, m) in population.iter().enumerate() {
        events.push(EvolutionEvent {
            member: m.id,
            fitness: m.fitness.unwrap_or(f64::NAN),
            learning_rate: m.hyper.learning_rate,
            entropy_cost: m.hyper.entropy_cost,
            copied_from: copied_from[i],
        });
    }
    events
}
