//! Advantage actor-critic learner over trajectory segments.
//!
//! Synchronous rollouts make the behavior policy equal to the target policy,
//! so no off-policy correction is needed: the loss is the n-step-return
//! policy gradient plus a value regression term and an entropy bonus, with
//! gradients clipped by global norm.

use super::reward::discounted_returns;
use super::{ActionIndices, PolicyNetwork};
use crate::env::Observation;
use crate::nn::adam::{clip_global_norm, AdamConfig, ParameterSet};
use crate::nn::layers::ParamVars;
use crate::nn::tape::{Graph, Var};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHyperparams {
    /// Evolvable.
    pub learning_rate: f64,
    /// Evolvable.
    pub entropy_cost: f64,
    pub unroll_length: usize,
    pub value_loss_weight: f64,
    pub grad_clip: f64,
    /// Standardize advantages per batch (mean 0, unit variance). Keeps the
    /// policy-gradient scale independent of the reward scale, which at desk
    /// scale is tiny early in training.
    pub normalize_advantages: bool,
}

impl Default for AgentHyperparams {
    fn default() -> Self {
        AgentHyperparams {
            learning_rate: 1e-4,
            entropy_cost: 0.01,
            unroll_length: 20,
            value_loss_weight: 0.5,
            grad_clip: 1.0,
            normalize_advantages: true,
        }
    }
}

impl AgentHyperparams {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0)
            || !(self.entropy_cost > 0.0)
            || self.unroll_length == 0
            || !(self.value_loss_weight > 0.0)
            || !(self.grad_clip > 0.0)
        {
            return Err(NnError::Usage("agent hyperparameters must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One step of a segment: the observation the policy saw, the indices it
/// sampled, and the scored reward.
#[derive(Debug, Clone)]
pub struct SegStep {
    pub observation: Observation,
    pub action: ActionIndices,
    pub reward: f64,
    /// Value estimate recorded at rollout time (diagnostics only).
    pub value_rollout: f64,
}

/// A fixed-length slice of one episode plus what the learner needs to
/// bootstrap past its end.
#[derive(Debug, Clone)]
pub struct Segment {
    pub steps: Vec<SegStep>,
    /// Recurrent state at the segment's first step.
    pub initial_state: Vec<f64>,
    /// Value bootstrap beyond the last step; zero when the episode ended.
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LearnerMetrics {
    pub total_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub mean_return: f64,
}

/// Tape nodes produced per unroll step, consumed by the loss builder.
pub struct StepNodes {
    pub log_prob: Var,
    pub neg_entropy: Var,
    pub value: Var,
}

/// Assembles the actor-critic loss from per-step nodes and precomputed
/// returns/advantages. Shared by the painting learner and the bandit tests.
pub fn policy_gradient_loss<S: Scalar>(
    g: &mut Graph<S>,
    steps: &[StepNodes],
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    value_loss_weight: f64,
    entropy_cost: f64,
) -> Result<(Var, Var, Var), NnError> {
    let batch = advantages[0].len();
    let mut policy_terms: Option<Var> = None;
    let mut value_terms: Option<Var> = None;
    let mut entropy_terms: Option<Var> = None;
    for (t, nodes) in steps.iter().enumerate() {
        let adv = Tensor::from_f64_slice(&[batch], &advantages[t]);
        // -log pi * advantage
        let weighted = g.mul_const(nodes.log_prob, adv)?;
        let neg = g.scale(weighted, -1.0)?;
        let p = g.sum_all(neg)?;
        policy_terms = Some(match policy_terms {
            None => p,
            Some(acc) => g.add(acc, p)?,
        });

        // (V - G)^2
        let minus_g = Tensor::from_f64_slice(&[batch], &returns[t].iter().map(|v| -v).collect::<Vec<_>>());
        let diff = g.add_const(nodes.value, minus_g)?;
        let sq = g.square(diff)?;
        let v = g.sum_all(sq)?;
        value_terms = Some(match value_terms {
            None => v,
            Some(acc) => g.add(acc, v)?,
        });

        let e = g.sum_all(nodes.neg_entropy)?;
        entropy_terms = Some(match entropy_terms {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
    }
    let n = (steps.len() * batch) as f64;
    let policy_loss = g.scale(policy_terms.expect("at least one step"), 1.0 / n)?;
    let value_loss = g.scale(value_terms.expect("at least one step"), value_loss_weight / n)?;
    let entropy_loss = g.scale(entropy_terms.expect("at least one step"), entropy_cost / n)?;
    Ok((policy_loss, value_loss, entropy_loss))
}

/// One Adam step on a batch of equal-length segments.
pub fn learner_step<S: Scalar>(
    policy: &PolicyNetwork,
    params: &mut ParameterSet<S>,
    segments: &[Segment],
    hyper: &AgentHyperparams,
    gamma: f64,
) -> Result<LearnerMetrics, NnError> {
    hyper.validate()?;
    if segments.is_empty() {
        return Err(NnError::Usage("learner_step needs at least one segment".into()));
    }
    let unroll = segments[0].steps.len();
    if unroll == 0 || segments.iter().any(|s| s.steps.len() != unroll) {
        return Err(NnError::Usage("segments must share one non-zero unroll length".into()));
    }
    let batch = segments.len();

    // Returns and advantages in f64, off the tape.
    let mut returns = vec![vec![0.0; batch]; unroll];
    let mut advantages = vec![vec![0.0; batch]; unroll];
    let mut mean_return = 0.0;
    for (b, seg) in segments.iter().enumerate() {
        let rewards: Vec<f64> = seg.steps.iter().map(|s| s.reward).collect();
        let g_t = discounted_returns(&rewards, gamma, seg.bootstrap_value);
        mean_return += g_t[0];
        for t in 0..unroll {
            returns[t][b] = g_t[t];
            advantages[t][b] = g_t[t] - seg.steps[t].value_rollout;
        }
    }
    mean_return /= batch as f64;
    if hyper.normalize_advantages {
        let n = (batch * unroll) as f64;
        let mean: f64 = advantages.iter().flatten().sum::<f64>() / n;
        let var: f64 = advantages.iter().flatten().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-8 {
            for row in advantages.iter_mut() {
                for a in row.iter_mut() {
                    *a = (*a - mean) / std;
                }
            }
        }
    }

    // Teacher-forced unroll on the tape.
    let mut g: Graph<S> = Graph::new();
    let mut vars = ParamVars::new();
    let init: Vec<S> = segments
        .iter()
        .flat_map(|s| s.initial_state.iter().map(|&v| S::from_f64(v)))
        .collect();
    let mut state = g.constant(Tensor::from_vec(&[batch, policy.cfg.feat_dim], init))?;
    let mut step_nodes = Vec::with_capacity(unroll);
    for t in 0..unroll {
        let obs: Vec<&Observation> = segments.iter().map(|s| &s.steps[t].observation).collect();
        let actions: Vec<ActionIndices> = segments.iter().map(|s| s.steps[t].action.clone()).collect();
        let pass = policy.recompute(&mut g, params, &mut vars, &obs, state, &actions)?;
        state = pass.state;
        step_nodes.push(StepNodes {
            log_prob: pass.log_prob,
            neg_entropy: pass.neg_entropy,
            value: pass.value,
        });
    }

    let (policy_loss, value_loss, entropy_loss) = policy_gradient_loss(
        &mut g,
        &step_nodes,
        &advantages,
        &returns,
        hyper.value_loss_weight,
        hyper.entropy_cost,
    )?;
    let pv = g.add(policy_loss, value_loss)?;
    let loss = g.add(pv, entropy_loss)?;

    g.backward(loss).map_err(|e| match e {
        NnError::NonFinite(what) => NnError::NonFinite(format!(
            "{what} (learner step: batch {batch}, unroll {unroll}, mean return {mean_return:.4}, \
             reward range [{:.4}, {:.4}])",
            segments
                .iter()
                .flat_map(|s| s.steps.iter().map(|st| st.reward))
                .fold(f64::INFINITY, f64::min),
            segments
                .iter()
                .flat_map(|s| s.steps.iter().map(|st| st.reward))
                .fold(f64::NEG_INFINITY, f64::max),
        )),
        other => other,
    })?;
    let mut grads = vars.grads(&g);
    let grad_norm = clip_global_norm(&mut grads, hyper.grad_clip);
    params.adam_step(&grads, &hyper.adam())?;

    let entropy = -g.value(step_nodes[0].neg_entropy).to_f64_vec().iter().sum::<f64>()
        / batch as f64;
    Ok(LearnerMetrics {
        total_loss: g.value(loss).item().to_f64(),
        policy_loss: g.value(policy_loss).item().to_f64(),
        value_loss: g.value(value_loss).item().to_f64(),
        entropy,
        grad_norm,
        mean_return,
    })
}
