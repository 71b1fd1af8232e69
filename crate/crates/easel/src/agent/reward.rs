//! Reward assembly from discriminator scores and environment penalties.
//!
//! Temporal credit assignment scores every intermediate canvas and pays the
//! agent the one-step score improvement `r_t = D_t - D_{t-1}` (no discount on
//! the first term). With discount 1 the improvements telescope, so the
//! undiscounted return is exactly the final score minus the blank-canvas
//! score; discounts below 1 bias the agent toward painting early.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("reward contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// The original sparse objective: the discriminator score arrives only
    /// on the final step. Requires gamma = 1.
    FinalStepOnly,
    /// Per-step score differences over intermediate canvases.
    Tca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSource {
    /// Raw discriminator logit (unbounded, smooth differences).
    DiscriminatorLogit,
    /// Negative mean-squared pixel distance to the target (the supervised
    /// ablation; no discriminator involved).
    NegativeL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub gamma: f64,
    pub source: RewardSource,
    /// Add environment penalties to the per-step rewards.
    pub include_penalties: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mode: RewardMode::Tca,
            gamma: 0.9,
            source: RewardSource::DiscriminatorLogit,
            include_penalties: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RewardError::Contract(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if self.mode == RewardMode::FinalStepOnly && self.gamma != 1.0 {
            return Err(RewardError::Contract(
                "final-step-only rewards require gamma = 1 to match the original objective".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step rewards for one episode.
///
/// In TCA mode `scores` holds T+1 entries (blank canvas through final
/// canvas); in final-step-only mode it holds exactly one entry (the final
/// canvas score).
pub fn compute_rewards(
    penalties: &[f64],
    scores: &[f64],
    cfg: &RewardConfig,
) -> Result<Vec<f64>, RewardError> {
    cfg.validate()?;
    let t = penalties.len();
    let mut rewards = vec![0.0; t];
    match cfg.mode {
        RewardMode::Tca => {
            if scores.len() != t + 1 {
                return Err(RewardError::Contract(format!(
                    "tca mode needs {} scores (T+1), got {}",
                    t + 1,
                    scores.len()
                )));
            }
            for i in 0..t {
                rewards[i] = scores[i + 1] - scores[i];
            }
        }
        RewardMode::FinalStepOnly => {
            if scores.len() != 1 {
                return Err(RewardError::Contract(format!(
                    "final-step-only mode needs exactly 1 score, got {}",
                    scores.len()
                )));
            }
            if t > 0 {
                rewards[t - 1] = scores[0];
            }
        }
    }
    if cfg.include_penalties {
        for (r, p) in rewards.iter_mut().zip(penalties.iter()) {
            *r += p;
        }
    }
    Ok(rewards)
}

/// Discounted returns `G_t = r_t + gamma * G_{t+1}` with a bootstrap value
/// standing in for everything beyond the horizon.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn no_penalty_cfg() -> RewardConfig {
        RewardConfig { include_penalties: false, ..RewardConfig::default() }
    }

    #[test]
    fn telescoping_identity_holds_exactly() {
        let mut rng = crate::util::rng_for(13, &[1]);
        for _ in 0..200 {
            let t = rng.random_range(1..40);
            let scores: Vec<f64> = (0..=t).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let penalties = vec![0.0; t];
            let rewards = compute_rewards(&penalties, &scores, &no_penalty_cfg()).unwrap();
            let total: f64 = rewards.iter().sum();
            let expect = scores[t] - scores[0];
            assert!((total - expect).abs() <= 1e-12, "{total} vs {expect}");
        }
    }

    #[test]
    fn constant_scores_give_zero_rewards() {
        let scores = vec![1.234; 7];
        let rewards = compute_rewards(&vec![0.0; 6], &scores, &no_penalty_cfg()).unwrap();
        assert!(rewards.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn six_step_sequence_matches_hand_computed_differences() {
        let scores = [0.5, -0.25, 0.75, 0.1, 0.1, -1.0, 2.0];
        let rewards = compute_rewards(&vec![0.0; 6], &scores, &no_penalty_cfg()).unwrap();
        let expect = [-0.75, 1.0, -0.65, 0.0, -1.1, 3.0];
        for (a, b) in rewards.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Discounted returns against the reference recursion.
        let gamma = 0.9;
        let mine = discounted_returns(&rewards, gamma, 0.0);
        let oracle = crate::oracle::reference_returns(&rewards, gamma, 0.0);
        for (a, b) in mine.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn final_step_mode_pays_once() {
        let cfg = RewardConfig {
            mode: RewardMode::FinalStepOnly,
            gamma: 1.0,
            include_penalties: true,
            source: RewardSource::DiscriminatorLogit,
        };
        let penalties = [-0.1, -0.2, -0.3];
        let rewards = compute_rewards(&penalties, &[5.0], &cfg).unwrap();
        assert_eq!(rewards, vec![-0.1, -0.2, 5.0 - 0.3]);
    }

    #[test]
    fn contract_violations_are_errors() {
        // Wrong score count.
        assert!(compute_rewards(&[0.0; 3], &[1.0, 2.0], &no_penalty_cfg()).is_err());
        // final-step-only with gamma < 1.
        let bad = RewardConfig {
            mode: RewardMode::FinalStepOnly,
            gamma: 0.9,
            source: RewardSource::DiscriminatorLogit,
            include_penalties: false,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn penalties_add_in() {
        let cfg = RewardConfig::default();
        let penalties = [-0.5, -0.25];
        let scores = [0.0, 1.0, 3.0];
        let rewards = compute_rewards(&penalties, &scores, &cfg).unwrap();
        assert_eq!(rewards, vec![0.5, 1.75]);
    }
}
