//! The full training loop: a population of policy learners sharing one
//! discriminator, synchronous batched rollouts, reward scoring, periodic
//! evolution, metrics, sample sheets, and exactly resumable checkpoints.
//!
//! Every random draw is derived functionally from the run seed plus
//! structural counters (member id, learner step, episode slot, ...), so a
//! checkpoint needs only parameters and counters to continue bit-identically.

use crate::agent::{
    compute_rewards, learner_step, PolicyConfig, PolicyNetwork, RewardMode, RewardSource, SegStep,
    Segment,
};
use crate::config::RunConfig;
use crate::data::{Cursor, Dataset};
use crate::disc::{
    assemble_input, disc_train_step, stack_inputs, DiscBatch, Discriminator, MaskSpec, PairSlot,
};
use crate::env::{EpisodeTrajectory, Observation, PaintEnv, TrajectoryRecorder};
use crate::nn::checkpoint::{pack_parameter_set, read_container, unpack_parameter_set, write_container};
use crate::nn::tensor::Tensor;
use crate::pbt::{evolve, init_population, update_fitness, PopulationMember};
use crate::png_io;
use crate::render::Canvas;
use crate::util::{git_blob_hash, rng_for, stream};
use std::collections::VecDeque;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("env: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("nn: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("data: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("reward: {0}")]
    Reward(#[from] crate::agent::reward::RewardError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A finished, scored episode ready for segmentation and the fake queue.
pub struct ScoredEpisode {
    pub trajectory: EpisodeTrajectory,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Recurrent state at each unroll boundary.
    pub boundary_states: Vec<Vec<f64>>,
    /// Final-step reward-source score (fitness signal).
    pub final_score: f64,
}

struct FakeSample {
    render: Canvas,
    target: Option<Canvas>,
}

/// Output directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub metrics: PathBuf,
    pub trajectories: PathBuf,
}

impl RunDirs {
    pub fn create(root: &Path) -> std::io::Result<RunDirs> {
        let dirs = RunDirs {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            samples: root.join("samples"),
            metrics: root.join("metrics"),
            trajectories: root.join("trajectories"),
        };
        for d in [&dirs.root, &dirs.checkpoints, &dirs.samples, &dirs.metrics, &dirs.trajectories] {
            std::fs::create_dir_all(d)?;
        }
        Ok(dirs)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub policy: PolicyNetwork,
    pub disc: Discriminator,
    pub disc_params: crate::nn::ParameterSet<f32>,
    pub population: Vec<PopulationMember<f32>>,
    pub dataset: Dataset,
    pub global_step: u64,
    disc_updates: u64,
    real_cursor: Cursor,
    target_cursor: Cursor,
    fake_queues: Vec<VecDeque<FakeSample>>,
    rr_next: usize,
    dirs: RunDirs,
    /// Fake-queue pops since the discriminator's previous update, in order
    /// (member ids); lets tests audit round-robin fairness.
    pub last_disc_sources: Vec<usize>,
}

fn build_policy(cfg: &RunConfig) -> PolicyNetwork {
    let mut pc = PolicyConfig::new(cfg.env.canvas_size, cfg.env.conditional, cfg.action.clone());
    pc.conv_channels = cfg.policy_net.conv_channels;
    pc.feat_dim = cfg.policy_net.feat_dim;
    PolicyNetwork::new(pc)
}

fn build_disc(cfg: &RunConfig) -> Discriminator {
    let spectral = cfg.disc.loss_mode == crate::disc::LossMode::StandardGanSpectralNorm;
    Discriminator::conv_default(cfg.disc.input_channels(), cfg.env.canvas_size, spectral, cfg.disc_net.width)
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset, TrainError> {
    Ok(Dataset::build_with_spec(cfg.dataset.clone(), &cfg.action, &cfg.brush)?)
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let policy = build_policy(&cfg);
        let disc = build_disc(&cfg);
        let dataset = build_dataset(&cfg)?;
        let mut drng = rng_for(cfg.run.seed, &[stream::WEIGHT_INIT, 1_000_003]);
        let disc_params = disc.init(&mut drng);
        let population = init_population(&cfg.pbt, &cfg.agent, &policy, cfg.run.seed);
        let dirs = RunDirs::create(&cfg.run.out_dir)?;
        let trainer = Trainer {
            fake_queues: (0..population.len()).map(|_| VecDeque::new()).collect(),
            policy,
            disc,
            disc_params,
            population,
            dataset,
            global_step: 0,
            disc_updates: 0,
            real_cursor: Cursor::default(),
            target_cursor: Cursor::default(),
            rr_next: 0,
            dirs,
            last_disc_sources: Vec::new(),
            cfg,
        };
        trainer.write_manifest()?;
        Ok(trainer)
    }

    pub fn dirs(&self) -> &RunDirs {
        &self.dirs
    }

    fn write_manifest(&self) -> Result<(), TrainError> {
        let exe_hash = std::env::current_exe()
            .ok()
            .and_then(|p| std::fs::read(p).ok())
            .map(|bytes| git_blob_hash(&bytes))
            .unwrap_or_else(|| "unknown".into());
        let manifest = serde_json::json!({
            "config": &self.cfg,
            "binary_blob_hash": exe_hash,
            "seed": self.cfg.run.seed,
        });
        std::fs::write(self.dirs.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(self.dirs.root.join("config.toml"), self.cfg.to_toml())?;
        Ok(())
    }

    /// Collects one batch of episodes for a member using lockstep batched
    /// policy evaluation; per-episode RNG streams keep results independent
    /// of batch packing.
    pub fn collect_episodes(&self, member: usize) -> Result<Vec<ScoredEpisode>, TrainError> {
        let b = self.cfg.run.episodes_per_step;
        let t = self.cfg.env.episode_len;
        let unroll = self.cfg.agent.unroll_length;
        let params = &self.population[member].params;

        // Conditional targets: uniform picks keyed by (step, member, slot),
        // which keeps target choice independent of any shared cursor state.
        let targets: Vec<Option<Canvas>> = if self.cfg.env.conditional {
            (0..b)
                .map(|slot| {
                    let mut trng = rng_for(
                        self.cfg.run.seed,
                        &[stream::DATA_GEN ^ 0x5a5a, self.global_step, member as u64, slot as u64],
                    );
                    use rand::Rng;
                    let idx = trng.random_range(0..self.dataset.len());
                    Some(self.dataset.get(idx).clone())
                })
                .collect()
        } else {
            vec![None; b]
        };

        let mut recorders: Vec<TrajectoryRecorder> = (0..b)
            .map(|slot| {
                let seed = crate::util::mix_seed(
                    self.cfg.run.seed,
                    &[stream::ROLLOUT, member as u64, self.global_step, slot as u64],
                );
                PaintEnv::reset(
                    self.cfg.env.clone(),
                    self.cfg.action.clone(),
                    self.cfg.brush,
                    targets[slot].clone(),
                    seed,
                )
                .map(TrajectoryRecorder::new)
            })
            .collect::<Result<_, _>>()?;
        let mut rngs: Vec<_> = (0..b)
            .map(|slot| {
                rng_for(self.cfg.run.seed, &[stream::ROLLOUT, member as u64, self.global_step, slot as u64, 1])
            })
            .collect();

        let mut state: Tensor<f32> = self.policy.initial_state(b);
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(t); b];
        let mut boundary_states: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
        for step in 0..t {
            if step % unroll == 0 {
                for (slot, bs) in boundary_states.iter_mut().enumerate() {
                    let row = state.data()[slot * self.policy.cfg.feat_dim..(slot + 1) * self.policy.cfg.feat_dim]
                        .iter()
                        .map(|v| *v as f64)
                        .collect();
                    bs.push(row);
                }
            }
            let obs: Vec<Observation> = recorders.iter().map(|r| r.observation()).collect();
            let refs: Vec<&Observation> = obs.iter().collect();
            let out = self.policy.act_batch(params, &refs, &state, &mut rngs)?;
            for slot in 0..b {
                recorders[slot].step(out.actions[slot].clone(), out.log_probs[slot], out.values[slot])?;
                values[slot].push(out.values[slot]);
            }
            state = out.state;
        }

        // Score and package.
        let mut episodes = Vec::with_capacity(b);
        for (slot, rec) in recorders.into_iter().enumerate() {
            let mut traj = rec.finish();
            let scores = self.score_episode(&traj, member, slot)?;
            let penalties: Vec<f64> = traj.steps.iter().map(|s| s.penalty).collect();
            let rewards = compute_rewards(&penalties, &scores, &self.cfg.reward)?;
            for (st, r) in traj.steps.iter_mut().zip(rewards.iter()) {
                st.reward = *r;
            }
            let final_score = *scores.last().expect("scores non-empty");
            episodes.push(ScoredEpisode {
                trajectory: traj,
                rewards,
                values: values[slot].clone(),
                boundary_states: boundary_states[slot].clone(),
                final_score,
            });
        }
        Ok(episodes)
    }

    /// Reward-source scores for one episode: per-step canvas scores in TCA
    /// mode (blank through final), or the final canvas score only.
    fn score_episode(&self, traj: &EpisodeTrajectory, member: usize, slot: usize) -> Result<Vec<f64>, TrainError> {
        let target = traj.target.as_ref();
        match self.cfg.reward.source {
            RewardSource::NegativeL2 => {
                let t = target.expect("negative-l2 needs a conditional run");
                let per_canvas = |c: &Canvas| -(c.mean_sq_distance(t));
                Ok(match self.cfg.reward.mode {
                    RewardMode::Tca => traj.canvases.iter().map(|c| per_canvas(c)).collect(),
                    RewardMode::FinalStepOnly => vec![per_canvas(traj.final_canvas())],
                })
            }
            RewardSource::DiscriminatorLogit => {
                // One mask axis per episode so per-step differences reflect
                // canvas changes, not mask changes. In complement mode both
                // halves of the axis are scored and averaged: every stroke
                // affects exactly one of the two, so the reward covers the
                // whole canvas instead of half of it.
                let mut mrng = rng_for(
                    self.cfg.run.seed,
                    &[stream::REWARD_MASK, self.global_step, member as u64, slot as u64],
                );
                let mask = MaskSpec::sample(&mut mrng);
                let masks: &[MaskSpec] =
                    if self.cfg.disc.conditional_mode == crate::disc::ConditionalMode::Complement {
                        &[mask, mask.complement()]
                    } else {
                        &[mask]
                    };
                let canvases: Vec<&Canvas> = match self.cfg.reward.mode {
                    RewardMode::Tca => traj.canvases.iter().collect(),
                    RewardMode::FinalStepOnly => vec![traj.final_canvas()],
                };
                let inputs: Vec<Tensor<f32>> = canvases
                    .iter()
                    .flat_map(|c| {
                        masks.iter().map(|m| {
                            assemble_input(self.cfg.disc.conditional_mode, target, c, *m, PairSlot::Fake)
                        })
                    })
                    .collect();
                let raw = self.disc.score_batch(&self.disc_params, stack_inputs(&inputs))?;
                Ok(raw
                    .chunks_exact(masks.len())
                    .map(|chunk| chunk.iter().sum::<f64>() / masks.len() as f64)
                    .collect())
            }
        }
    }

    /// Splits scored episodes into unroll-length segments.
    pub fn build_segments(&self, episodes: &[ScoredEpisode]) -> Vec<Segment> {
        let unroll = self.cfg.agent.unroll_length;
        let t = self.cfg.env.episode_len;
        let mut segments = Vec::new();
        for ep in episodes {
            for (k, chunk_start) in (0..t).step_by(unroll).enumerate() {
                let end = chunk_start + unroll;
                let steps = (chunk_start..end)
                    .map(|i| {
                        let traj_step = &ep.trajectory.steps[i];
                        let observation = Observation {
                            canvas: ep.trajectory.canvases[i].clone(),
                            step_index: i,
                            episode_len: t,
                            last_brush_position: traj_step.obs_last_cell,
                            target: ep.trajectory.target.clone(),
                            pending_points: traj_step.obs_pending.clone(),
                        };
                        SegStep {
                            action: self
                                .policy
                                .action_to_indices(&traj_step.action, traj_step.obs_pending.len()),
                            observation,
                            reward: ep.rewards[i],
                            value_rollout: ep.values[i],
                        }
                    })
                    .collect();
                let bootstrap_value = if end >= t { 0.0 } else { ep.values[end] };
                segments.push(Segment {
                    steps,
                    initial_state: ep.boundary_states[k].clone(),
                    bootstrap_value,
                });
            }
        }
        segments
    }

    /// One full round: every member collects and learns once, then the
    /// shared discriminator takes one update from a round-robin fake batch.
    pub fn step_round(&mut self) -> Result<RoundMetrics, TrainError> {
        let mut member_metrics = Vec::with_capacity(self.population.len());
        for m in 0..self.population.len() {
            let episodes = self.collect_episodes(m)?;
            // Fitness: EMA of the final-step reward-source score.
            let mean_final: f64 =
                episodes.iter().map(|e| e.final_score).sum::<f64>() / episodes.len() as f64;
            let mean_l2 = self.cfg.env.conditional.then(|| {
                episodes
                    .iter()
                    .map(|e| {
                        e.trajectory.final_canvas().mean_sq_distance(e.trajectory.target.as_ref().unwrap())
                    })
                    .sum::<f64>()
                    / episodes.len() as f64
            });
            let decay = self.cfg.pbt.fitness_decay;
            update_fitness(&mut self.population[m], mean_final, decay);

            // Fakes for the shared discriminator: the final canvas, or a
            // uniformly chosen intermediate when configured.
            for (slot, ep) in episodes.iter().enumerate() {
                let canvas = if self.cfg.disc.train_on_intermediate {
                    let mut irng = rng_for(
                        self.cfg.run.seed,
                        &[stream::DISC_MASK ^ 0x77, self.global_step, m as u64, slot as u64],
                    );
                    use rand::Rng;
                    let idx = irng.random_range(1..ep.trajectory.canvases.len());
                    ep.trajectory.canvases[idx].clone()
                } else {
                    ep.trajectory.final_canvas().clone()
                };
                self.fake_queues[m].push_back(FakeSample {
                    render: canvas,
                    target: ep.trajectory.target.clone(),
                });
                // Bound queue memory.
                while self.fake_queues[m].len() > 4 * self.cfg.run.disc_batch {
                    self.fake_queues[m].pop_front();
                }
            }

            let segments = self.build_segments(&episodes);
            let hyper = self.population[m].hyper.clone();
            let gamma = self.cfg.reward.gamma;
            let lm = learner_step(&self.policy, &mut self.population[m].params, &segments, &hyper, gamma)?;
            self.population[m].steps_since_evolution += 1;
            member_metrics.push(MemberMetrics {
                member: m,
                mean_final_score: mean_final,
                mean_l2,
                fitness: self.population[m].fitness.unwrap_or(f64::NAN),
                learner: lm,
                learning_rate: hyper.learning_rate,
                entropy_cost: hyper.entropy_cost,
            });
        }

        // Shared discriminator update (not in the supervised ablation).
        let disc_metrics = if self.cfg.reward.source == RewardSource::DiscriminatorLogit {
            Some(self.disc_update()?)
        } else {
            None
        };

        self.global_step += 1;

        // Evolution barrier.
        if self.population.len() > 1
            && self.global_step % self.cfg.pbt.evolution_period == 0
            && self.population.iter().all(|m| m.fitness.is_some())
        {
            let mut erng = rng_for(self.cfg.run.seed, &[stream::PBT_EVOLVE, self.global_step]);
            let events = evolve(&mut self.population, &self.cfg.pbt, &mut erng);
            self.append_population_log(&events)?;
        }

        Ok(RoundMetrics { step: self.global_step, members: member_metrics, disc: disc_metrics })
    }

    fn disc_update(&mut self) -> Result<crate::disc::DiscMetrics, TrainError> {
        let n = self.cfg.run.disc_batch;
        // Round-robin across member queues, starting after the last member
        // served, so all members feed the discriminator between updates.
        let members = self.population.len();
        let mut fakes: Vec<FakeSample> = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        let mut guard = 0;
        while fakes.len() < n && guard < n * members * 4 {
            let m = self.rr_next % members;
            self.rr_next = (self.rr_next + 1) % members;
            if let Some(f) = self.fake_queues[m].pop_front() {
                fakes.push(f);
                sources.push(m);
            }
            guard += 1;
        }
        if fakes.is_empty() {
            return Err(TrainError::Checkpoint("no fake samples queued for the discriminator".into()));
        }
        self.last_disc_sources = sources;

        let reals = self.dataset.sample_batch(fakes.len(), &mut self.real_cursor);
        let mode = self.cfg.disc.conditional_mode;
        let mut real_inputs = Vec::with_capacity(fakes.len());
        let mut fake_inputs = Vec::with_capacity(fakes.len());
        for (i, fake) in fakes.iter().enumerate() {
            let mut mrng =
                rng_for(self.cfg.run.seed, &[stream::DISC_MASK, self.disc_updates, i as u64]);
            let mask = MaskSpec::sample(&mut mrng);
            let real_target = reals[i];
            real_inputs.push(assemble_input::<f32>(mode, Some(real_target), real_target, mask, PairSlot::Real));
            fake_inputs.push(assemble_input::<f32>(
                mode,
                fake.target.as_ref().or(Some(real_target)),
                &fake.render,
                mask,
                PairSlot::Fake,
            ));
        }
        let batch = DiscBatch { real: stack_inputs(&real_inputs), fake: stack_inputs(&fake_inputs) };
        let mut irng = rng_for(self.cfg.run.seed, &[stream::DISC_INTERP, self.disc_updates]);
        let metrics = disc_train_step(&self.disc, &mut self.disc_params, &batch, &self.cfg.disc, &mut irng)?;
        self.disc_updates += 1;
        Ok(metrics)
    }

    /// Runs until `total_learner_steps`, invoking `callback` after every
    /// round; the callback can stop the run early (evaluation-based stops).
    pub fn run(
        &mut self,
        callback: &mut dyn FnMut(&mut Trainer, &RoundMetrics) -> ControlFlow<()>,
    ) -> Result<(), TrainError> {
        while self.global_step < self.cfg.run.total_learner_steps {
            let metrics = self.step_round()?;
            if self.global_step % self.cfg.run.log_every == 0 || self.global_step == 1 {
                self.append_metrics(&metrics)?;
            }
            if self.cfg.run.sample_every > 0 && self.global_step % self.cfg.run.sample_every == 0 {
                self.write_samples(self.global_step)?;
                self.write_example_trajectory(self.global_step)?;
            }
            if self.cfg.run.checkpoint_every > 0 && self.global_step % self.cfg.run.checkpoint_every == 0 {
                self.save_checkpoint(&self.dirs.checkpoints.join(format!("step_{:07}.eslc", self.global_step)))?;
            }
            if let ControlFlow::Break(()) = callback(self, &metrics) {
                break;
            }
        }
        self.save_checkpoint(&self.dirs.checkpoints.join("final.eslc"))?;
        Ok(())
    }

    fn append_metrics(&self, metrics: &RoundMetrics) -> Result<(), TrainError> {
        for m in &metrics.members {
            let path = self.dirs.metrics.join(format!("member_{}.csv", m.member));
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(
                    f,
                    "step,mean_final_reward,mean_l2,fitness,entropy,policy_loss,value_loss,total_loss,grad_norm,learning_rate,entropy_cost"
                )?;
            }
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{}",
                metrics.step,
                m.mean_final_score,
                m.mean_l2.map(|v| v.to_string()).unwrap_or_default(),
                m.fitness,
                m.learner.entropy,
                m.learner.policy_loss,
                m.learner.value_loss,
                m.learner.total_loss,
                m.learner.grad_norm,
                m.learning_rate,
                m.entropy_cost,
            )?;
        }
        if let Some(d) = &metrics.disc {
            let path = self.dirs.metrics.join("disc.csv");
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                let sig_cols: Vec<String> =
                    d.sigma_per_layer.iter().map(|(n, _)| format!("sigma_{}", n.replace('.', "_"))).collect();
                writeln!(f, "step,loss,real_acc,fake_acc,grad_norm,{}", sig_cols.join(","))?;
            }
            let sig: Vec<String> = d.sigma_per_layer.iter().map(|(_, v)| v.to_string()).collect();
            writeln!(
                f,
                "{},{},{},{},{},{}",
                metrics.step, d.loss, d.real_acc, d.fake_acc, d.grad_norm, sig.join(",")
            )?;
        }
        Ok(())
    }

    fn append_population_log(&self, events: &[crate::pbt::EvolutionEvent]) -> Result<(), TrainError> {
        let path = self.dirs.metrics.join("population.jsonl");
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for e in events {
            writeln!(f, "{}", serde_json::json!({ "step": self.global_step, "event": e }))?;
        }
        Ok(())
    }

    /// Writes a sample-grid PNG from the current best member (per fitness).
    pub fn write_samples(&self, step: u64) -> Result<(), TrainError> {
        let best = self.best_member();
        let canvases = self.sample_canvases(best, self.cfg.run.sample_count, self.cfg.run.seed ^ step)?;
        let grid = png_io::tile_grid(&canvases, (self.cfg.run.sample_count as f64).sqrt().ceil() as usize);
        png_io::write_png(&self.dirs.samples.join(format!("step_{step:07}.png")), &grid)
            .map_err(|e| TrainError::Checkpoint(format!("sample write: {e}")))?;
        Ok(())
    }

    pub fn best_member(&self) -> usize {
        self.population
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                let fa = a.fitness.unwrap_or(f64::NEG_INFINITY);
                let fb = b.fitness.unwrap_or(f64::NEG_INFINITY);
                fa.partial_cmp(&fb).unwrap().then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Final canvases of `count` fresh episodes under the given seed; a pure
    /// function of (member weights, seed).
    pub fn sample_canvases(&self, member: usize, count: usize, seed: u64) -> Result<Vec<Canvas>, TrainError> {
        let params = &self.population[member].params;
        let mut out = Vec::with_capacity(count);
        for slot in 0..count {
            let target = self.cfg.env.conditional.then(|| {
                let mut trng = rng_for(seed, &[stream::SAMPLE, slot as u64]);
                use rand::Rng;
                self.dataset.get(trng.random_range(0..self.dataset.len())).clone()
            });
            let env = PaintEnv::reset(
                self.cfg.env.clone(),
                self.cfg.action.clone(),
                self.cfg.brush,
                target,
                seed ^ slot as u64,
            )?;
            let mut rec = TrajectoryRecorder::new(env);
            let mut state = self.policy.initial_state::<f32>(1);
            let mut rng = rng_for(seed, &[stream::SAMPLE, slot as u64, 1]);
            while !rec.is_done() {
                let obs = rec.observation();
                let (action, lp, v, new_state) = self.policy.act(params, &obs, &state, &mut rng)?;
                rec.step(action, lp, v)?;
                state = new_state;
            }
            out.push(rec.finish().final_canvas().clone());
        }
        Ok(out)
    }

    fn write_example_trajectory(&self, step: u64) -> Result<(), TrainError> {
        let member = self.best_member();
        let params = &self.population[member].params;
        let seed = self.cfg.run.seed ^ (step.rotate_left(17)) ^ 0xA5A5;
        let target = self.cfg.env.conditional.then(|| {
            let mut trng = rng_for(seed, &[stream::SAMPLE, 999]);
            use rand::Rng;
            self.dataset.get(trng.random_range(0..self.dataset.len())).clone()
        });
        let env = PaintEnv::reset(self.cfg.env.clone(), self.cfg.action.clone(), self.cfg.brush, target, seed)?;
        let mut rec = TrajectoryRecorder::new(env);
        let mut state = self.policy.initial_state::<f32>(1);
        let mut rng = rng_for(seed, &[stream::SAMPLE, 1000]);
        while !rec.is_done() {
            let obs = rec.observation();
            let (action, lp, v, new_state) = self.policy.act(params, &obs, &state, &mut rng)?;
            rec.step(action, lp, v)?;
            state = new_state;
        }
        let traj = rec.finish();
        traj.write_log(&self.dirs.trajectories.join(format!("step_{step:07}.jsonl")))?;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors = Vec::new();
        let (dt, dmeta) = pack_parameter_set("disc/", &self.disc_params);
        tensors.extend(dt);
        let mut member_meta = Vec::new();
        for m in &self.population {
            let (mt, meta) = pack_parameter_set(&format!("member{}/", m.id), &m.params);
            tensors.extend(mt);
            member_meta.push(serde_json::json!({
                "id": m.id,
                "hyper": m.hyper,
                "fitness": m.fitness,
                "steps_since_evolution": m.steps_since_evolution,
                "params": meta,
            }));
        }
        let meta = serde_json::json!({
            "config": &self.cfg,
            "global_step": self.global_step,
            "disc_updates": self.disc_updates,
            "real_cursor": self.real_cursor,
            "target_cursor": self.target_cursor,
            "rr_next": self.rr_next,
            "disc_meta": dmeta,
            "members": member_meta,
        });
        write_container(path, &meta, &tensors)?;
        Ok(())
    }

    /// Restores a trainer mid-run; continuation is bit-identical to a run
    /// that never stopped (fake queues drain deterministically refilled).
    pub fn resume(path: &Path) -> Result<Trainer, TrainError> {
        let (meta, tensors) = read_container(path).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| TrainError::Checkpoint(format!("config in checkpoint: {e}")))?;
        cfg.validate()?;
        let policy = build_policy(&cfg);
        let disc = build_disc(&cfg);
        let dataset = build_dataset(&cfg)?;
        let disc_params = unpack_parameter_set("disc/", &tensors, &meta["disc_meta"])
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let members_meta = meta["members"].as_array().ok_or_else(|| {
            TrainError::Checkpoint("members missing from checkpoint meta".into())
        })?;
        let mut population = Vec::with_capacity(members_meta.len());
        for mm in members_meta {
            let id = mm["id"].as_u64().unwrap_or(0) as usize;
            let params = unpack_parameter_set(&format!("member{id}/"), &tensors, &mm["params"])
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            population.push(PopulationMember {
                id,
                params,
                hyper: serde_json::from_value(mm["hyper"].clone())
                    .map_err(|e| TrainError::Checkpoint(format!("hyper: {e}")))?,
                fitness: mm["fitness"].as_f64(),
                steps_since_evolution: mm["steps_since_evolution"].as_u64().unwrap_or(0),
            });
        }
        let dirs = RunDirs::create(&cfg.run.out_dir)?;
        Ok(Trainer {
            fake_queues: (0..population.len()).map(|_| VecDeque::new()).collect(),
            policy,
            disc,
            disc_params,
            population,
            dataset,
            global_step: meta["global_step"].as_u64().unwrap_or(0),
            disc_updates: meta["disc_updates"].as_u64().unwrap_or(0),
            real_cursor: serde_json::from_value(meta["real_cursor"].clone()).unwrap_or_default(),
            target_cursor: serde_json::from_value(meta["target_cursor"].clone()).unwrap_or_default(),
            rr_next: meta["rr_next"].as_u64().unwrap_or(0) as usize,
            dirs,
            last_disc_sources: Vec::new(),
            cfg,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MemberMetrics {
    pub member: usize,
    pub mean_final_score: f64,
    pub mean_l2: Option<f64>,
    pub fitness: f64,
    pub learner: crate::agent::LearnerMetrics,
    pub learning_rate: f64,
    pub entropy_cost: f64,
}

#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub step: u64,
    pub members: Vec<MemberMetrics>,
    pub disc: Option<crate::disc::DiscMetrics>,
}
