//! The painting policy: a conv encoder over observation planes, a recurrent
//! core, autoregressive categorical heads (one per sub-action), and a value
//! head. Heads are sampled in a fixed order, each conditioned on the already
//! sampled sub-actions through additive embeddings; illegal sub-actions
//! (committing a stroke with fewer than two pending points) get probability
//! exactly zero through logit masking.

pub mod learner;
pub mod reward;

pub use learner::{learner_step, AgentHyperparams, LearnerMetrics, SegStep, Segment};
pub use reward::{compute_rewards, discounted_returns, RewardConfig, RewardMode, RewardSource};

use crate::env::{
    Action, ActionSpec, BrushParams, CompoundAction, Interface, Observation, SimpleAction,
    START_POSITION,
};
use crate::nn::layers::{Conv2d, Dense, GruCell, ParamVars};
use crate::nn::tape::{Graph, Var};
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::{NnError, ParameterSet};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub canvas_size: usize,
    pub conditional: bool,
    pub action_spec: ActionSpec,
    /// Channels of the three stride-2 encoder convolutions.
    pub conv_channels: [usize; 3],
    /// Width of the dense trunk, recurrent core, and embeddings.
    pub feat_dim: usize,
}

impl PolicyConfig {
    pub fn new(canvas_size: usize, conditional: bool, action_spec: ActionSpec) -> Self {
        PolicyConfig { canvas_size, conditional, action_spec, conv_channels: [12, 24, 32], feat_dim: 128 }
    }

    /// Observation planes: canvas RGB, optional target RGB plus a
    /// (target - canvas) difference, brush cursor, pending control points,
    /// episode progress.
    pub fn input_channels(&self) -> usize {
        3 + if self.conditional { 6 } else { 0 } + 3
    }
}

/// One categorical sub-action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    CompoundKind,
    Midpoint,
    Endpoint,
    Point,
    Thickness,
    ColorR,
    ColorG,
    ColorB,
    Opacity,
}

/// Per-sample sub-action indices aligned with the policy's head list;
/// `None` marks a head that was inactive for this action.
pub type ActionIndices = Vec<Option<usize>>;

pub struct PolicyNetwork {
    pub cfg: PolicyConfig,
    convs: [Conv2d; 3],
    trunk: Dense,
    gru: GruCell,
    value: Dense,
    heads: Vec<(HeadKind, Dense)>,
    embed_names: Vec<String>,
    flat_dim: usize,
    /// Location heads also read a 1x1 conv over the first feature map when
    /// its spatial extent matches the action grid, so "paint where the
    /// planes say" does not have to squeeze through the pooled trunk.
    spatial_heads: bool,
}

impl PolicyNetwork {
    pub fn new(cfg: PolicyConfig) -> Self {
        let c_in = cfg.input_channels();
        let convs = [
            Conv2d::new("policy.conv0", c_in, cfg.conv_channels[0], 3, 2, 1),
            Conv2d::new("policy.conv1", cfg.conv_channels[0], cfg.conv_channels[1], 3, 2, 1),
            Conv2d::new("policy.conv2", cfg.conv_channels[1], cfg.conv_channels[2], 3, 2, 1),
        ];
        let side = cfg.canvas_size / 8;
        let flat_dim = cfg.conv_channels[2] * side * side;
        let trunk = Dense::new("policy.fc", flat_dim, cfg.feat_dim);
        let gru = GruCell::new("policy.gru", cfg.feat_dim, cfg.feat_dim);
        let value = Dense::new("policy.value", cfg.feat_dim, 1);

        let spec = &cfg.action_spec;
        let cells = spec.grid_cells();
        let head_list: Vec<(HeadKind, usize)> = match spec.interface {
            Interface::Simple => vec![
                (HeadKind::Midpoint, cells),
                (HeadKind::Endpoint, cells),
                (HeadKind::Thickness, spec.thickness_bins.len()),
                (HeadKind::ColorR, spec.color_bins),
                (HeadKind::ColorG, spec.color_bins),
                (HeadKind::ColorB, spec.color_bins),
                (HeadKind::Opacity, spec.opacity_bins.len()),
            ],
            Interface::Compound => vec![
                (HeadKind::CompoundKind, 2),
                (HeadKind::Point, cells),
                (HeadKind::Thickness, spec.thickness_bins.len()),
                (HeadKind::ColorR, spec.color_bins),
                (HeadKind::ColorG, spec.color_bins),
                (HeadKind::ColorB, spec.color_bins),
                (HeadKind::Opacity, spec.opacity_bins.len()),
            ],
        };
        let heads: Vec<(HeadKind, Dense)> = head_list
            .iter()
            .enumerate()
            .map(|(i, (kind, k))| (*kind, Dense::new(&format!("policy.head{i}"), cfg.feat_dim, *k)))
            .collect();
        let embed_names = (0..heads.len()).map(|i| format!("policy.embed{i}")).collect();
        let spatial_heads = cfg.canvas_size / 2 == cfg.action_spec.location_grid;
        PolicyNetwork { cfg, convs, trunk, gru, value, heads, embed_names, flat_dim, spatial_heads }
    }

    fn is_location(kind: HeadKind) -> bool {
        matches!(kind, HeadKind::Midpoint | HeadKind::Endpoint | HeadKind::Point)
    }

    fn spatial_name(&self, hi: usize) -> String {
        format!("policy.spatial{hi}.w")
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|(_, d)| d.output).collect()
    }

    pub fn init<S: Scalar>(&self, rng: &mut ChaCha12Rng) -> ParameterSet<S> {
        let mut ps = ParameterSet::new();
        for c in &self.convs {
            c.init(&mut ps, rng);
        }
        self.trunk.init(&mut ps, rng);
        self.gru.init(&mut ps, rng);
        self.value.init(&mut ps, rng);
        for (_, d) in &self.heads {
            d.init(&mut ps, rng);
        }
        for (i, name) in self.embed_names.iter().enumerate() {
            let k = self.heads[i].1.output;
            let data: Vec<S> = (0..k * self.cfg.feat_dim)
                .map(|_| S::from_f64(crate::nn::layers::sample_normal(rng) * 0.1))
                .collect();
            ps.insert(name, Tensor::from_vec(&[k, self.cfg.feat_dim], data));
        }
        if self.spatial_heads {
            let c1 = self.cfg.conv_channels[0];
            for (hi, (kind, _)) in self.heads.iter().enumerate() {
                if Self::is_location(*kind) {
                    let std = (2.0 / c1 as f64).sqrt();
                    let data: Vec<S> = (0..c1)
                        .map(|_| S::from_f64(crate::nn::layers::sample_normal(rng) * std))
                        .collect();
                    ps.insert(&self.spatial_name(hi), Tensor::from_vec(&[1, c1, 1, 1], data));
                }
            }
        }
        ps
    }

    pub fn initial_state<S: Scalar>(&self, batch: usize) -> Tensor<S> {
        Tensor::zeros(&[batch, self.cfg.feat_dim])
    }

    /// Encoder + recurrent core: planes `[n, c, h, w]` and state `[n, f]`
    /// to the new core state `[n, f]`, plus the first (half-resolution)
    /// feature map for the spatially aligned location heads.
    fn core<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        planes: Var,
        state: Var,
    ) -> Result<(Var, Var), NnError> {
        let pre0 = self.convs[0].forward(g, ps, vars, planes)?;
        let first = g.relu(pre0)?;
        let mut cur = first;
        for c in &self.convs[1..] {
            let pre = c.forward(g, ps, vars, cur)?;
            cur = g.relu(pre)?;
        }
        let n = g.shape(cur)[0];
        let flat = g.reshape(cur, &[n, self.flat_dim])?;
        let pre = self.trunk.forward(g, ps, vars, flat)?;
        let feat = g.relu(pre)?;
        let new_state = self.gru.forward(g, ps, vars, feat, state)?;
        Ok((new_state, first))
    }

    /// Builds the additive logit mask for one head: rows are samples.
    /// Only the compound kind head is ever masked (commit requires two
    /// pending points); everything else is always legal.
    fn head_mask<S: Scalar>(&self, kind: HeadKind, k: usize, pending: &[usize]) -> Option<Tensor<S>> {
        if kind != HeadKind::CompoundKind {
            return None;
        }
        let mut data = vec![S::ZERO; pending.len() * k];
        let mut any = false;
        for (row, &p) in pending.iter().enumerate() {
            if p < 2 {
                data[row * k + COMPOUND_COMMIT] = S::from_f64(MASKED_LOGIT);
                any = true;
            }
        }
        any.then(|| Tensor::from_vec(&[pending.len(), k], data))
    }
}

pub const COMPOUND_ADD: usize = 0;
pub const COMPOUND_COMMIT: usize = 1;

/// Which heads are active given the already-determined prefix of sub-actions.
fn head_active(kind: HeadKind, interface: Interface, chosen_kind: Option<usize>, pending: usize) -> bool {
    match interface {
        Interface::Simple => true,
        Interface::Compound => match kind {
            HeadKind::CompoundKind => true,
            HeadKind::Point => chosen_kind == Some(COMPOUND_ADD),
            // Brush parameters are consumed only when a stroke begins.
            _ => chosen_kind == Some(COMPOUND_ADD) && pending == 0,
        },
    }
}

/// Samples one index from a categorical distribution given by `probs`.
/// Entries with exactly zero probability are never selected.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Builds observation input planes for a batch.
pub fn batch_planes<S: Scalar>(cfg: &PolicyConfig, observations: &[&Observation]) -> Tensor<S> {
    let size = cfg.canvas_size;
    let c = cfg.input_channels();
    let mut data = vec![S::ZERO; observations.len() * c * size * size];
    let plane = size * size;
    for (b, obs) in observations.iter().enumerate() {
        let base = b * c * plane;
        // Canvas RGB, channel-major.
        for chan in 0..3 {
            for px in 0..plane {
                data[base + chan * plane + px] = S::from_f64(obs.canvas.pixels()[px * 3 + chan]);
            }
        }
        let mut next = 3;
        if cfg.conditional {
            let target = obs.target.as_ref().expect("conditional observation carries a target");
            for chan in 0..3 {
                for px in 0..plane {
                    data[base + (next + chan) * plane + px] =
                        S::from_f64(target.pixels()[px * 3 + chan]);
                }
            }
            next += 3;
            // What remains to be painted: target minus canvas.
            for chan in 0..3 {
                for px in 0..plane {
                    data[base + (next + chan) * plane + px] = S::from_f64(
                        target.pixels()[px * 3 + chan] - obs.canvas.pixels()[px * 3 + chan],
                    );
                }
            }
            next += 3;
        }
        // Brush cursor: the grid cell's pixel block.
        let cursor_cell = obs
            .last_brush_position
            .unwrap_or_else(|| cfg.action_spec.encode_cell(START_POSITION));
        mark_cell(&mut data[base + next * plane..base + (next + 1) * plane], cfg, cursor_cell, size);
        next += 1;
        // Pending control points.
        for p in &obs.pending_points {
            let cell = cfg.action_spec.encode_cell(*p);
            mark_cell(&mut data[base + next * plane..base + (next + 1) * plane], cfg, cell, size);
        }
        next += 1;
        // Episode progress.
        let t = S::from_f64(obs.step_index as f64 / obs.episode_len.max(1) as f64);
        for px in 0..plane {
            data[base + next * plane + px] = t;
        }
    }
    Tensor::from_vec(&[observations.len(), c, size, size], data)
}

fn mark_cell<S: Scalar>(plane: &mut [S], cfg: &PolicyConfig, cell: usize, size: usize) {
    let g = cfg.action_spec.location_grid;
    let (ix, iy) = (cell % g, cell / g);
    let (r0, r1) = (iy * size / g, ((iy + 1) * size / g).max(iy * size / g + 1).min(size));
    let (c0, c1) = (ix * size / g, ((ix + 1) * size / g).max(ix * size / g + 1).min(size));
    for r in r0..r1 {
        for cc in c0..c1 {
            plane[r * size + cc] = S::ONE;
        }
    }
}

/// Everything the head pass produces per step, shared by acting & learning.
pub struct HeadPass {
    /// Summed log-probability of the (sampled or given) action per sample.
    pub log_prob: Var,
    /// Sum over active heads of the negative entropy per sample.
    pub neg_entropy: Var,
    /// State-value estimate per sample.
    pub value: Var,
    /// The (sampled or given) indices.
    pub indices: Vec<ActionIndices>,
    /// New recurrent state.
    pub state: Var,
}

enum Driver<'a> {
    Sample(&'a mut [ChaCha12Rng]),
    Teacher(&'a [ActionIndices]),
}

impl PolicyNetwork {
    /// One policy step over a batch: encoder, core, value head, and the
    /// autoregressive head cascade, either sampling (rollouts) or
    /// teacher-forced on stored indices (the learner's recompute).
    fn head_pass<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        planes: Var,
        state: Var,
        pending: &[usize],
        mut driver: Driver<'_>,
    ) -> Result<HeadPass, NnError> {
        let n = g.shape(planes)[0];
        let (new_state, first_map) = self.core(g, ps, vars, planes, state)?;
        let value_pre = self.value.forward(g, ps, vars, new_state)?;
        let value = g.reshape(value_pre, &[n])?;

        let interface = self.cfg.action_spec.interface;
        let mut context = new_state;
        let mut log_prob: Option<Var> = None;
        let mut neg_entropy: Option<Var> = None;
        let mut indices: Vec<ActionIndices> = vec![Vec::with_capacity(self.heads.len()); n];
        let mut chosen_kind: Vec<Option<usize>> = vec![None; n];

        for (hi, (kind, dense)) in self.heads.iter().enumerate() {
            let k = dense.output;
            let mut logits = dense.forward(g, ps, vars, context)?;
            if self.spatial_heads && Self::is_location(*kind) {
                let w = vars.leaf(g, ps, &self.spatial_name(hi))?;
                let map = g.conv2d(first_map, w, 1, 0)?;
                let flat = g.reshape(map, &[n, k])?;
                logits = g.add(logits, flat)?;
            }
            if let Some(mask) = self.head_mask::<S>(*kind, k, pending) {
                logits = g.add_const(logits, mask)?;
            }
            let lsm = g.log_softmax(logits)?;
            let probs = g.softmax(logits)?;

            // Active rows for this head.
            let active: Vec<bool> = (0..n)
                .map(|b| head_active(*kind, interface, chosen_kind[b], pending[b]))
                .collect();

            // Pick indices: sample active rows, teacher-force stored ones.
            let mut idx = vec![0usize; n];
            match &mut driver {
                Driver::Sample(rngs) => {
                    let pv = g.value(probs).to_f64_vec();
                    for b in 0..n {
                        if active[b] {
                            idx[b] = sample_categorical(&pv[b * k..(b + 1) * k], &mut rngs[b]);
                        }
                    }
                }
                Driver::Teacher(actions) => {
                    for b in 0..n {
                        if active[b] {
                            idx[b] = actions[b][hi].ok_or_else(|| {
                                NnError::Usage(format!("segment marks head {hi} inactive but it is active"))
                            })?;
                        }
                    }
                }
            }
            for b in 0..n {
                indices[b].push(active[b].then_some(idx[b]));
                if *kind == HeadKind::CompoundKind && active[b] {
                    chosen_kind[b] = Some(idx[b]);
                }
            }

            // Per-sample contributions, masked to active rows.
            let act_mask = Tensor::from_vec(
                &[n],
                active.iter().map(|&a| if a { S::ONE } else { S::ZERO }).collect(),
            );
            let lp = g.select_cols(lsm, &idx)?;
            let lp_masked = g.mul_const(lp, act_mask.clone())?;
            log_prob = Some(match log_prob {
                None => lp_masked,
                Some(acc) => g.add(acc, lp_masked)?,
            });

            let plp = g.mul(probs, lsm)?;
            let ne = g.row_sums(plp)?;
            let ne_masked = g.mul_const(ne, act_mask.clone())?;
            neg_entropy = Some(match neg_entropy {
                None => ne_masked,
                Some(acc) => g.add(acc, ne_masked)?,
            });

            // Context update with the chosen sub-action embedding, zeroed on
            // inactive rows so they do not perturb later heads.
            let table = vars.leaf(g, ps, &self.embed_names[hi])?;
            let emb = g.embed(table, &idx)?;
            let mut row_mask = vec![S::ZERO; n * self.cfg.feat_dim];
            for b in 0..n {
                if active[b] {
                    for f in 0..self.cfg.feat_dim {
                        row_mask[b * self.cfg.feat_dim + f] = S::ONE;
                    }
                }
            }
            let emb_masked = g.mul_const(emb, Tensor::from_vec(&[n, self.cfg.feat_dim], row_mask))?;
            context = g.add(context, emb_masked)?;
        }

        Ok(HeadPass {
            log_prob: log_prob.expect("at least one head"),
            neg_entropy: neg_entropy.expect("at least one head"),
            value,
            indices,
            state: new_state,
        })
    }

    /// Samples actions for a batch of observations. Each sample draws from
    /// its own RNG, so results per episode do not depend on batch packing.
    pub fn act_batch<S: Scalar>(
        &self,
        ps: &ParameterSet<S>,
        observations: &[&Observation],
        state: &Tensor<S>,
        rngs: &mut [ChaCha12Rng],
    ) -> Result<ActBatch<S>, NnError> {
        assert_eq!(observations.len(), rngs.len());
        let mut g = Graph::new();
        let mut vars = ParamVars::new();
        let planes = g.constant(batch_planes(&self.cfg, observations))?;
        let state_v = g.constant(state.clone())?;
        let pending: Vec<usize> = observations.iter().map(|o| o.pending_points.len()).collect();
        let pass = self.head_pass(&mut g, ps, &mut vars, planes, state_v, &pending, Driver::Sample(rngs))?;
        let actions = self.indices_to_actions(&pass.indices, &pending)?;
        Ok(ActBatch {
            actions,
            indices: pass.indices,
            log_probs: g.value(pass.log_prob).to_f64_vec(),
            values: g.value(pass.value).to_f64_vec(),
            state: g.value(pass.state).clone(),
        })
    }

    /// Single-observation convenience wrapper.
    pub fn act<S: Scalar>(
        &self,
        ps: &ParameterSet<S>,
        obs: &Observation,
        state: &Tensor<S>,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Action, f64, f64, Tensor<S>), NnError> {
        let mut rngs = vec![rng.clone()];
        let out = self.act_batch(ps, &[obs], state, &mut rngs)?;
        *rng = rngs.pop().expect("one rng");
        Ok((out.actions[0].clone(), out.log_probs[0], out.values[0], out.state))
    }

    /// Teacher-forced pass for the learner. Returns tape nodes.
    pub fn recompute<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParameterSet<S>,
        vars: &mut ParamVars,
        observations: &[&Observation],
        state: Var,
        actions: &[ActionIndices],
    ) -> Result<HeadPass, NnError> {
        let planes = g.constant(batch_planes(&self.cfg, observations))?;
        let pending: Vec<usize> = observations.iter().map(|o| o.pending_points.len()).collect();
        self.head_pass(g, ps, vars, planes, state, &pending, Driver::Teacher(actions))
    }

    /// Converts per-head indices into environment actions.
    pub fn indices_to_actions(
        &self,
        indices: &[ActionIndices],
        pending: &[usize],
    ) -> Result<Vec<Action>, NnError> {
        indices
            .iter()
            .zip(pending.iter())
            .map(|(ix, &pend)| self.one_action(ix, pend))
            .collect()
    }

    fn one_action(&self, ix: &ActionIndices, pending: usize) -> Result<Action, NnError> {
        let need = |i: usize| -> Result<usize, NnError> {
            ix[i].ok_or_else(|| NnError::Usage(format!("head {i} inactive but required")))
        };
        match self.cfg.action_spec.interface {
            Interface::Simple => Ok(Action::Simple(SimpleAction {
                midpoint: need(0)?,
                endpoint: need(1)?,
                thickness: need(2)?,
                color: [need(3)?, need(4)?, need(5)?],
                opacity: need(6)?,
            })),
            Interface::Compound => {
                let kind = need(0)?;
                if kind == COMPOUND_COMMIT {
                    Ok(Action::Compound(CompoundAction::CommitStroke))
                } else {
                    let point = need(1)?;
                    let brush = if pending == 0 {
                        BrushParams {
                            thickness: need(2)?,
                            color: [need(3)?, need(4)?, need(5)?],
                            opacity: need(6)?,
                        }
                    } else {
                        // Ignored by the environment mid-stroke.
                        BrushParams { thickness: 0, color: [0, 0, 0], opacity: 0 }
                    };
                    Ok(Action::Compound(CompoundAction::AddControlPoint { point, brush }))
                }
            }
        }
    }

    /// Converts an environment action (plus the pending count at the time it
    /// was taken) back into per-head indices for teacher forcing.
    pub fn action_to_indices(&self, action: &Action, pending: usize) -> ActionIndices {
        match action {
            Action::Simple(a) => vec![
                Some(a.midpoint),
                Some(a.endpoint),
                Some(a.thickness),
                Some(a.color[0]),
                Some(a.color[1]),
                Some(a.color[2]),
                Some(a.opacity),
            ],
            Action::Compound(CompoundAction::CommitStroke) => {
                vec![Some(COMPOUND_COMMIT), None, None, None, None, None, None]
            }
            Action::Compound(CompoundAction::AddControlPoint { point, brush }) => {
                if pending == 0 {
                    vec![
                        Some(COMPOUND_ADD),
                        Some(*point),
                        Some(brush.thickness),
                        Some(brush.color[0]),
                        Some(brush.color[1]),
                        Some(brush.color[2]),
                        Some(brush.opacity),
                    ]
                } else {
                    vec![Some(COMPOUND_ADD), Some(*point), None, None, None, None, None]
                }
            }
        }
    }
}

pub struct ActBatch<S: Scalar> {
    pub actions: Vec<Action>,
    pub indices: Vec<ActionIndices>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub state: Tensor<S>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BrushConfig, EnvConfig, PaintEnv};

    fn tiny_policy(interface: Interface, conditional: bool) -> PolicyNetwork {
        let spec = ActionSpec { location_grid: 4, color_bins: 4, interface, ..ActionSpec::default() };
        let mut cfg = PolicyConfig::new(16, conditional, spec);
        cfg.conv_channels = [4, 8, 8];
        cfg.feat_dim = 16;
        PolicyNetwork::new(cfg)
    }

    fn obs_for(policy: &PolicyNetwork, conditional: bool) -> Observation {
        let env = PaintEnv::reset(
            EnvConfig {
                canvas_size: policy.cfg.canvas_size,
                conditional,
                ..EnvConfig::default()
            },
            policy.cfg.action_spec.clone(),
            BrushConfig::default(),
            conditional.then(|| crate::render::Canvas::white(16, 16)),
            0,
        )
        .unwrap();
        env.observation()
    }

    #[test]
    fn zero_network_samples_uniformly_with_matching_log_prob() {
        let policy = tiny_policy(Interface::Simple, false);
        let mut rng = crate::util::rng_for(1, &[1]);
        let mut ps: ParameterSet<f64> = policy.init(&mut rng);
        // Zero every parameter: all logits become zero -> uniform heads.
        let names: Vec<String> = ps.names().map(|s| s.to_string()).collect();
        for n in &names {
            for v in ps.get_mut(n).data_mut() {
                *v = 0.0;
            }
        }
        let obs = obs_for(&policy, false);
        let state = policy.initial_state(1);
        let mut arng = crate::util::rng_for(2, &[2]);
        let (_a, lp, value, _s) = policy.act(&ps, &obs, &state, &mut arng).unwrap();
        let expect: f64 = policy.head_sizes().iter().map(|&k| (1.0 / k as f64).ln()).sum();
        assert!((lp - expect).abs() < 1e-9, "log prob {lp} vs uniform {expect}");
        assert_eq!(value, 0.0);
    }

    #[test]
    fn commit_head_is_masked_with_insufficient_points() {
        let policy = tiny_policy(Interface::Compound, false);
        let mut rng = crate::util::rng_for(3, &[1]);
        let ps: ParameterSet<f64> = policy.init(&mut rng);
        let mut obs = obs_for(&policy, false);
        obs.pending_points = vec![crate::geom::Point::new(0.5, 0.5)]; // 1 point: commit illegal
        let state = policy.initial_state(1);
        for draw in 0..200u64 {
            let mut arng = crate::util::rng_for(4, &[draw]);
            let (action, _, _, _) = policy.act(&ps, &obs, &state, &mut arng).unwrap();
            assert!(
                !matches!(action, Action::Compound(CompoundAction::CommitStroke)),
                "masked commit sampled on draw {draw}"
            );
        }
    }

    #[test]
    fn sampler_matches_probabilities_and_never_picks_zero_mass() {
        let logits = vec![0.5, -1e9, 1.25, -0.3];
        let probs = crate::nn::ops::softmax_rows(&logits, 1, 4);
        assert_eq!(probs[1], 0.0);
        let mut rng = crate::util::rng_for(5, &[1]);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for i in 0..4 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - probs[i]).abs() < 0.01, "head {i}: freq {freq} vs p {}", probs[i]);
        }

        // A million draws never select a zero-probability entry.
        let mut rng = crate::util::rng_for(5, &[2]);
        for _ in 0..1_000_000 {
            assert_ne!(sample_categorical(&probs, &mut rng), 1);
        }
    }

    #[test]
    fn log_prob_is_consistent_with_head_probabilities() {
        let policy = tiny_policy(Interface::Simple, true);
        let mut rng = crate::util::rng_for(7, &[1]);
        let ps: ParameterSet<f64> = policy.init(&mut rng);
        let obs = obs_for(&policy, true);
        let state = policy.initial_state(1);
        let arng = crate::util::rng_for(8, &[1]);
        let out = policy.act_batch(&ps, &[&obs], &state, &mut [arng]).unwrap();

        // Teacher-forced recompute must agree with the sampled log-prob.
        let mut g: Graph<f64> = Graph::new();
        let mut vars = ParamVars::new();
        let sv = g.constant(state.clone()).unwrap();
        let pass = policy.recompute(&mut g, &ps, &mut vars, &[&obs], sv, &out.indices).unwrap();
        let lp = g.value(pass.log_prob).to_f64_vec()[0];
        assert!((lp - out.log_probs[0]).abs() < 1e-9);

        // exp(sum of per-head log-probs) equals the product of the selected
        // head probabilities, rebuilt head by head.
        let prod: f64 = {
            let mut g2: Graph<f64> = Graph::new();
            let mut vars2 = ParamVars::new();
            let planes = g2.constant(batch_planes(&policy.cfg, &[&obs])).unwrap();
            let sv2 = g2.constant(state.clone()).unwrap();
            let (core, _first) = policy.core(&mut g2, &ps, &mut vars2, planes, sv2).unwrap();
            let mut context = core;
            let mut prod = 1.0;
            for (hi, (_kind, dense)) in policy.heads.iter().enumerate() {
                let logits = dense.forward(&mut g2, &ps, &mut vars2, context).unwrap();
                let probs = g2.softmax(logits).unwrap();
                let idx = out.indices[0][hi].unwrap();
                prod *= g2.value(probs).data()[idx];
                let table = vars2.leaf(&mut g2, &ps, &policy.embed_names[hi]).unwrap();
                let emb = g2.embed(table, &[idx]).unwrap();
                context = g2.add(context, emb).unwrap();
            }
            prod
        };
        assert!((lp.exp() - prod).abs() < 1e-9, "exp(lp) {} vs product {}", lp.exp(), prod);
    }

    #[test]
    fn acting_is_deterministic_given_seed() {
        let policy = tiny_policy(Interface::Simple, false);
        let mut rng = crate::util::rng_for(9, &[1]);
        let ps: ParameterSet<f32> = policy.init(&mut rng);
        let obs = obs_for(&policy, false);
        let state = policy.initial_state(1);
        let run = |seed: u64| {
            let mut arng = crate::util::rng_for(seed, &[3]);
            policy.act(&ps, &obs, &state, &mut arng).unwrap()
        };
        let (a1, lp1, v1, s1) = run(42);
        let (a2, lp2, v2, s2) = run(42);
        assert_eq!(a1, a2);
        assert_eq!(lp1, lp2);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn batch_packing_does_not_change_per_episode_samples() {
        let policy = tiny_policy(Interface::Simple, false);
        let mut rng = crate::util::rng_for(10, &[1]);
        let ps: ParameterSet<f64> = policy.init(&mut rng);
        let obs = obs_for(&policy, false);
        let state1 = policy.initial_state(1);
        let mut solo_rng = vec![crate::util::rng_for(77, &[0])];
        let solo = policy.act_batch(&ps, &[&obs], &state1, &mut solo_rng).unwrap();

        let state3 = policy.initial_state(3);
        let mut batch_rngs = vec![
            crate::util::rng_for(77, &[0]),
            crate::util::rng_for(78, &[0]),
            crate::util::rng_for(79, &[0]),
        ];
        let batch = policy.act_batch(&ps, &[&obs, &obs, &obs], &state3, &mut batch_rngs).unwrap();
        assert_eq!(solo.actions[0], batch.actions[0]);
        assert!((solo.log_probs[0] - batch.log_probs[0]).abs() < 1e-12);
    }
}
