//! Episode state machine over the stroke renderer.
//!
//! Two action interfaces:
//!
//! - **simple**: one quadratic Bézier per step; the previous step's end point
//!   is the next stroke's start point (episode start is the canvas center).
//! - **compound**: strokes built up over several steps as control points and
//!   deposited as an interpolating spline by a discrete commit action; brush
//!   parameters are latched when a stroke begins; the canvas changes only on
//!   commit, and pending points left at episode end are discarded.
//!
//! Every step charges the stroke penalties: `-c_new` each time a stroke
//! begins and `-c_len * arc_length` (normalized units) when one is deposited.

pub mod trajectory;

pub use trajectory::{ActionRecord, EpisodeTrajectory, TrajectoryHeader, TrajectoryRecorder, TrajectoryStep};

use crate::geom::Point;
pub use crate::render::BrushConfig;

use crate::render::{self, Canvas, CurveKind, RenderError, StrokeSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode already complete")]
    EpisodeComplete,
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("render error: {0}")]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interface {
    Simple,
    Compound,
}

/// Discretization of the action space: stroke locations snap to a G x G grid
/// of cell centers, and thickness / color / opacity choices come from small
/// palettes so every sub-action is one categorical head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub location_grid: usize,
    pub thickness_bins: Vec<f64>,
    /// Palette size per color channel; channel values are `i / (bins - 1)`.
    pub color_bins: usize,
    pub opacity_bins: Vec<f64>,
    pub interface: Interface,
}

impl Default for ActionSpec {
    fn default() -> Self {
        ActionSpec {
            location_grid: 16,
            thickness_bins: vec![1.0, 2.0, 3.5, 5.0],
            color_bins: 8,
            opacity_bins: vec![0.25, 0.5, 0.75, 1.0],
            interface: Interface::Simple,
        }
    }
}

impl ActionSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.location_grid < 2 {
            return Err(EnvError::Config(format!("location_grid must be >= 2, got {}", self.location_grid)));
        }
        if self.thickness_bins.is_empty() || self.opacity_bins.is_empty() {
            return Err(EnvError::Config("thickness/opacity bins must be non-empty".into()));
        }
        if self.color_bins < 2 {
            return Err(EnvError::Config(format!("color_bins must be >= 2, got {}", self.color_bins)));
        }
        if self.thickness_bins.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(EnvError::Config("thickness bins must be positive".into()));
        }
        if self.opacity_bins.iter().any(|&o| !(0.0..=1.0).contains(&o)) {
            return Err(EnvError::Config("opacity bins must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn grid_cells(&self) -> usize {
        self.location_grid * self.location_grid
    }

    /// Cell index -> normalized cell-center coordinates.
    pub fn decode_cell(&self, idx: usize) -> Point {
        let g = self.location_grid;
        debug_assert!(idx < g * g);
        let (ix, iy) = (idx % g, idx / g);
        Point::new((ix as f64 + 0.5) / g as f64, (iy as f64 + 0.5) / g as f64)
    }

    /// Nearest cell to a normalized point (used for observation fields).
    pub fn encode_cell(&self, p: Point) -> usize {
        let g = self.location_grid;
        let ix = ((p.x * g as f64).floor() as isize).clamp(0, g as isize - 1) as usize;
        let iy = ((p.y * g as f64).floor() as isize).clamp(0, g as isize - 1) as usize;
        iy * g + ix
    }

    pub fn color_value(&self, idx: usize) -> f64 {
        debug_assert!(idx < self.color_bins);
        idx as f64 / (self.color_bins - 1) as f64
    }

    /// Nearest palette index for a channel value in [0,1].
    pub fn encode_color(&self, v: f64) -> usize {
        ((v * (self.color_bins - 1) as f64).round() as isize).clamp(0, self.color_bins as isize - 1)
            as usize
    }

    pub fn decode_color(&self, idx: [usize; 3]) -> [f64; 3] {
        [self.color_value(idx[0]), self.color_value(idx[1]), self.color_value(idx[2])]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleAction {
    pub midpoint: usize,
    pub endpoint: usize,
    pub thickness: usize,
    pub color: [usize; 3],
    pub opacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrushParams {
    pub thickness: usize,
    pub color: [usize; 3],
    pub opacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CompoundAction {
    /// Appends a control point; the brush parameters are consumed only when
    /// this begins a new stroke.
    AddControlPoint { point: usize, brush: BrushParams },
    /// Deposits the pending stroke (requires >= 2 pending points).
    CommitStroke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Simple(SimpleAction),
    Compound(CompoundAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Steps per episode (T).
    pub episode_len: usize,
    /// Square canvas side in pixels.
    pub canvas_size: usize,
    /// Penalty charged when a new stroke begins (c_new >= 0).
    pub new_stroke_penalty: f64,
    /// Penalty per unit of normalized arc length (c_len >= 0).
    pub stroke_length_penalty: f64,
    /// Whether observations carry a target image.
    pub conditional: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            episode_len: 5,
            canvas_size: 32,
            new_stroke_penalty: 0.01,
            stroke_length_penalty: 0.05,
            conditional: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.episode_len < 1 {
            return Err(EnvError::Config("episode_len must be >= 1".into()));
        }
        if self.canvas_size < 2 {
            return Err(EnvError::Config("canvas_size must be >= 2".into()));
        }
        if self.new_stroke_penalty < 0.0 || self.stroke_length_penalty < 0.0 {
            return Err(EnvError::Config("penalties must be >= 0".into()));
        }
        Ok(())
    }
}

/// What the policy sees before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub canvas: Canvas,
    pub step_index: usize,
    pub episode_len: usize,
    /// Grid cell of the brush after the previous action, if any.
    pub last_brush_position: Option<usize>,
    /// Present iff the environment is conditional.
    pub target: Option<Canvas>,
    /// Control points of the stroke under construction (compound interface).
    pub pending_points: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub penalty: f64,
    pub done: bool,
    /// Decoded stroke geometry for logging.
    pub record: trajectory::DecodedStep,
}

/// Episode-start brush position for the simple interface: the canvas center.
pub const START_POSITION: Point = Point { x: 0.5, y: 0.5 };

#[derive(Debug, Clone)]
struct PendingBrush {
    thickness: f64,
    color: [f64; 3],
    opacity: f64,
}

/// One painting episode. Single-threaded; many instances may run in parallel
/// workers with no shared state.
#[derive(Debug, Clone)]
pub struct PaintEnv {
    cfg: EnvConfig,
    spec: ActionSpec,
    brush: BrushConfig,
    canvas: Canvas,
    step_index: usize,
    done: bool,
    brush_pos: Point,
    last_cell: Option<usize>,
    pending: Vec<Point>,
    pending_brush: Option<PendingBrush>,
    target: Option<Canvas>,
    strokes_begun: usize,
    seed: u64,
}

impl PaintEnv {
    /// Starts a fresh episode on a white canvas. `target` must be present
    /// iff the config is conditional and must match the canvas size.
    pub fn reset(
        cfg: EnvConfig,
        spec: ActionSpec,
        brush: BrushConfig,
        target: Option<Canvas>,
        seed: u64,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        spec.validate()?;
        brush.validate().map_err(EnvError::Render)?;
        if cfg.conditional != target.is_some() {
            return Err(EnvError::Config(format!(
                "conditional={} but target {}",
                cfg.conditional,
                if target.is_some() { "present" } else { "absent" }
            )));
        }
        if let Some(t) = &target {
            if t.height() != cfg.canvas_size || t.width() != cfg.canvas_size {
                return Err(EnvError::Config(format!(
                    "target {}x{} does not match canvas size {}",
                    t.height(),
                    t.width(),
                    cfg.canvas_size
                )));
            }
        }
        Ok(PaintEnv {
            canvas: Canvas::white(cfg.canvas_size, cfg.canvas_size),
            step_index: 0,
            done: false,
            brush_pos: START_POSITION,
            last_cell: None,
            pending: Vec::new(),
            pending_brush: None,
            strokes_begun: 0,
            target,
            seed,
            cfg,
            spec,
            brush,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn brush_config(&self) -> &BrushConfig {
        &self.brush
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn canvas(&self) -> &Canvas {
        &self.canvas
    }

    pub fn target(&self) -> Option<&Canvas> {
        self.target.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn strokes_begun(&self) -> usize {
        self.strokes_begun
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn observation(&self) -> Observation {
        Observation {
            canvas: self.canvas.clone(),
            step_index: self.step_index,
            episode_len: self.cfg.episode_len,
            last_brush_position: self.last_cell,
            target: self.target.clone(),
            pending_points: self.pending.clone(),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        match (action, self.spec.interface) {
            (Action::Simple(a), Interface::Simple) => self.step_simple(a),
            (Action::Compound(a), Interface::Compound) => self.step_compound(a),
            _ => Err(EnvError::IllegalAction("action does not match the configured interface".into())),
        }
    }

    pub fn step_simple(&mut self, a: &SimpleAction) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeComplete);
        }
        if self.spec.interface != Interface::Simple {
            return Err(EnvError::IllegalAction("simple action on compound interface".into()));
        }
        self.check_simple(a)?;
        let start = self.brush_pos;
        let mid = self.spec.decode_cell(a.midpoint);
        let end = self.spec.decode_cell(a.endpoint);
        let stroke = StrokeSpec {
            control_points: vec![start, mid, end],
            curve_kind: CurveKind::QuadraticBezier,
            thickness: self.spec.thickness_bins[a.thickness],
            color: self.spec.decode_color(a.color),
            opacity: self.spec.opacity_bins[a.opacity],
        };
        let arc = render::stroke_arc_length(&stroke)?;
        self.canvas = render::rasterize(&self.canvas, &stroke, &self.brush)?;
        self.strokes_begun += 1;
        self.brush_pos = end;
        self.last_cell = Some(a.endpoint);
        let penalty = -self.cfg.new_stroke_penalty - self.cfg.stroke_length_penalty * arc;
        self.advance();
        Ok(StepOutcome {
            observation: self.observation(),
            penalty,
            done: self.done,
            record: trajectory::DecodedStep::SimpleStroke {
                start,
                mid,
                end,
                thickness: stroke.thickness,
                color: stroke.color,
                opacity: stroke.opacity,
                arc_length: arc,
            },
        })
    }

    pub fn step_compound(&mut self, a: &CompoundAction) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeComplete);
        }
        if self.spec.interface != Interface::Compound {
            return Err(EnvError::IllegalAction("compound action on simple interface".into()));
        }
        let (penalty, record) = match a {
            CompoundAction::AddControlPoint { point, brush } => {
                self.check_brush_params(brush)?;
                if *point >= self.spec.grid_cells() {
                    return Err(EnvError::IllegalAction(format!("point index {point} out of grid")));
                }
                let p = self.spec.decode_cell(*point);
                let mut began = false;
                if self.pending.is_empty() {
                    self.pending_brush = Some(PendingBrush {
                        thickness: self.spec.thickness_bins[brush.thickness],
                        color: self.spec.decode_color(brush.color),
                        opacity: self.spec.opacity_bins[brush.opacity],
                    });
                    self.strokes_begun += 1;
                    began = true;
                }
                self.pending.push(p);
                self.last_cell = Some(*point);
                let penalty = if began { -self.cfg.new_stroke_penalty } else { 0.0 };
                (penalty, trajectory::DecodedStep::AddPoint { point: p, began_stroke: began })
            }
            CompoundAction::CommitStroke => {
                if self.pending.len() < 2 {
                    return Err(EnvError::IllegalAction(format!(
                        "commit with {} pending control points (need >= 2)",
                        self.pending.len()
                    )));
                }
                let pb = self.pending_brush.take().expect("pending brush latched at stroke begin");
                let stroke = StrokeSpec {
                    control_points: std::mem::take(&mut self.pending),
                    curve_kind: CurveKind::InterpolatingSpline,
                    thickness: pb.thickness,
                    color: pb.color,
                    opacity: pb.opacity,
                };
                let arc = render::stroke_arc_length(&stroke)?;
                self.canvas = render::rasterize(&self.canvas, &stroke, &self.brush)?;
                (
                    -self.cfg.stroke_length_penalty * arc,
                    trajectory::DecodedStep::Commit {
                        points: stroke.control_points.clone(),
                        thickness: stroke.thickness,
                        color: stroke.color,
                        opacity: stroke.opacity,
                        arc_length: arc,
                    },
                )
            }
        };
        self.advance();
        Ok(StepOutcome { observation: self.observation(), penalty, done: self.done, record })
    }

    fn advance(&mut self) {
        self.step_index += 1;
        if self.step_index >= self.cfg.episode_len {
            self.done = true;
        }
    }

    fn check_simple(&self, a: &SimpleAction) -> Result<(), EnvError> {
        let cells = self.spec.grid_cells();
        if a.midpoint >= cells || a.endpoint >= cells {
            return Err(EnvError::IllegalAction("location index out of grid".into()));
        }
        self.check_brush_params(&BrushParams { thickness: a.thickness, color: a.color, opacity: a.opacity })
    }

    fn check_brush_params(&self, b: &BrushParams) -> Result<(), EnvError> {
        if b.thickness >= self.spec.thickness_bins.len() {
            return Err(EnvError::IllegalAction("thickness index out of range".into()));
        }
        if b.color.iter().any(|&c| c >= self.spec.color_bins) {
            return Err(EnvError::IllegalAction("color index out of range".into()));
        }
        if b.opacity >= self.spec.opacity_bins.len() {
            return Err(EnvError::IllegalAction("opacity index out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_env(t: usize) -> PaintEnv {
        let cfg = EnvConfig { episode_len: t, ..EnvConfig::default() };
        PaintEnv::reset(cfg, ActionSpec::default(), BrushConfig::default(), None, 0).unwrap()
    }

    fn compound_env(t: usize) -> PaintEnv {
        let cfg = EnvConfig { episode_len: t, ..EnvConfig::default() };
        let spec = ActionSpec { interface: Interface::Compound, ..ActionSpec::default() };
        PaintEnv::reset(cfg, spec, BrushConfig::default(), None, 0).unwrap()
    }

    fn any_simple() -> SimpleAction {
        SimpleAction { midpoint: 10, endpoint: 200, thickness: 1, color: [0, 3, 7], opacity: 3 }
    }

    fn add(point: usize) -> CompoundAction {
        CompoundAction::AddControlPoint {
            point,
            brush: BrushParams { thickness: 0, color: [0, 0, 0], opacity: 3 },
        }
    }

    #[test]
    fn reset_gives_white_canvas_step_zero() {
        let env = simple_env(3);
        let obs = env.observation();
        assert_eq!(obs.step_index, 0);
        assert!(obs.canvas.pixels().iter().all(|&v| v == 1.0));
        assert!(obs.target.is_none());
        assert!(obs.last_brush_position.is_none());
    }

    #[test]
    fn conditional_reset_carries_target_bit_exactly() {
        let mut target = Canvas::white(32, 32);
        target.set(3, 4, [0.25, 0.5, 0.75]);
        let cfg = EnvConfig { conditional: true, ..EnvConfig::default() };
        let env = PaintEnv::reset(cfg, ActionSpec::default(), BrushConfig::default(), Some(target.clone()), 7)
            .unwrap();
        assert_eq!(env.observation().target.as_ref().unwrap(), &target);

        // Size mismatch is a config error.
        let cfg = EnvConfig { conditional: true, canvas_size: 16, ..EnvConfig::default() };
        assert!(matches!(
            PaintEnv::reset(cfg, ActionSpec::default(), BrushConfig::default(), Some(target), 7),
            Err(EnvError::Config(_))
        ));
    }

    #[test]
    fn same_seed_resets_identically() {
        let a = simple_env(4).observation();
        let b = simple_env(4).observation();
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_episode_finishes() {
        let mut env = simple_env(1);
        let out = env.step_simple(&any_simple()).unwrap();
        assert!(out.done);
        assert!(matches!(env.step_simple(&any_simple()), Err(EnvError::EpisodeComplete)));
    }

    #[test]
    fn zero_penalty_config_emits_zero_penalties() {
        let cfg = EnvConfig { new_stroke_penalty: 0.0, stroke_length_penalty: 0.0, ..EnvConfig::default() };
        let mut env = PaintEnv::reset(cfg, ActionSpec::default(), BrushConfig::default(), None, 0).unwrap();
        for _ in 0..5 {
            let out = env.step_simple(&any_simple()).unwrap();
            assert_eq!(out.penalty, 0.0);
        }
    }

    #[test]
    fn straight_stroke_penalty_matches_arc_length_oracle() {
        let cfg = EnvConfig { new_stroke_penalty: 0.05, stroke_length_penalty: 0.1, ..EnvConfig::default() };
        let spec = ActionSpec::default();
        let mut env = PaintEnv::reset(cfg, spec.clone(), BrushConfig::default(), None, 0).unwrap();
        let row = 8;
        let a = SimpleAction {
            midpoint: row * 16 + 10,
            endpoint: row * 16 + 14,
            thickness: 0,
            color: [0, 0, 0],
            opacity: 3,
        };
        let out = env.step_simple(&a).unwrap();
        // Dense numeric integration of the same decoded curve.
        let start = START_POSITION;
        let mid = spec.decode_cell(a.midpoint);
        let end = spec.decode_cell(a.endpoint);
        let oracle =
            crate::geom::polyline_arc_length(|t| crate::geom::quadratic_bezier(start, mid, end, t), 8192);
        let expect = -(0.05 + 0.1 * oracle);
        assert!((out.penalty - expect).abs() < 1e-6, "penalty {} vs oracle {expect}", out.penalty);
    }

    #[test]
    fn compound_canvas_changes_only_on_commit() {
        let mut env = compound_env(8);
        let blank = env.canvas().clone();
        env.step_compound(&add(17)).unwrap();
        assert_eq!(env.canvas(), &blank);
        env.step_compound(&add(100)).unwrap();
        assert_eq!(env.canvas(), &blank);
        env.step_compound(&CompoundAction::CommitStroke).unwrap();
        assert_ne!(env.canvas(), &blank);
    }

    #[test]
    fn uncommitted_points_are_discarded_at_episode_end() {
        let mut env = compound_env(3);
        let blank = env.canvas().clone();
        env.step_compound(&add(17)).unwrap();
        env.step_compound(&add(100)).unwrap();
        let out = env.step_compound(&add(150)).unwrap();
        assert!(out.done);
        assert_eq!(env.canvas(), &blank);
    }

    #[test]
    fn new_stroke_penalty_charged_once_per_stroke() {
        let cfg = EnvConfig {
            episode_len: 8,
            new_stroke_penalty: 0.01,
            stroke_length_penalty: 0.0,
            ..EnvConfig::default()
        };
        let spec = ActionSpec { interface: Interface::Compound, ..ActionSpec::default() };
        let mut env = PaintEnv::reset(cfg, spec, BrushConfig::default(), None, 0).unwrap();
        let mut total = 0.0;
        for a in [
            add(10),
            add(20),
            CompoundAction::CommitStroke,
            add(30),
            add(40),
            CompoundAction::CommitStroke,
        ] {
            total += env.step_compound(&a).unwrap().penalty;
        }
        assert!((total - (-0.02)).abs() < 1e-12, "total {total}");
        assert_eq!(env.strokes_begun(), 2);
    }

    #[test]
    fn commit_with_too_few_points_is_illegal() {
        let mut env = compound_env(4);
        assert!(matches!(env.step_compound(&CompoundAction::CommitStroke), Err(EnvError::IllegalAction(_))));
        env.step_compound(&add(10)).unwrap();
        assert!(matches!(env.step_compound(&CompoundAction::CommitStroke), Err(EnvError::IllegalAction(_))));
    }

    #[test]
    fn simple_strokes_chain_start_to_previous_end() {
        let spec = ActionSpec::default();
        let mut env = simple_env(3);
        let a1 = SimpleAction { midpoint: 5, endpoint: 37, thickness: 0, color: [7, 7, 7], opacity: 0 };
        let out1 = env.step_simple(&a1).unwrap();
        let a2 = SimpleAction { midpoint: 99, endpoint: 140, thickness: 0, color: [7, 7, 7], opacity: 0 };
        let out2 = env.step_simple(&a2).unwrap();
        match (out1.record, out2.record) {
            (
                trajectory::DecodedStep::SimpleStroke { end: e1, .. },
                trajectory::DecodedStep::SimpleStroke { start: s2, .. },
            ) => {
                assert_eq!(e1, s2);
                assert_eq!(e1, spec.decode_cell(a1.endpoint));
            }
            _ => panic!("expected simple strokes"),
        }
    }
}
