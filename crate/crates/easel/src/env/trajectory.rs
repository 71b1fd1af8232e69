//! Episode trajectories: the full per-step record of one episode, its
//! line-delimited JSON log format, and replay back through the environment.
//!
//! Replay determinism is the contract everything else leans on: each
//! intermediate canvas is a pure function of (config, actions so far), so a
//! logged trajectory reproduces every canvas bit-exactly.

use super::{Action, ActionSpec, EnvConfig, EnvError, PaintEnv};
use crate::geom::Point;
use crate::png_io;
use crate::render::{BrushConfig, Canvas};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub type ActionRecord = Action;

/// Decoded action geometry, as written to logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum DecodedStep {
    SimpleStroke {
        start: Point,
        mid: Point,
        end: Point,
        thickness: f64,
        color: [f64; 3],
        opacity: f64,
        arc_length: f64,
    },
    AddPoint {
        point: Point,
        began_stroke: bool,
    },
    Commit {
        points: Vec<Point>,
        thickness: f64,
        color: [f64; 3],
        opacity: f64,
        arc_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub env: EnvConfig,
    pub action_spec: ActionSpec,
    pub brush: BrushConfig,
    pub seed: u64,
    /// Target image as hex-encoded 8-bit RGB rows (conditional mode only;
    /// quantized, which does not affect canvas replay).
    pub target_hex: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step_index: usize,
    pub action: Action,
    pub decoded: DecodedStep,
    pub penalty: f64,
    /// Filled in by the acting policy; zero for scripted rollouts.
    #[serde(default)]
    pub log_prob: f64,
    #[serde(default)]
    pub value: f64,
    /// Reward after scoring (credit assignment happens post-hoc).
    #[serde(default)]
    pub reward: f64,
    /// Observation bookkeeping needed to rebuild policy inputs offline.
    #[serde(default)]
    pub obs_last_cell: Option<usize>,
    #[serde(default)]
    pub obs_pending: Vec<Point>,
}

/// Ordered record of one episode: the initial canvas, every step, and every
/// intermediate canvas (index t holds the canvas after step t).
#[derive(Debug, Clone)]
pub struct EpisodeTrajectory {
    pub header: TrajectoryHeader,
    pub steps: Vec<TrajectoryStep>,
    /// Canvases `[initial, after step 1, ..., after step T]`.
    pub canvases: Vec<Canvas>,
    /// Target image at full precision (not the quantized log copy).
    pub target: Option<Canvas>,
    pub strokes_begun: usize,
}

impl EpisodeTrajectory {
    pub fn final_canvas(&self) -> &Canvas {
        self.canvases.last().expect("trajectory always holds the initial canvas")
    }

    pub fn total_penalty(&self) -> f64 {
        self.steps.iter().map(|s| s.penalty).sum()
    }

    /// Replays the logged actions through a fresh environment and returns the
    /// final canvas. Bit-identical to the stored one by construction.
    pub fn replay_final(&self) -> Result<Canvas, EnvError> {
        let canvases = self.replay_canvases()?;
        Ok(canvases.into_iter().last().expect("at least the initial canvas"))
    }

    /// Replays and returns all `T + 1` canvases.
    pub fn replay_canvases(&self) -> Result<Vec<Canvas>, EnvError> {
        let mut env = PaintEnv::reset(
            self.header.env.clone(),
            self.header.action_spec.clone(),
            self.header.brush,
            self.target.clone(),
            self.header.seed,
        )?;
        let mut out = vec![env.canvas().clone()];
        for s in &self.steps {
            let o = env.step(&s.action)?;
            let _ = o;
            out.push(env.canvas().clone());
        }
        Ok(out)
    }

    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "{}",
            serde_json::json!({ "type": "header", "header": &self.header })
        )?;
        for s in &self.steps {
            writeln!(f, "{}", serde_json::json!({ "type": "step", "step": s }))?;
        }
        Ok(())
    }

    /// Parses a JSONL log. Errors carry the 1-based line number.
    pub fn read_log(path: &Path) -> Result<Self, EnvError> {
        let f = std::fs::File::open(path)
            .map_err(|e| EnvError::Config(format!("open {}: {e}", path.display())))?;
        let reader = std::io::BufReader::new(f);
        let mut header: Option<TrajectoryHeader> = None;
        let mut steps = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| EnvError::Config(format!("line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| EnvError::Config(format!("line {}: {e}", i + 1)))?;
            match v.get("type").and_then(|t| t.as_str()) {
                Some("header") => {
                    let h: TrajectoryHeader = serde_json::from_value(v["header"].clone())
                        .map_err(|e| EnvError::Config(format!("line {}: {e}", i + 1)))?;
                    header = Some(h);
                }
                Some("step") => {
                    let s: TrajectoryStep = serde_json::from_value(v["step"].clone())
                        .map_err(|e| EnvError::Config(format!("line {}: {e}", i + 1)))?;
                    steps.push(s);
                }
                other => {
                    return Err(EnvError::Config(format!("line {}: unknown record type {other:?}", i + 1)))
                }
            }
        }
        let header = header.ok_or_else(|| EnvError::Config("log has no header line".into()))?;
        let target = match &header.target_hex {
            None => None,
            Some(hx) => {
                let bytes = decode_hex(hx)
                    .ok_or_else(|| EnvError::Config("header: bad target hex".into()))?;
                let size = header.env.canvas_size;
                if bytes.len() != size * size * 3 {
                    return Err(EnvError::Config("header: target byte count mismatch".into()));
                }
                Some(png_io::canvas_from_bytes(size, size, &bytes))
            }
        };
        let mut traj = EpisodeTrajectory {
            header,
            steps,
            canvases: Vec::new(),
            target,
            strokes_begun: 0,
        };
        traj.canvases = traj.replay_canvases()?;
        traj.strokes_begun = traj
            .steps
            .iter()
            .filter(|s| match &s.decoded {
                DecodedStep::SimpleStroke { .. } => true,
                DecodedStep::AddPoint { began_stroke, .. } => *began_stroke,
                DecodedStep::Commit { .. } => false,
            })
            .count();
        Ok(traj)
    }
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2).map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()).collect()
}

/// Drives an environment while recording the full trajectory.
pub struct TrajectoryRecorder {
    env: PaintEnv,
    traj: EpisodeTrajectory,
}

impl TrajectoryRecorder {
    pub fn new(env: PaintEnv) -> Self {
        let header = TrajectoryHeader {
            env: env.config().clone(),
            action_spec: env.action_spec().clone(),
            brush: *env.brush_config(),
            seed: env.seed(),
            target_hex: env.target().map(|t| crate::util::hex(&png_io::canvas_to_bytes(t))),
        };
        let traj = EpisodeTrajectory {
            header,
            steps: Vec::new(),
            canvases: vec![env.canvas().clone()],
            target: env.target().cloned(),
            strokes_begun: 0,
        };
        TrajectoryRecorder { env, traj }
    }

    pub fn env(&self) -> &PaintEnv {
        &self.env
    }

    pub fn is_done(&self) -> bool {
        self.env.is_done()
    }

    pub fn observation(&self) -> super::Observation {
        self.env.observation()
    }

    /// Steps the environment, recording observation bookkeeping, the action,
    /// and the canvas after the step. `log_prob`/`value` come from the policy.
    pub fn step(&mut self, action: Action, log_prob: f64, value: f64) -> Result<super::StepOutcome, EnvError> {
        let pre = self.env.observation();
        let out = self.env.step(&action)?;
        self.traj.steps.push(TrajectoryStep {
            step_index: pre.step_index,
            action,
            decoded: out.record.clone(),
            penalty: out.penalty,
            log_prob,
            value,
            reward: 0.0,
            obs_last_cell: pre.last_brush_position,
            obs_pending: pre.pending_points,
        });
        self.traj.canvases.push(self.env.canvas().clone());
        Ok(out)
    }

    pub fn finish(mut self) -> EpisodeTrajectory {
        self.traj.strokes_begun = self.env.strokes_begun();
        self.traj
    }
}

/// Scans a trajectory and recomputes the penalty total from first principles:
/// `-c_new * strokes_begun - c_len * sum(arc lengths)`, with arc lengths
/// re-derived from the decoded geometry. Used to audit penalty accounting.
pub fn penalty_accounting_oracle(traj: &EpisodeTrajectory) -> f64 {
    let c_new = traj.header.env.new_stroke_penalty;
    let c_len = traj.header.env.stroke_length_penalty;
    let mut strokes = 0usize;
    let mut total_len = 0.0;
    for s in &traj.steps {
        match &s.decoded {
            DecodedStep::SimpleStroke { arc_length, .. } => {
                strokes += 1;
                total_len += arc_length;
            }
            DecodedStep::AddPoint { began_stroke, .. } => {
                if *began_stroke {
                    strokes += 1;
                }
            }
            DecodedStep::Commit { arc_length, .. } => {
                total_len += arc_length;
            }
        }
    }
    -c_new * strokes as f64 - c_len * total_len
}
