//! Reconstruction evaluation: per-episode, per-step pixel distances of the
//! canvas to its target, final-step statistics, and the hue-match probe used
//! by the toy acceptance runs.

use crate::render::Canvas;
use crate::train::{TrainError, Trainer};
use crate::util::{rng_for, stream};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Per-episode evaluation record.
#[derive(Debug, Clone)]
pub struct EpisodeEval {
    /// Mean-squared pixel distance after every step: `T + 1` entries
    /// starting from the blank canvas.
    pub l2_series: Vec<f64>,
    /// Distance of a white canvas to this episode's target.
    pub blank_l2: f64,
    /// Dominant-channel match between the painted content and the target.
    pub hue_match: bool,
    pub strokes_begun: usize,
    /// Mean absolute canvas change per step.
    pub l1_deltas: Vec<f64>,
    pub final_canvas: Canvas,
    pub target: Option<Canvas>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
}

impl EvalReport {
    pub fn mean_final_l2(&self) -> f64 {
        self.episodes.iter().map(|e| *e.l2_series.last().unwrap()).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_blank_l2(&self) -> f64 {
        self.episodes.iter().map(|e| e.blank_l2).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn hue_match_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.hue_match).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_strokes(&self) -> f64 {
        self.episodes.iter().map(|e| e.strokes_begun as f64).sum::<f64>() / self.episodes.len() as f64
    }

    /// Mean absolute per-step canvas change over the first `quarter` of the
    /// episode (credit-assignment diagnostics).
    pub fn mean_early_change(&self, fraction: f64) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for e in &self.episodes {
            let take = ((e.l1_deltas.len() as f64 * fraction).ceil() as usize).max(1);
            for d in e.l1_deltas.iter().take(take) {
                acc += d;
                n += 1;
            }
        }
        acc / n.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "episode,step,l2,improvement,blank_l2,hue_match,strokes")?;
        for (i, e) in self.episodes.iter().enumerate() {
            for (t, l2) in e.l2_series.iter().enumerate() {
                let improvement = if t == 0 { 0.0 } else { e.l2_series[t - 1] - l2 };
                writeln!(
                    f,
                    "{i},{t},{l2},{improvement},{},{},{}",
                    e.blank_l2,
                    e.hue_match as u8,
                    e.strokes_begun
                )?;
            }
        }
        Ok(())
    }
}

/// Dominant color channel of the non-white content of a canvas; `None` when
/// nothing was painted.
pub fn dominant_channel(canvas: &Canvas) -> Option<usize> {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for row in 0..canvas.height() {
        for col in 0..canvas.width() {
            let px = canvas.get(row, col);
            if px.iter().any(|&v| v < 0.92) {
                for c in 0..3 {
                    acc[c] += px[c];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    Some((0..3).max_by(|&a, &b| acc[a].partial_cmp(&acc[b]).unwrap()).unwrap())
}

/// Runs `count` evaluation episodes with the given member's policy and a
/// seed stream disjoint from training. Targets draw from the dataset in
/// conditional mode.
pub fn evaluate(trainer: &Trainer, member: usize, count: usize, seed: u64) -> Result<EvalReport, TrainError> {
    let mut episodes = Vec::with_capacity(count);
    for slot in 0..count {
        let target = trainer.cfg.env.conditional.then(|| {
            let mut trng = rng_for(seed, &[stream::EVAL, slot as u64]);
            trainer.dataset.get(trng.random_range(0..trainer.dataset.len())).clone()
        });
        let env = crate::env::PaintEnv::reset(
            trainer.cfg.env.clone(),
            trainer.cfg.action.clone(),
            trainer.cfg.brush,
            target.clone(),
            seed ^ (slot as u64),
        )?;
        let mut rec = crate::env::TrajectoryRecorder::new(env);
        let mut state = trainer.policy.initial_state::<f32>(1);
        let mut rng = rng_for(seed, &[stream::EVAL, slot as u64, 1]);
        while !rec.is_done() {
            let obs = rec.observation();
            let (action, lp, v, new_state) =
                trainer.policy.act(&trainer.population[member].params, &obs, &state, &mut rng)?;
            rec.step(action, lp, v)?;
            state = new_state;
        }
        let traj = rec.finish();
        episodes.push(score_episode_eval(&traj, target.as_ref()));
    }
    Ok(EvalReport { episodes })
}

/// Builds the evaluation record for one finished trajectory.
pub fn score_episode_eval(traj: &crate::env::EpisodeTrajectory, target: Option<&Canvas>) -> EpisodeEval {
    let blank = Canvas::white(traj.canvases[0].height(), traj.canvases[0].width());
    let l2_series: Vec<f64> = match target {
        Some(t) => traj.canvases.iter().map(|c| c.mean_sq_distance(t)).collect(),
        None => vec![0.0; traj.canvases.len()],
    };
    let blank_l2 = target.map(|t| blank.mean_sq_distance(t)).unwrap_or(0.0);
    let hue_match = match target {
        Some(t) => {
            let painted = dominant_channel(traj.final_canvas());
            let wanted = dominant_channel(t);
            painted.is_some() && painted == wanted
        }
        None => false,
    };
    let l1_deltas: Vec<f64> = traj
        .canvases
        .windows(2)
        .map(|w| w[0].mean_abs_distance(&w[1]))
        .collect();
    EpisodeEval {
        l2_series,
        blank_l2,
        hue_match,
        strokes_begun: traj.strokes_begun,
        l1_deltas,
        final_canvas: traj.final_canvas().clone(),
        target: target.cloned(),
    }
}
