//! Trajectory replay into filmstrip frames.
//!
//! Replaying a log yields the initial canvas plus one frame per step, with
//! compound-mode annotations: green dots on control points while a stroke is
//! being built, a red dot where a commit was requested.

use crate::env::trajectory::DecodedStep;
use crate::env::EpisodeTrajectory;
use crate::png_io;
use crate::render::Canvas;
use std::path::Path;

const GREEN: [f64; 3] = [0.0, 0.85, 0.1];
const RED: [f64; 3] = [0.95, 0.05, 0.05];

fn dot(canvas: &mut Canvas, x: f64, y: f64, color: [f64; 3]) {
    let (h, w) = (canvas.height(), canvas.width());
    let cx = (x * w as f64) as isize;
    let cy = (y * h as f64) as isize;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let (r, c) = (cy + dy, cx + dx);
            if r >= 0 && (r as usize) < h && c >= 0 && (c as usize) < w {
                canvas.set(r as usize, c as usize, color);
            }
        }
    }
}

/// Annotated frames: `T + 1` canvases (initial plus one per step).
pub fn annotated_frames(traj: &EpisodeTrajectory) -> Vec<Canvas> {
    let mut frames = Vec::with_capacity(traj.canvases.len());
    frames.push(traj.canvases[0].clone());
    for (i, step) in traj.steps.iter().enumerate() {
        let mut frame = traj.canvases[i + 1].clone();
        match &step.decoded {
            DecodedStep::AddPoint { point, .. } => {
                // The whole pending chain in green, with this point freshest.
                for p in step.obs_pending.iter() {
                    dot(&mut frame, p.x, p.y, GREEN);
                }
                dot(&mut frame, point.x, point.y, GREEN);
            }
            DecodedStep::Commit { points, .. } => {
                if let Some(last) = points.last() {
                    dot(&mut frame, last.x, last.y, RED);
                }
            }
            DecodedStep::SimpleStroke { .. } => {}
        }
        frames.push(frame);
    }
    frames
}

/// Writes per-step frame PNGs plus a single horizontal filmstrip.
pub fn write_filmstrip(traj: &EpisodeTrajectory, out_dir: &Path) -> Result<Vec<std::path::PathBuf>, crate::png_io::PngError> {
    std::fs::create_dir_all(out_dir)?;
    let frames = annotated_frames(traj);
    let mut paths = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let p = out_dir.join(format!("frame_{i:03}.png"));
        png_io::write_png(&p, f)?;
        paths.push(p);
    }
    let strip = png_io::tile_grid(&frames, frames.len());
    png_io::write_png(&out_dir.join("filmstrip.png"), &strip)?;
    Ok(paths)
}
