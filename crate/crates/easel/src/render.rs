//! Deterministic brush-stroke rasterization.
//!
//! A stroke is a parametric curve (quadratic Bézier or interpolating spline)
//! stamped with circular dabs at a fixed fraction of the brush radius, each
//! dab antialiased by supersampling and alpha-composited over the canvas.
//! Everything is a pure function of its inputs: identical (canvas, stroke,
//! brush) triples produce bit-identical output canvases.

use crate::geom::{catmull_rom, polyline_arc_length, quadratic_bezier, Point};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid stroke: {0}")]
    InvalidStroke(String),
}

/// RGB painting surface with all channel values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    /// Uniformly white canvas; the state of a fresh episode.
    pub fn white(height: usize, width: usize) -> Self {
        Canvas { height, width, pixels: vec![1.0; height * width * 3] }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer size mismatch");
        Canvas { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    /// Mean over pixels and channels of the squared difference.
    pub fn mean_sq_distance(&self, other: &Canvas) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(other.pixels.iter()) {
            let d = a - b;
            acc += d * d;
        }
        acc / self.pixels.len() as f64
    }

    /// Mean over pixels and channels of the absolute difference.
    pub fn mean_abs_distance(&self, other: &Canvas) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(other.pixels.iter()) {
            acc += (a - b).abs();
        }
        acc / self.pixels.len() as f64
    }

    pub fn in_bounds(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    /// Exactly 3 control points: start, mid, end.
    QuadraticBezier,
    /// Piecewise cubic through >= 2 control points (uniform Catmull-Rom).
    InterpolatingSpline,
}

/// One brush stroke to deposit on a canvas.
///
/// Control points are in normalized [0,1]^2 canvas coordinates; points outside
/// are allowed and clipped at the pixel level. Thickness is the brush radius
/// in pixels at render resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeSpec {
    pub control_points: Vec<Point>,
    pub curve_kind: CurveKind,
    pub thickness: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl StrokeSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        match self.curve_kind {
            CurveKind::QuadraticBezier if self.control_points.len() != 3 => {
                return Err(RenderError::InvalidStroke(format!(
                    "quadratic Bézier requires exactly 3 control points, got {}",
                    self.control_points.len()
                )));
            }
            CurveKind::InterpolatingSpline if self.control_points.len() < 2 => {
                return Err(RenderError::InvalidStroke(format!(
                    "interpolating spline requires >= 2 control points, got {}",
                    self.control_points.len()
                )));
            }
            _ => {}
        }
        if self.control_points.iter().any(|p| !p.is_finite()) {
            return Err(RenderError::InvalidStroke("non-finite control point".into()));
        }
        if !(self.thickness > 0.0) || !self.thickness.is_finite() {
            return Err(RenderError::InvalidStroke(format!(
                "thickness must be positive and finite, got {}",
                self.thickness
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(RenderError::InvalidStroke(format!("color out of [0,1]: {:?}", self.color)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(RenderError::InvalidStroke(format!("opacity out of [0,1]: {}", self.opacity)));
        }
        Ok(())
    }
}

/// Dab engine knobs. These stand in for the brush variation of the original
/// environments; no equivalence to any particular paint program is claimed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrushConfig {
    /// Edge falloff exponent; 0 is a hard disc.
    pub dab_hardness: f64,
    /// Arc-length spacing between dab centers, as a fraction of the radius.
    pub dab_spacing_fraction: f64,
    /// Antialiasing subdivision factor per pixel axis.
    pub supersample: u32,
}

impl Default for BrushConfig {
    fn default() -> Self {
        BrushConfig { dab_hardness: 0.0, dab_spacing_fraction: 0.25, supersample: 4 }
    }
}

impl BrushConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.dab_hardness >= 0.0) || !self.dab_hardness.is_finite() {
            return Err(RenderError::InvalidStroke(format!(
                "dab_hardness must be >= 0, got {}",
                self.dab_hardness
            )));
        }
        if !(self.dab_spacing_fraction > 0.0 && self.dab_spacing_fraction <= 1.0) {
            return Err(RenderError::InvalidStroke(format!(
                "dab_spacing_fraction must be in (0, 1], got {}",
                self.dab_spacing_fraction
            )));
        }
        if self.supersample < 1 {
            return Err(RenderError::InvalidStroke("supersample must be >= 1".into()));
        }
        Ok(())
    }
}

/// Evaluates the stroke's curve at `t` in [0, 1], in normalized coordinates.
pub fn eval_curve(spec: &StrokeSpec, t: f64) -> Result<Point, RenderError> {
    spec.validate()?;
    let t = t.clamp(0.0, 1.0);
    Ok(match spec.curve_kind {
        CurveKind::QuadraticBezier => quadratic_bezier(
            spec.control_points[0],
            spec.control_points[1],
            spec.control_points[2],
            t,
        ),
        CurveKind::InterpolatingSpline => catmull_rom(&spec.control_points, t),
    })
}

/// Arc length of the stroke's curve in normalized units (penalties are
/// charged per unit of this length).
pub fn stroke_arc_length(spec: &StrokeSpec) -> Result<f64, RenderError> {
    spec.validate()?;
    let spec = spec.clone();
    Ok(polyline_arc_length(
        move |t| eval_curve(&spec, t).expect("validated above"),
        ARC_SAMPLES,
    ))
}

/// Polyline resolution used for both arc length and dab placement.
pub const ARC_SAMPLES: usize = 1024;

/// White canvas of the given size.
pub fn composite_blank(height: usize, width: usize) -> Canvas {
    Canvas::white(height, width)
}

/// Rasterizes one stroke onto a copy of `canvas` and returns it.
///
/// Dabs of radius `spec.thickness` are stamped at arc-length spacing
/// `brush.dab_spacing_fraction * thickness` along the curve; each dab
/// alpha-composites `spec.color` with per-pixel coverage from supersampling
/// and hardness falloff, scaled by `spec.opacity`.
pub fn rasterize(canvas: &Canvas, spec: &StrokeSpec, brush: &BrushConfig) -> Result<Canvas, RenderError> {
    spec.validate()?;
    brush.validate()?;
    let mut out = canvas.clone();
    if spec.opacity == 0.0 {
        return Ok(out);
    }

    let w = canvas.width as f64;
    let h = canvas.height as f64;
    // Curve in pixel space.
    let pix = |t: f64| -> Point {
        let p = match spec.curve_kind {
            CurveKind::QuadraticBezier => {
                quadratic_bezier(spec.control_points[0], spec.control_points[1], spec.control_points[2], t)
            }
            CurveKind::InterpolatingSpline => catmull_rom(&spec.control_points, t),
        };
        Point::new(p.x * w, p.y * h)
    };

    let spacing = brush.dab_spacing_fraction * spec.thickness;
    let mut since_last = 0.0;
    let mut prev = pix(0.0);
    stamp_dab(&mut out, prev, spec, brush);
    for i in 1..=ARC_SAMPLES {
        let p = pix(i as f64 / ARC_SAMPLES as f64);
        since_last += prev.dist(p);
        prev = p;
        if since_last >= spacing {
            stamp_dab(&mut out, p, spec, brush);
            since_last = 0.0;
        }
    }
    // End cap so the stroke always reaches its final control point.
    if since_last > 1e-12 {
        stamp_dab(&mut out, prev, spec, brush);
    }
    Ok(out)
}

fn stamp_dab(canvas: &mut Canvas, center: Point, spec: &StrokeSpec, brush: &BrushConfig) {
    let r = spec.thickness;
    let ss = brush.supersample as usize;
    let inv_ss2 = 1.0 / (ss * ss) as f64;
    let row_lo = (center.y - r - 1.0).floor().clamp(0.0, canvas.height as f64) as usize;
    let row_hi = (center.y + r + 1.0).ceil().clamp(0.0, canvas.height as f64) as usize;
    let col_lo = (center.x - r - 1.0).floor().clamp(0.0, canvas.width as f64) as usize;
    let col_hi = (center.x + r + 1.0).ceil().clamp(0.0, canvas.width as f64) as usize;
    if row_lo >= row_hi || col_lo >= col_hi {
        return;
    }
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let mut coverage = 0.0;
            for sy in 0..ss {
                let y = row as f64 + (sy as f64 + 0.5) / ss as f64;
                for sx in 0..ss {
                    let x = col as f64 + (sx as f64 + 0.5) / ss as f64;
                    let d = center.dist(Point::new(x, y));
                    if d <= r {
                        coverage += if brush.dab_hardness == 0.0 {
                            1.0
                        } else {
                            let q = 1.0 - (d / r) * (d / r);
                            q.powf(brush.dab_hardness)
                        };
                    }
                }
            }
            if coverage == 0.0 {
                continue;
            }
            let alpha = spec.opacity * coverage * inv_ss2;
            let prev = canvas.get(row, col);
            let mut next = [0.0; 3];
            for c in 0..3 {
                next[c] = (alpha * spec.color[c] + (1.0 - alpha) * prev[c]).clamp(0.0, 1.0);
            }
            canvas.set(row, col, next);
        }
    }
}
