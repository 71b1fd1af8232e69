//! Curve geometry for brush strokes.
//!
//! Two curve families are supported: a fixed quadratic Bézier (start, mid,
//! end) and an interpolating spline through an arbitrary list of control
//! points. The spline is a uniform Catmull-Rom piecewise cubic, converted per
//! segment to cubic Bézier form for evaluation, so it passes through every
//! control point without solving a system.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn lerp(a: Point, b: Point, t: f64) -> Point {
        Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
    }

    pub fn dist(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Evaluates a quadratic Bézier with control points `p0, p1, p2` at `t`.
pub fn quadratic_bezier(p0: Point, p1: Point, p2: Point, t: f64) -> Point {
    let u = 1.0 - t;
    let w0 = u * u;
    let w1 = 2.0 * t * u;
    let w2 = t * t;
    Point::new(
        w0 * p0.x + w1 * p1.x + w2 * p2.x,
        w0 * p0.y + w1 * p1.y + w2 * p2.y,
    )
}

/// Evaluates a cubic Bézier via de Casteljau subdivision.
pub fn cubic_bezier(b: [Point; 4], t: f64) -> Point {
    let q0 = Point::lerp(b[0], b[1], t);
    let q1 = Point::lerp(b[1], b[2], t);
    let q2 = Point::lerp(b[2], b[3], t);
    let r0 = Point::lerp(q0, q1, t);
    let r1 = Point::lerp(q1, q2, t);
    Point::lerp(r0, r1, t)
}

/// Catmull-Rom tangents with uniform parameterization and clamped endpoints.
fn catmull_rom_tangents(points: &[Point]) -> Vec<Point> {
    let n = points.len();
    let mut m = Vec::with_capacity(n);
    for i in 0..n {
        let prev = if i == 0 { points[0] } else { points[i - 1] };
        let next = if i + 1 == n { points[n - 1] } else { points[i + 1] };
        m.push(Point::new((next.x - prev.x) * 0.5, (next.y - prev.y) * 0.5));
    }
    m
}

/// Cubic Bézier control points for segment `i` of the Catmull-Rom spline.
pub fn catmull_rom_segment(points: &[Point], i: usize) -> [Point; 4] {
    let m = catmull_rom_tangents(points);
    let p0 = points[i];
    let p1 = points[i + 1];
    [
        p0,
        Point::new(p0.x + m[i].x / 3.0, p0.y + m[i].y / 3.0),
        Point::new(p1.x - m[i + 1].x / 3.0, p1.y - m[i + 1].y / 3.0),
        p1,
    ]
}

/// Evaluates the interpolating spline through `points` at global `t` in
/// [0, 1], with `t` mapped uniformly over the segments. A single point is a
/// degenerate curve pinned at that point.
pub fn catmull_rom(points: &[Point], t: f64) -> Point {
    match points.len() {
        0 => panic!("catmull_rom requires at least one point"),
        1 => points[0],
        n => {
            let nseg = (n - 1) as f64;
            let scaled = (t * nseg).clamp(0.0, nseg);
            let mut seg = scaled.floor() as usize;
            if seg >= n - 1 {
                seg = n - 2;
            }
            let local = scaled - seg as f64;
            cubic_bezier(catmull_rom_segment(points, seg), local)
        }
    }
}

/// Approximates a curve's arc length with a fixed-resolution polyline.
///
/// `eval` maps t in [0,1] to a point; `samples` is the number of segments.
pub fn polyline_arc_length(eval: impl Fn(f64) -> Point, samples: usize) -> f64 {
    let mut total = 0.0;
    let mut prev = eval(0.0);
    for i in 1..=samples {
        let p = eval(i as f64 / samples as f64);
        total += prev.dist(p);
        prev = p;
    }
    total
}
