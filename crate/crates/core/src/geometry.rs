//! Planar geometry on slice coordinates: points, quadrilaterals, convex
//! clipping and intersection-over-union.
//!
//! Points are `(row, col)` in pixel units. For orientation tests the column is
//! treated as `x` and the row as `y`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Areas at or below this are treated as degenerate.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }

    pub fn add(self, d_row: f64, d_col: f64) -> Point {
        Point::new(self.row + d_row, self.col + d_col)
    }

    /// Rounded to the nearest pixel, `None` when outside `[0,h)×[0,w)`.
    pub fn to_pixel(self, h: usize, w: usize) -> Option<(usize, usize)> {
        let r = self.row.round();
        let c = self.col.round();
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("polygon has zero area")]
    ZeroArea,
}

/// Signed shoelace area with `x = col`, `y = row`.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.col * b.row - b.col * a.row;
    }
    0.5 * acc
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn centroid_of_vertices(poly: &[Point]) -> Point {
    let n = poly.len() as f64;
    let (r, c) = poly
        .iter()
        .fold((0.0, 0.0), |(r, c), p| (r + p.row, c + p.col));
    Point::new(r / n, c / n)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.col - o.col) * (b.row - o.row) - (a.row - o.row) * (b.col - o.col)
}

/// Convex hull by monotone chain, counter-clockwise in the `(col,row)` frame,
/// collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| {
        a.col
            .total_cmp(&b.col)
            .then_with(|| a.row.total_cmp(&b.row))
    });
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn is_convex_ccw(poly: &[Point]) -> bool {
    let n = poly.len();
    n >= 3 && (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]) > 0.0)
}

/// Counter-clockwise convex version of `poly`: the polygon itself when it is
/// already convex, its hull otherwise.
pub fn convexify(poly: &[Point]) -> Vec<Point> {
    let mut p = poly.to_vec();
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    if is_convex_ccw(&p) {
        p
    } else {
        convex_hull(poly)
    }
}

fn line_intersection(s: Point, e: Point, a: Point, b: Point) -> Point {
    // Intersection of segment s→e with the infinite line a→b.
    let d1 = cross(a, b, s);
    let d2 = cross(a, b, e);
    let t = d1 / (d1 - d2);
    Point::new(s.row + t * (e.row - s.row), s.col + t * (e.col - s.col))
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection-over-union of two simple polygons. Non-convex inputs are
/// replaced by their convex hull.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> Result<f64, GeometryError> {
    let ca = convexify(a);
    let cb = convexify(b);
    let area_a = area(&ca);
    let area_b = area(&cb);
    if area_a <= AREA_EPS || area_b <= AREA_EPS {
        return Err(GeometryError::ZeroArea);
    }
    let inter = area(&clip_convex(&ca, &cb));
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Even-odd point-in-polygon test; boundary points count as inside.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        // On-edge check.
        let c = cross(a, b, p);
        if c.abs() <= 1e-12
            && p.col >= a.col.min(b.col) - 1e-12
            && p.col <= a.col.max(b.col) + 1e-12
            && p.row >= a.row.min(b.row) - 1e-12
            && p.row <= a.row.max(b.row) + 1e-12
        {
            return true;
        }
        if (a.row > p.row) != (b.row > p.row) {
            let x = a.col + (p.row - a.row) / (b.row - a.row) * (b.col - a.col);
            if p.col < x {
                inside = !inside;
            }
        }
    }
    inside
}
