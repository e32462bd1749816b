//! 2-D scene geometry: bounding boxes, reflective wall segments, blocking
//! obstacles, and anchor positions.
//!
//! All coordinates are meters. Obstacles are axis-aligned rectangles that
//! block line-of-sight paths and act as diffuse scatterers; walls are line
//! segments that produce first-order specular reflections but do not block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 2-D point or vector, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, other: Point) -> (f64, f64) {
        (self.x - other.x, self.y - other.y)
    }
}

/// Agent state at one timestep: position plus velocity, both in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestep: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Pose {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Axis-aligned rectangle. `min` is the lower-left corner, `max` upper-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self { min_x, min_y, max_x, max_y }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))
    }

    /// Closed containment: boundary points count as inside.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    /// Euclidean distance from `p` to the rectangle (0 inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        let dx = (self.min_x - p.x).max(0.0).max(p.x - self.max_x);
        let dy = (self.min_y - p.y).max(0.0).max(p.y - self.max_y);
        dx.hypot(dy)
    }

    /// True when the open segment a-b passes through the rectangle interior.
    ///
    /// Grazing contact (sliding along an edge, touching a corner) has zero
    /// chord length and does not count as blocking. Liang-Barsky clipping.
    pub fn blocks_segment(&self, a: Point, b: Point) -> bool {
        let (dx, dy) = b.sub(a);
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for (p0, d, lo, hi) in [
            (a.x, dx, self.min_x, self.max_x),
            (a.y, dy, self.min_y, self.max_y),
        ] {
            if d == 0.0 {
                if p0 <= lo || p0 >= hi {
                    return false;
                }
            } else {
                let ta = (lo - p0) / d;
                let tb = (hi - p0) / d;
                let (ta, tb) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        t1 - t0 > 1e-12
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.min_x < self.max_x && self.min_y < self.max_y)
            || !self.min_x.is_finite()
            || !self.min_y.is_finite()
            || !self.max_x.is_finite()
            || !self.max_y.is_finite()
        {
            return Err(GeometryError::DegenerateRect(*self));
        }
        Ok(())
    }
}

/// Reflective wall segment from `a` to `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
}

impl Wall {
    pub fn new(a: Point, b: Point) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Mirror image of `p` across the infinite line through this wall.
    pub fn mirror(&self, p: Point) -> Point {
        let (wx, wy) = self.b.sub(self.a);
        let len2 = wx * wx + wy * wy;
        let (px, py) = p.sub(self.a);
        let t = (px * wx + py * wy) / len2;
        let foot = Point::new(self.a.x + t * wx, self.a.y + t * wy);
        Point::new(2.0 * foot.x - p.x, 2.0 * foot.y - p.y)
    }

    /// Signed side of `p` relative to the wall line (sign of the 2-D cross
    /// product). Zero means `p` lies on the line.
    fn side(&self, p: Point) -> f64 {
        let (wx, wy) = self.b.sub(self.a);
        let (px, py) = p.sub(self.a);
        wx * py - wy * px
    }

    /// First-order specular bounce point for a transmitter at `src` and a
    /// receiver at `dst`, if one exists on this wall.
    ///
    /// Valid only when both endpoints sit strictly on the same side of the
    /// wall line and the mirrored ray crosses within the physical segment.
    /// Returns the bounce point and the total path length
    /// `|src-q| + |q-dst| = |mirror(src) - dst|`.
    pub fn specular_bounce(&self, src: Point, dst: Point) -> Option<(Point, f64)> {
        let s_src = self.side(src);
        let s_dst = self.side(dst);
        if s_src * s_dst <= 0.0 {
            return None;
        }
        let image = self.mirror(src);
        // Intersection of segment dst->image with the wall segment a->b.
        let (rx, ry) = image.sub(dst);
        let (wx, wy) = self.b.sub(self.a);
        let denom = rx * wy - ry * wx;
        if denom.abs() < 1e-15 {
            return None;
        }
        let (ax, ay) = self.a.sub(dst);
        // dst + t*(image-dst) == a + u*(b-a)
        let t = (ax * wy - ay * wx) / denom;
        let u = (ax * ry - ay * rx) / denom;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&t) {
            return None;
        }
        let q = Point::new(self.a.x + u * wx, self.a.y + u * wy);
        Some((q, image.dist(dst)))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.length() <= 0.0 || !self.length().is_finite() {
            return Err(GeometryError::DegenerateWall(*self));
        }
        Ok(())
    }
}

/// Fixed transceiver position s_j. Anchors are identified by their index in
/// [`Environment::anchors`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
}

impl Anchor {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Complete static scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Rect,
    #[serde(default)]
    pub walls: Vec<Wall>,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    pub anchors: Vec<Anchor>,
}

impl Environment {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.bounds.validate()?;
        if self.anchors.is_empty() {
            return Err(GeometryError::NoAnchors);
        }
        for a in &self.anchors {
            if !self.bounds.contains(a.position()) {
                return Err(GeometryError::AnchorOutOfBounds(a.position()));
            }
        }
        for w in &self.walls {
            w.validate()?;
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        Ok(())
    }

    /// True when some obstacle interrupts the open segment a-b.
    pub fn segment_blocked(&self, a: Point, b: Point) -> bool {
        self.obstacles.iter().any(|o| o.blocks_segment(a, b))
    }

    /// Number of obstacles within `radius` of `p` (boundary distance).
    pub fn obstacles_near(&self, p: Point, radius: f64) -> usize {
        self.obstacles.iter().filter(|o| o.distance_to(p) <= radius).count()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rectangle {0:?} has no positive area")]
    DegenerateRect(Rect),
    #[error("wall {0:?} has no positive length")]
    DegenerateWall(Wall),
    #[error("environment has no anchors")]
    NoAnchors,
    #[error("anchor at ({}, {}) lies outside bounds", .0.x, .0.y)]
    AnchorOutOfBounds(Point),
}
