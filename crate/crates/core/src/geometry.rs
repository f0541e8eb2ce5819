//! Planar geometry used by the parking simulator.
//!
//! Polygons are stored counterclockwise and carry a convex decomposition so
//! that clipping, overlap and separating-axis tests only ever see convex
//! pieces. Occupancy grids are rasterized conservatively from obstacle
//! polygons (plus the outside of the scene boundary) and turned into a
//! distance field normalized by a safety distance.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has a non-finite vertex")]
    NonFinite,
    #[error("polygon is degenerate (area {0:.3e})")]
    Degenerate(f64),
    #[error("polygon is self-intersecting (edges {0} and {1})")]
    SelfIntersecting(usize, usize),
    #[error("invalid footprint dimensions: length {length}, width {width}, rear overhang {rear_overhang}")]
    InvalidFootprint {
        length: f64,
        width: f64,
        rear_overhang: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn from_angle(a: f64) -> Self {
        Self::new(a.cos(), a.sin())
    }

    pub fn rotate(self, a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Vehicle pose at the rear-axle center. Heading is kept in `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn heading(&self) -> Point {
        Point::from_angle(self.psi)
    }

    /// Bitwise equality, used by rollback checks.
    pub fn bit_eq(&self, o: &Pose2D) -> bool {
        self.x.to_bits() == o.x.to_bits()
            && self.y.to_bits() == o.y.to_bits()
            && self.psi.to_bits() == o.psi.to_bits()
    }
}

/// Simple counterclockwise polygon with a cached convex decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
    parts: Vec<Vec<Point>>,
    area: f64,
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * s
}

fn is_convex_ccw(v: &[Point]) -> bool {
    let n = v.len();
    (0..n).all(|i| {
        let a = v[i];
        let b = v[(i + 1) % n];
        let c = v[(i + 2) % n];
        (b - a).cross(c - b) >= -AREA_EPS
    })
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple CCW polygon.
fn triangulate(v: &[Point]) -> Vec<Vec<Point>> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let mut out = Vec::with_capacity(v.len().saturating_sub(2));
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * v.len() * v.len() {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for i in 0..n {
            let (ia, ib, ic) = (idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]);
            let (a, b, c) = (v[ia], v[ib], v[ic]);
            if orient(a, b, c) <= AREA_EPS {
                continue;
            }
            let blocked = idx
                .iter()
                .filter(|&&j| j != ia && j != ib && j != ic)
                .any(|&j| point_in_triangle(v[j], a, b, c));
            if !blocked {
                out.push(vec![a, b, c]);
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        let tri: Vec<Point> = idx.iter().map(|&i| v[i]).collect();
        if signed_area(&tri) > AREA_EPS {
            out.push(tri);
        }
    }
    out
}

impl Polygon {
    /// Validates and normalizes a vertex list: at least three finite
    /// vertices, positive area, no self-intersection. Clockwise input is
    /// reversed.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut vertices = vertices;
        let n = vertices.len();
        let mut folded = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a1, a2) = (vertices[i], vertices[(i + 1) % n]);
                let (b1, b2) = (vertices[j], vertices[(j + 1) % n]);
                if adjacent {
                    // Adjacent edges may only share their common vertex.
                    let (far_a, far_b, shared) = if j == i + 1 {
                        (a1, b2, a2)
                    } else {
                        (a2, b1, a1)
                    };
                    if folded.is_none()
                        && orient(far_a, shared, far_b).abs() <= AREA_EPS
                        && (far_a - shared).dot(far_b - shared) > 0.0
                    {
                        folded = Some((i, j));
                    }
                    continue;
                }
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(GeometryError::SelfIntersecting(i, j));
                }
            }
        }
        let area = signed_area(&vertices);
        if area.abs() <= AREA_EPS {
            return Err(GeometryError::Degenerate(area));
        }
        if let Some((i, j)) = folded {
            return Err(GeometryError::SelfIntersecting(i, j));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let parts = if is_convex_ccw(&vertices) {
            vec![vertices.clone()]
        } else {
            triangulate(&vertices)
        };
        Ok(Self {
            vertices,
            parts,
            area: area.abs(),
        })
    }

    /// Builds a polygon from vertices known to be convex and counterclockwise.
    fn convex_unchecked(vertices: Vec<Point>) -> Self {
        let area = signed_area(&vertices);
        Self {
            parts: vec![vertices.clone()],
            vertices,
            area,
        }
    }

    pub fn rectangle(min: Point, max: Point) -> Result<Self, GeometryError> {
        Self::new(vec![
            min,
            Point::new(max.x, min.y),
            max,
            Point::new(min.x, max.y),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn convex_parts(&self) -> &[Vec<Point>] {
        &self.parts
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn is_convex(&self) -> bool {
        self.parts.len() == 1
    }

    pub fn centroid(&self) -> Point {
        let v = &self.vertices;
        let n = v.len();
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            let c = a.cross(b);
            cx += (a.x + b.x) * c;
            cy += (a.y + b.y) * c;
        }
        let k = 1.0 / (6.0 * self.area);
        Point::new(cx * k, cy * k)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bbox(&self.vertices)
    }

    /// Crossing-number containment; points on the boundary count as inside.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if orient(a, b, p).abs() <= 1e-12 && on_segment(a, b, p) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance from `p` to the polygon region (0 inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Area of `self ∩ other`.
    pub fn intersection_area(&self, other: &Polygon) -> f64 {
        let mut total = 0.0;
        for a in &self.parts {
            for b in &other.parts {
                if !bbox_overlap(bbox(a), bbox(b)) {
                    continue;
                }
                let clipped = clip_convex(a, b);
                if clipped.len() >= 3 {
                    total += signed_area(&clipped).max(0.0);
                }
            }
        }
        total
    }

    /// True when the interiors overlap (touching boundaries do not count).
    pub fn overlaps(&self, other: &Polygon) -> bool {
        self.parts.iter().any(|a| {
            other
                .parts
                .iter()
                .any(|b| bbox_overlap(bbox(a), bbox(b)) && convex_overlap(a, b))
        })
    }
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

fn bbox(v: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in v {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

fn bbox_overlap(a: (Point, Point), b: (Point, Point)) -> bool {
    a.0.x <= b.1.x && b.0.x <= a.1.x && a.0.y <= b.1.y && b.0.y <= a.1.y
}

/// Sutherland–Hodgman clipping of convex `subject` by convex CCW `clip`.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (c0, c1) = (clip[i], clip[(i + 1) % m]);
        let edge = c1 - c0;
        let input = std::mem::take(&mut output);
        let k = input.len();
        for j in 0..k {
            let cur = input[j];
            let prev = input[(j + k - 1) % k];
            let dc = edge.cross(cur - c0);
            let dp = edge.cross(prev - c0);
            if dc >= 0.0 {
                if dp < 0.0 {
                    output.push(prev + (cur - prev) * (dp / (dp - dc)));
                }
                output.push(cur);
            } else if dp >= 0.0 {
                output.push(prev + (cur - prev) * (dp / (dp - dc)));
            }
        }
    }
    output
}

fn project(v: &[Point], axis: Point) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test with strictly positive penetration.
fn convex_overlap(a: &[Point], b: &[Point]) -> bool {
    for poly in [a, b] {
        let n = poly.len();
        for i in 0..n {
            let e = poly[(i + 1) % n] - poly[i];
            let axis = Point::new(-e.y, e.x);
            let len = axis.norm();
            if len == 0.0 {
                continue;
            }
            let axis = axis * (1.0 / len);
            let (a0, a1) = project(a, axis);
            let (b0, b1) = project(b, axis);
            if a1 <= b0 + 1e-9 || b1 <= a0 + 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Overlap score: intersection area over the smaller of the two areas.
pub fn overlap_score(a: &Polygon, b: &Polygon) -> Result<f64, GeometryError> {
    let (sa, sb) = (a.area(), b.area());
    if sa <= 0.0 || sb <= 0.0 {
        return Err(GeometryError::Degenerate(sa.min(sb)));
    }
    let inter = a.intersection_area(b);
    Ok((inter / sa.min(sb)).clamp(0.0, 1.0))
}

/// Oriented vehicle rectangle around the rear-axle pose.
pub fn footprint(
    pose: &Pose2D,
    length: f64,
    width: f64,
    rear_overhang: f64,
) -> Result<Polygon, GeometryError> {
    if !(length > 0.0 && width > 0.0 && rear_overhang >= 0.0 && rear_overhang < length) {
        return Err(GeometryError::InvalidFootprint {
            length,
            width,
            rear_overhang,
        });
    }
    Ok(footprint_unchecked(pose, length, width, rear_overhang))
}

pub(crate) fn footprint_unchecked(
    pose: &Pose2D,
    length: f64,
    width: f64,
    rear_overhang: f64,
) -> Polygon {
    let (s, c) = pose.psi.sin_cos();
    let fwd = length - rear_overhang;
    let hw = 0.5 * width;
    let corner = |lx: f64, ly: f64| Point::new(pose.x + c * lx - s * ly, pose.y + s * lx + c * ly);
    Polygon::convex_unchecked(vec![
        corner(-rear_overhang, -hw),
        corner(fwd, -hw),
        corner(fwd, hw),
        corner(-rear_overhang, hw),
    ])
}

/// Distance along a ray to the first of `segments`, clamped to `max_range`.
pub fn ray_cast_segments(
    segments: &[(Point, Point)],
    origin: Point,
    angle: f64,
    max_range: f64,
) -> f64 {
    let d = Point::from_angle(angle);
    let mut best = max_range;
    for &(p, q) in segments {
        let e = q - p;
        let denom = d.cross(e);
        if denom.abs() < 1e-15 {
            continue;
        }
        let w = p - origin;
        let t = w.cross(e) / denom;
        let s = w.cross(d) / denom;
        if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) && t < best {
            best = t;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Point,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(
        origin: Point,
        resolution: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GeometryError::InvalidGrid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidGrid("grid has no cells".into()));
        }
        Ok(Self {
            origin,
            resolution,
            width,
            height,
            cells: vec![false; width * height],
        })
    }

    /// Grid covering `lo..hi` (expanded by `margin`).
    pub fn covering(lo: Point, hi: Point, margin: f64, resolution: f64) -> Result<Self, GeometryError> {
        let origin = Point::new(lo.x - margin, lo.y - margin);
        let w = ((hi.x - lo.x + 2.0 * margin) / resolution).ceil() as usize;
        let h = ((hi.y - lo.y + 2.0 * margin) / resolution).ceil() as usize;
        Self::empty(origin, resolution, w.max(1), h.max(1))
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, occupied: bool) {
        self.cells[iy * self.width + ix] = occupied;
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point {
        Point::new(
            self.origin.x + (ix as f64 + 0.5) * self.resolution,
            self.origin.y + (iy as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fy = (p.y - self.origin.y) / self.resolution;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.width && iy < self.height).then_some((ix, iy))
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn cell_square(&self, ix: usize, iy: usize) -> Vec<Point> {
        let x0 = self.origin.x + ix as f64 * self.resolution;
        let y0 = self.origin.y + iy as f64 * self.resolution;
        let r = self.resolution;
        vec![
            Point::new(x0, y0),
            Point::new(x0 + r, y0),
            Point::new(x0 + r, y0 + r),
            Point::new(x0, y0 + r),
        ]
    }

    fn index_range(&self, lo: Point, hi: Point) -> (usize, usize, usize, usize) {
        let r = self.resolution;
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (
            clampi((lo.x - self.origin.x) / r, self.width),
            clampi((hi.x - self.origin.x) / r, self.width),
            clampi((lo.y - self.origin.y) / r, self.height),
            clampi((hi.y - self.origin.y) / r, self.height),
        )
    }

    /// Marks every cell whose square overlaps `poly` with positive area.
    pub fn rasterize_polygon(&mut self, poly: &Polygon) {
        for part in poly.convex_parts() {
            let (lo, hi) = bbox(part);
            let (x0, x1, y0, y1) = self.index_range(lo, hi);
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    if !self.get(ix, iy) && convex_overlap(&self.cell_square(ix, iy), part) {
                        self.set(ix, iy, true);
                    }
                }
            }
        }
    }

    /// Marks every cell not entirely inside `boundary`.
    pub fn rasterize_outside(&mut self, boundary: &Polygon) {
        let cell_area = self.resolution * self.resolution;
        for iy in 0..self.height {
            for ix in 0..self.width {
                if self.get(ix, iy) {
                    continue;
                }
                let sq = Polygon::convex_unchecked(self.cell_square(ix, iy));
                let inside = sq.intersection_area(boundary);
                if inside < cell_area * (1.0 - 1e-9) {
                    self.set(ix, iy, true);
                }
            }
        }
    }
}

/// Distance field normalized by a safety distance: 0 on occupied cells, 1 at
/// or beyond `d0` of clearance.
#[derive(Clone, Debug, PartialEq)]
pub struct EsdfGrid {
    pub origin: Point,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub d0: f64,
    values: Vec<f64>,
}

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // The envelope so far holds only an infinite parabola; replace it.
                v[k] = q;
                z[k] = f64::NEG_INFINITY;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let qf = q as f64;
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = qf - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact Euclidean distance transform between cell centers, clamped and
/// normalized by `d0`.
pub fn build_esdf(grid: &OccupancyGrid, d0: f64) -> Result<EsdfGrid, GeometryError> {
    if !(d0 > 0.0 && d0.is_finite()) {
        return Err(GeometryError::InvalidGrid(format!(
            "safety distance must be positive, got {d0}"
        )));
    }
    let (w, h) = (grid.width, grid.height);
    let mut sq: Vec<f64> = grid
        .cells
        .iter()
        .map(|&c| if c { 0.0 } else { f64::INFINITY })
        .collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for iy in 0..h {
        f[..w].copy_from_slice(&sq[iy * w..(iy + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        sq[iy * w..(iy + 1) * w].copy_from_slice(&out[..w]);
    }
    for ix in 0..w {
        for iy in 0..h {
            f[iy] = sq[iy * w + ix];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for iy in 0..h {
            sq[iy * w + ix] = out[iy];
        }
    }
    let values = sq
        .into_iter()
        .map(|d2| (d2.sqrt() * grid.resolution).min(d0) / d0)
        .collect();
    Ok(EsdfGrid {
        origin: grid.origin,
        resolution: grid.resolution,
        width: w,
        height: h,
        d0,
        values,
    })
}

impl EsdfGrid {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Bilinear lookup over cell centers; points outside the grid are fully clear.
    pub fn query(&self, p: Point) -> f64 {
        let r = self.resolution;
        let fx = (p.x - self.origin.x) / r;
        let fy = (p.y - self.origin.y) / r;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= self.width as f64 && fy <= self.height as f64) {
            return 1.0;
        }
        let gx = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let gy = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (gx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (gx - x0 as f64).clamp(0.0, 1.0);
        let ty = (gy - y0 as f64).clamp(0.0, 1.0);
        let v00 = self.value(x0, y0);
        let v10 = self.value(x1, y0);
        let v01 = self.value(x0, y1);
        let v11 = self.value(x1, y1);
        let a = v00 + (v10 - v00) * tx;
        let b = v01 + (v11 - v01) * tx;
        a + (b - a) * ty
    }
}
