//! Rotated-box primitives in image space.
//!
//! Image coordinates are continuous pixels: pixel `(u, v)` covers the square
//! `[u, u+1) x [v, v+1)` and its center is `(u + 0.5, v + 0.5)`. The `x` axis
//! points right and `y` points down. Angles are radians measured from `+x`
//! towards `+y`.
//!
//! A [`RotatedBox`] is always stored in canonical form: `w >= h` and
//! `theta` in `[0, pi)`, where `theta` is the direction of the long side.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vertices closer than this are merged when building a polygon.
const VERTEX_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("polygon needs at least 3 non-collinear vertices")]
    DegeneratePolygon,
    #[error("unknown brick class `{0}`")]
    UnknownClass(String),
}

/// Brick colour class. Background is not a class; it is the absence of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrickClass {
    Blue,
    Green,
}

impl BrickClass {
    pub const ALL: [BrickClass; 2] = [BrickClass::Blue, BrickClass::Green];

    pub fn as_str(self) -> &'static str {
        match self {
            BrickClass::Blue => "blue",
            BrickClass::Green => "green",
        }
    }

    pub fn index(self) -> usize {
        match self {
            BrickClass::Blue => 0,
            BrickClass::Green => 1,
        }
    }
}

impl fmt::Display for BrickClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BrickClass {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blue" => Ok(BrickClass::Blue),
            "green" => Ok(BrickClass::Green),
            other => Err(GeomError::UnknownClass(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

#[allow(clippy::should_implement_trait)]
impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }
}

/// Oriented rectangle in image space with a class label and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(rename = "class")]
    pub class_id: BrickClass,
    pub score: f64,
}

#[derive(Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
    class: BrickClass,
    #[serde(default = "default_score")]
    score: f64,
}

fn default_score() -> f64 {
    1.0
}

impl TryFrom<RawBox> for RotatedBox {
    type Error = GeomError;

    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        RotatedBox::new(r.cx, r.cy, r.w, r.h, r.theta, r.class, r.score)
    }
}

/// Wraps an angle into `[0, period)`.
fn wrap(angle: f64, period: f64) -> f64 {
    let a = angle.rem_euclid(period);
    // rem_euclid can round up to exactly `period`
    if a >= period {
        0.0
    } else {
        a
    }
}

impl RotatedBox {
    /// Builds a box and normalizes it to canonical form.
    pub fn new(
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        theta: f64,
        class_id: BrickClass,
        score: f64,
    ) -> Result<Self, GeomError> {
        if ![cx, cy, w, h, theta, score].iter().all(|v| v.is_finite()) {
            return Err(GeomError::InvalidBox("non-finite parameter".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::InvalidBox(format!("non-positive size {w} x {h}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(GeomError::InvalidBox(format!("score {score} outside [0, 1]")));
        }
        let (w, h, theta) = if w < h { (h, w, theta + FRAC_PI_2) } else { (w, h, theta) };
        // a square is invariant under quarter turns
        let theta = if w == h { wrap(theta, FRAC_PI_2) } else { wrap(theta, PI) };
        Ok(Self { cx, cy, w, h, theta, class_id, score })
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Unit vectors along the long and short sides.
    pub fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.theta.sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    /// True when the sides are parallel to the image axes.
    pub fn is_axis_aligned(&self) -> bool {
        let r = self.theta.rem_euclid(FRAC_PI_2);
        r < 1e-12 || FRAC_PI_2 - r < 1e-12
    }

    /// Inclusive point containment, tolerant to `eps` pixels.
    pub fn contains(&self, p: Point2, eps: f64) -> bool {
        let (a, b) = self.axes();
        let d = p.sub(self.center());
        d.dot(a).abs() <= self.w / 2.0 + eps && d.dot(b).abs() <= self.h / 2.0 + eps
    }
}

/// Convex polygon with counter-clockwise vertices (positive shoelace area).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Validates and normalizes a convex vertex loop. Clockwise input is
    /// reversed; duplicate and collinear vertices are dropped.
    pub fn new(points: Vec<Point2>) -> Result<Self, GeomError> {
        let mut pts: Vec<Point2> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().is_none_or(|q: &Point2| q.dist(p) > VERTEX_EPS) {
                pts.push(p);
            }
        }
        while pts.len() > 1 && pts[0].dist(*pts.last().unwrap()) <= VERTEX_EPS {
            pts.pop();
        }
        if pts.len() < 3 {
            return Err(GeomError::DegeneratePolygon);
        }
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        // drop collinear vertices, then check every turn is strictly left
        let mut changed = true;
        while changed && pts.len() >= 3 {
            changed = false;
            let n = pts.len();
            for i in 0..n {
                let a = pts[(i + n - 1) % n];
                let b = pts[i];
                let c = pts[(i + 1) % n];
                let scale = a.dist(b).max(b.dist(c)).max(1.0);
                if b.sub(a).cross(c.sub(b)).abs() <= 1e-12 * scale * scale {
                    pts.remove(i);
                    changed = true;
                    break;
                }
            }
        }
        if pts.len() < 3 {
            return Err(GeomError::DegeneratePolygon);
        }
        let n = pts.len();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            let c = pts[(i + 2) % n];
            if b.sub(a).cross(c.sub(b)) <= 0.0 {
                return Err(GeomError::DegenerateInput("polygon is not convex".into()));
            }
        }
        Ok(Self { vertices: pts })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    /// Inclusive containment with tolerance `eps` pixels.
    pub fn contains(&self, p: Point2, eps: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let e = b.sub(a);
            e.cross(p.sub(a)) / e.norm() >= -eps
        })
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        self.vertices.iter().fold(
            (Point2::new(f64::INFINITY, f64::INFINITY), Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
            |(lo, hi), p| (Point2::new(lo.x.min(p.x), lo.y.min(p.y)), Point2::new(hi.x.max(p.x), hi.y.max(p.y))),
        )
    }

    /// Area of the intersection with another convex polygon
    /// (Sutherland-Hodgman clipping, then shoelace).
    pub fn intersection_area(&self, other: &ConvexPolygon) -> f64 {
        let clipped = clip_convex(&self.vertices, &other.vertices);
        if clipped.len() < 3 {
            0.0
        } else {
            signed_area(&clipped).max(0.0)
        }
    }
}

fn signed_area(pts: &[Point2]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        s += pts[i].cross(pts[(i + 1) % n]);
    }
    s / 2.0
}

/// Clips `subject` against every edge of the CCW convex `clip` polygon.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let edge = b.sub(a);
        let side = |p: Point2| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(segment_cut(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(segment_cut(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn segment_cut(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    p.add(q.sub(p).scale(t))
}

/// Four corners of `b`, counter-clockwise.
pub fn box_corners(b: &RotatedBox) -> ConvexPolygon {
    let (a, n) = box_axes_scaled(b);
    let c = b.center();
    let vertices = vec![c.sub(a).sub(n), c.add(a).sub(n), c.add(a).add(n), c.sub(a).add(n)];
    ConvexPolygon { vertices }
}

fn box_axes_scaled(b: &RotatedBox) -> (Point2, Point2) {
    let (u, v) = b.axes();
    (u.scale(b.w / 2.0), v.scale(b.h / 2.0))
}

/// Exact intersection-over-union of two rotated boxes. Degenerate unions give 0.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let pa = box_corners(a);
    let pb = box_corners(b);
    let inter = pa.intersection_area(&pb);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression in descending score order. Equal scores
/// keep their input order.
pub fn rotated_nms(boxes: &[RotatedBox], iou_threshold: f64) -> Vec<RotatedBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));
    let mut kept: Vec<RotatedBox> = Vec::new();
    for i in order {
        let cand = boxes[i];
        if kept.iter().all(|k| rotated_iou(k, &cand) <= iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}

/// Tightest axis-aligned box around `b`. The result is canonical, so a box
/// taller than wide comes back with `theta = pi/2`.
pub fn upright_bbox(b: &RotatedBox) -> RotatedBox {
    let (lo, hi) = box_corners(b).bounds();
    RotatedBox::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, hi.x - lo.x, hi.y - lo.y, 0.0, b.class_id, b.score)
        .expect("bounds of a valid box are non-degenerate")
}

/// Convex hull by Andrew's monotone chain. CCW, no collinear vertices.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.dist(*b) <= VERTEX_EPS);
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(b)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle via rotating calipers over the hull.
///
/// The returned box has score 1 and the given class.
pub fn min_area_rect(points: &[Point2], class_id: BrickClass) -> Result<RotatedBox, GeomError> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(GeomError::DegenerateInput(format!(
            "{} points span fewer than 3 hull vertices (collinear or repeated)",
            points.len()
        )));
    }
    let n = hull.len();
    let edge_dir = |i: usize| {
        let e = hull[(i + 1) % n].sub(hull[i]);
        e.scale(1.0 / e.norm())
    };

    // antipodal/extreme pointers for the first edge
    let u0 = edge_dir(0);
    let v0 = Point2::new(-u0.y, u0.x);
    let argmax =
        |f: &dyn Fn(Point2) -> f64| (0..n).fold(0, |best, i| if f(hull[i]) > f(hull[best]) { i } else { best });
    let mut right = argmax(&|p| p.dot(u0));
    let mut top = argmax(&|p| p.dot(v0));
    let mut left = argmax(&|p| -p.dot(u0));

    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let v = Point2::new(-u.y, u.x);
        let base = hull[i];
        while hull[(right + 1) % n].sub(hull[right]).dot(u) > 0.0 {
            right = (right + 1) % n;
        }
        while hull[(top + 1) % n].sub(hull[top]).dot(v) > 0.0 {
            top = (top + 1) % n;
        }
        while hull[(left + 1) % n].sub(hull[left]).dot(u) < 0.0 {
            left = (left + 1) % n;
        }
        let max_u = hull[right].sub(base).dot(u);
        let min_u = hull[left].sub(base).dot(u);
        let max_v = hull[top].sub(base).dot(v);
        let area = (max_u - min_u) * max_v;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let mid_u = (max_u + min_u) / 2.0;
            let c = base.add(u.scale(mid_u)).add(v.scale(max_v / 2.0));
            let theta = u.y.atan2(u.x);
            let rect = RotatedBox::new(c.x, c.y, max_u - min_u, max_v, theta, class_id, 1.0)?;
            best = Some((area, rect));
        }
    }
    Ok(best.expect("hull has at least 3 edges").1)
}

/// Corners of every pixel square in a pixel set. The hull of these encloses
/// the pixel squares, so a filled rectangular mask of `a x b` pixels yields
/// an `a x b` rectangle.
pub fn pixel_corner_points(pixels: &[(u32, u32)]) -> Vec<Point2> {
    // only the extreme pixels of each row can touch the hull
    let mut rows: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    for &(u, v) in pixels {
        let e = rows.entry(v).or_insert((u, u));
        e.0 = e.0.min(u);
        e.1 = e.1.max(u);
    }
    let mut pts = Vec::with_capacity(rows.len() * 4);
    for (&v, &(lo, hi)) in &rows {
        let (v0, v1) = (v as f64, v as f64 + 1.0);
        pts.push(Point2::new(lo as f64, v0));
        pts.push(Point2::new(lo as f64, v1));
        pts.push(Point2::new(hi as f64 + 1.0, v0));
        pts.push(Point2::new(hi as f64 + 1.0, v1));
    }
    pts
}

/// Minimum-area rectangle enclosing a pixel region.
pub fn mask_region_rect(pixels: &[(u32, u32)], class_id: BrickClass) -> Result<RotatedBox, GeomError> {
    if pixels.is_empty() {
        return Err(GeomError::DegenerateInput("empty pixel region".into()));
    }
    min_area_rect(&pixel_corner_points(pixels), class_id)
}

/// Per-pixel instance labels with a class per instance. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    labels: Vec<u16>,
    class_of: BTreeMap<u16, BrickClass>,
}

impl InstanceMask {
    pub const DEFAULT_WIDTH: u32 = 640;
    pub const DEFAULT_HEIGHT: u32 = 480;

    pub fn new(
        width: u32,
        height: u32,
        labels: Vec<u16>,
        class_of: BTreeMap<u16, BrickClass>,
    ) -> Result<Self, GeomError> {
        if labels.len() != width as usize * height as usize {
            return Err(GeomError::DegenerateInput(format!(
                "label buffer has {} entries, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l != 0 && !class_of.contains_key(&l)) {
            return Err(GeomError::DegenerateInput(format!("instance {l} has no class")));
        }
        Ok(Self { width, height, labels, class_of })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, labels: vec![0; width as usize * height as usize], class_of: BTreeMap::new() }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_map(&self) -> &BTreeMap<u16, BrickClass> {
        &self.class_of
    }

    pub fn label(&self, u: u32, v: u32) -> u16 {
        self.labels[(v * self.width + u) as usize]
    }

    pub fn class_at(&self, u: u32, v: u32) -> Option<BrickClass> {
        match self.label(u, v) {
            0 => None,
            l => self.class_of.get(&l).copied(),
        }
    }

    /// Pixel lists of every instance present in the label image, keyed by id.
    pub fn regions(&self) -> BTreeMap<u16, Vec<(u32, u32)>> {
        let mut out: BTreeMap<u16, Vec<(u32, u32)>> = BTreeMap::new();
        for v in 0..self.height {
            for u in 0..self.width {
                let l = self.label(u, v);
                if l != 0 {
                    out.entry(l).or_default().push((u, v));
                }
            }
        }
        out
    }

    /// Minimum-area rectangle of every visible instance.
    pub fn instance_boxes(&self) -> BTreeMap<u16, RotatedBox> {
        self.regions()
            .into_iter()
            .map(|(id, px)| {
                let rect = mask_region_rect(&px, self.class_of[&id]).expect("pixel squares never collapse to a line");
                (id, rect)
            })
            .collect()
    }

    /// Calls `f(u, v)` for every pixel whose center lies inside `b`.
    pub fn for_each_pixel_in(&self, b: &RotatedBox, mut f: impl FnMut(u32, u32)) {
        let poly = box_corners(b);
        let (lo, hi) = poly.bounds();
        let u0 = (lo.x - 0.5).floor().max(0.0) as i64;
        let v0 = (lo.y - 0.5).floor().max(0.0) as i64;
        let u1 = ((hi.x - 0.5).ceil() as i64).min(self.width as i64 - 1);
        let v1 = ((hi.y - 0.5).ceil() as i64).min(self.height as i64 - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                if poly.contains(Point2::new(u as f64 + 0.5, v as f64 + 0.5), 1e-9) {
                    f(u as u32, v as u32);
                }
            }
        }
    }
}
