//! Point-cloud geometry for planar brick faces: RANSAC plane and line
//! fitting, surface frames, boundary extraction and corner/edge recovery.
//!
//! All lengths are meters in the camera frame (x right, y down, z forward).

use nalgebra::{Matrix2, Matrix3, Point3, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lines closer than this angle are treated as parallel when intersecting.
pub const PARALLEL_ANGLE: f64 = 20.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("best model has {best} inliers, {required} required")]
    InsufficientInliers { best: usize, required: usize },
    #[error("in-plane scatter is nearly isotropic (eigenvalue ratio {ratio:.4}); major axis is unstable")]
    DegenerateScatter { ratio: f64 },
    #[error("point {index} has only {found} neighbours, {k} required")]
    TooSparse { index: usize, found: usize, k: usize },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// 3D points, optionally registered to image pixels `(u, v)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    pixels: Option<Vec<[u16; 2]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, CloudError> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(CloudError::InvalidCloud(format!("point {i} is not finite")));
        }
        Ok(Self { points, pixels: None })
    }

    /// A pixel-registered (organized) cloud. Pixels must be unique.
    pub fn registered(points: Vec<Point3<f64>>, pixels: Vec<[u16; 2]>) -> Result<Self, CloudError> {
        if points.len() != pixels.len() {
            return Err(CloudError::InvalidCloud(format!(
                "{} points but {} pixel registrations",
                points.len(),
                pixels.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(pixels.len());
        if let Some(px) = pixels.iter().find(|px| !seen.insert(**px)) {
            return Err(CloudError::InvalidCloud(format!("pixel {px:?} registered twice")));
        }
        let mut cloud = Self::new(points)?;
        cloud.pixels = Some(pixels);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn pixels(&self) -> Option<&[[u16; 2]]> {
        self.pixels.as_deref()
    }

    pub fn is_registered(&self) -> bool {
        self.pixels.is_some()
    }

    /// The points at `indices`, keeping pixel registration.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            pixels: self.pixels.as_ref().map(|px| indices.iter().map(|&i| px[i]).collect()),
        }
    }

    /// Applies `p -> R p + t` to every point.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| Point3::from(rotation * p.coords + translation)).collect(),
            pixels: self.pixels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier distance threshold in meters.
    pub threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl RansacParams {
    pub const DEFAULT_SEED: u64 = 0x5eed_b41c;

    pub fn plane() -> Self {
        Self { iterations: 500, threshold: 0.005, min_inliers: 30, seed: Self::DEFAULT_SEED }
    }

    pub fn line() -> Self {
        Self { iterations: 500, threshold: 0.005, min_inliers: 10, seed: Self::DEFAULT_SEED }
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if self.iterations == 0 {
            return Err(CloudError::InvalidParams("iterations must be >= 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(CloudError::InvalidParams("threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Plane `n . p + d = 0` with unit normal facing the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inliers: Vec<usize>,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    pub fn project(&self, p: &Point3<f64>) -> Point3<f64> {
        p - self.normal * self.signed_distance(p)
    }

    /// A right-handed in-plane basis `(u, v)` with `u x v = normal`.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        plane_basis(&self.normal)
    }

    /// Closest plane point to the camera origin.
    pub fn origin(&self) -> Point3<f64> {
        Point3::from(-self.normal * self.offset)
    }

    /// Moves `p` along its viewing ray from the camera origin onto the plane.
    /// Range noise acts along that ray, so this removes it; rays nearly
    /// parallel to the plane, and planes through the origin, fall back to
    /// orthogonal projection.
    pub fn ray_project(&self, p: &Point3<f64>) -> Point3<f64> {
        let denom = self.normal.dot(&p.coords);
        if denom.abs() <= 1e-6 * p.coords.norm() || self.offset.abs() <= 1e-9 {
            return self.project(p);
        }
        Point3::from(p.coords * (-self.offset / denom))
    }

    pub fn to_plane_coords(&self, p: &Point3<f64>) -> Vector2<f64> {
        let (u, v) = self.basis();
        let d = p - self.origin();
        Vector2::new(d.dot(&u), d.dot(&v))
    }

    pub fn from_plane_coords(&self, q: &Vector2<f64>) -> Point3<f64> {
        let (u, v) = self.basis();
        self.origin() + u * q.x + v * q.y
    }
}

fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    // seed with the camera axis least aligned with the normal
    let seed = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = (seed - n * n.dot(&seed)).normalize();
    let v = n.cross(&u);
    (u, v)
}

fn centroid(points: &[Point3<f64>], indices: &[usize]) -> Point3<f64> {
    let sum = indices.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords);
    Point3::from(sum / indices.len() as f64)
}

fn scatter(points: &[Point3<f64>], indices: &[usize], c: &Point3<f64>) -> Matrix3<f64> {
    indices.iter().fold(Matrix3::zeros(), |acc, &i| {
        let d = points[i] - c;
        acc + d * d.transpose()
    }) / indices.len() as f64
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen3(m: Matrix3<f64>) -> [(f64, Vector3<f64>); 3] {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vector3<f64>)> =
        (0..3).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    [pairs[0], pairs[1], pairs[2]]
}

fn orient_to_camera(normal: Vector3<f64>, offset: f64, c: &Point3<f64>) -> (Vector3<f64>, f64) {
    if normal.dot(&-c.coords) < 0.0 {
        (-normal, -offset)
    } else {
        (normal, offset)
    }
}

/// Least-squares plane through `indices`.
fn fit_plane(points: &[Point3<f64>], indices: &[usize]) -> (Vector3<f64>, f64) {
    let c = centroid(points, indices);
    let normal = sorted_eigen3(scatter(points, indices, &c))[2].1.normalize();
    let offset = -normal.dot(&c.coords);
    orient_to_camera(normal, offset, &c)
}

fn plane_inliers(points: &[Point3<f64>], normal: &Vector3<f64>, offset: f64, threshold: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| (normal.dot(&p.coords) + offset).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC plane: best triple by inlier count, then a least-squares refit on
/// the inliers and a final inlier pass against the refit plane.
pub fn ransac_plane(cloud: &PointCloud, params: &RansacParams) -> Result<PlaneModel, CloudError> {
    params.validate()?;
    let pts = cloud.points();
    if pts.len() < 3 {
        return Err(CloudError::NotEnoughPoints { needed: 3, got: pts.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..params.iterations {
        let idx = sample(&mut rng, pts.len(), 3);
        let (a, b, c) = (pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]);
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = n / norm;
        let d = -n.dot(&a.coords);
        let count = pts.iter().filter(|p| (n.dot(&p.coords) + d).abs() <= params.threshold).count();
        if best.is_none_or(|(bc, _, _)| count > bc) {
            best = Some((count, n, d));
        }
    }
    let Some((count, n, d)) = best else {
        return Err(CloudError::InsufficientInliers { best: 0, required: params.min_inliers.max(3) });
    };
    if count < params.min_inliers.max(3) {
        return Err(CloudError::InsufficientInliers { best: count, required: params.min_inliers.max(3) });
    }
    let mut support = plane_inliers(pts, &n, d, params.threshold);
    let (mut normal, mut offset) = fit_plane(pts, &support);
    // Shrink the refit set to a robust residual band: points of a
    // neighbouring face that graze the threshold would otherwise tilt the plane.
    for _ in 0..5 {
        let mut res: Vec<f64> = support.iter().map(|&i| (normal.dot(&pts[i].coords) + offset).abs()).collect();
        res.sort_by(f64::total_cmp);
        let band = (3.0 * 1.4826 * res[res.len() / 2]).clamp(1e-7, params.threshold);
        let next = plane_inliers(pts, &normal, offset, band);
        if next.len() < 3 || next == support {
            break;
        }
        (normal, offset) = fit_plane(pts, &next);
        support = next;
    }
    let mut inliers = plane_inliers(pts, &normal, offset, params.threshold);
    if inliers.len() < 3 {
        // refit drifted off a degenerate sample; keep the sampled inliers
        inliers = plane_inliers(pts, &n, d, params.threshold);
    }
    if inliers.len() < params.min_inliers.max(3) {
        return Err(CloudError::InsufficientInliers { best: inliers.len(), required: params.min_inliers.max(3) });
    }
    Ok(PlaneModel { normal, offset, inliers })
}

/// Centroid and principal axes of a planar patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePose {
    pub centroid: Point3<f64>,
    pub major: Vector3<f64>,
    pub minor: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl SurfacePose {
    /// Builds a frame from a centroid, a normal and an in-plane direction.
    /// The direction is projected into the plane; the minor axis completes a
    /// right-handed frame, and the major axis is flipped to face camera `+x`.
    pub fn from_axes(centroid: Point3<f64>, normal: Vector3<f64>, major: Vector3<f64>) -> Option<Self> {
        let normal = normal.try_normalize(1e-12)?;
        let major = (major - normal * normal.dot(&major)).try_normalize(1e-12)?;
        let major = canonical_sign(major);
        let minor = normal.cross(&major);
        Some(Self { centroid, major, minor, normal })
    }

    /// Columns `[major, minor, normal]`.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.major, self.minor, self.normal])
    }

    pub fn is_right_handed(&self, tol: f64) -> bool {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let flip = if v.x.abs() > 1e-12 {
        v.x < 0.0
    } else if v.y.abs() > 1e-12 {
        v.y < 0.0
    } else {
        v.z < 0.0
    };
    if flip {
        -v
    } else {
        v
    }
}

/// Relative eigenvalue gap below which the major axis is considered unstable.
pub const MIN_EIGEN_GAP: f64 = 0.01;

/// Centroid and in-plane principal directions of the plane's inliers.
pub fn surface_pose(cloud: &PointCloud, plane: &PlaneModel) -> Result<SurfacePose, CloudError> {
    let pts = cloud.points();
    if plane.inliers.len() < 3 {
        return Err(CloudError::NotEnoughPoints { needed: 3, got: plane.inliers.len() });
    }
    let c = centroid(pts, &plane.inliers);
    let (u, v) = plane.basis();
    let mut cov = Matrix2::zeros();
    for &i in &plane.inliers {
        let d = pts[i] - c;
        let q = Vector2::new(d.dot(&u), d.dot(&v));
        cov += q * q.transpose();
    }
    cov /= plane.inliers.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let (big, small) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let (l1, l2) = (eig.eigenvalues[big], eig.eigenvalues[small]);
    if !(l1 > 0.0) || (l1 - l2) / l1 < MIN_EIGEN_GAP {
        return Err(CloudError::DegenerateScatter { ratio: if l1 > 0.0 { l2 / l1 } else { 1.0 } });
    }
    let dir = eig.eigenvectors.column(big);
    let major = u * dir[0] + v * dir[1];
    SurfacePose::from_axes(c, plane.normal, major).ok_or(CloudError::DegenerateScatter { ratio: 1.0 })
}

/// Uniform-grid index for k-nearest-neighbour queries on 2D points.
struct GridIndex<'a> {
    pts: &'a [Vector2<f64>],
    min: Vector2<f64>,
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    fn new(pts: &'a [Vector2<f64>], per_cell: f64) -> Self {
        let (mut min, mut max) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        for p in pts {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = (max - min).map(|e| e.max(1e-12));
        let cell = ((ext.x * ext.y * per_cell / pts.len() as f64).sqrt()).max(ext.max() / 4096.0).max(1e-12);
        let nx = ((ext.x / cell).floor() as usize + 1).max(1);
        let ny = ((ext.y / cell).floor() as usize + 1).max(1);
        let cell_of = |p: &Vector2<f64>| {
            let cx = (((p.x - min.x) / cell) as usize).min(nx - 1);
            let cy = (((p.y - min.y) / cell) as usize).min(ny - 1);
            cy * nx + cx
        };
        let mut counts = vec![0usize; nx * ny + 1];
        for p in pts {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; pts.len()];
        for (i, p) in pts.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self { pts, min, cell, nx, ny, starts: counts, items }
    }

    /// The `k` nearest other points of point `i`, nearest first, ties by index.
    fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        let q = self.pts[i];
        let cx = (((q.x - self.min.x) / self.cell) as i64).min(self.nx as i64 - 1);
        let cy = (((q.y - self.min.y) / self.cell) as i64).min(self.ny as i64 - 1);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let max_ring = self.nx.max(self.ny) as i64;
        for ring in 0..=max_ring {
            for gy in cy - ring..=cy + ring {
                for gx in cx - ring..=cx + ring {
                    let on_ring = (gy - cy).abs() == ring || (gx - cx).abs() == ring;
                    if !on_ring || gx < 0 || gy < 0 || gx >= self.nx as i64 || gy >= self.ny as i64 {
                        continue;
                    }
                    let c = gy as usize * self.nx + gx as usize;
                    for &j in &self.items[self.starts[c]..self.starts[c + 1]] {
                        if j != i {
                            found.push(((self.pts[j] - q).norm_squared(), j));
                        }
                    }
                }
            }
            // anything beyond this ring is at least `ring * cell` away
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let reach = ring as f64 * self.cell;
                if found[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, j)| j).collect()
    }
}

/// Largest angular gap (radians) between directions from `center` to `neighbours`.
fn max_angular_gap(center: Vector2<f64>, neighbours: impl Iterator<Item = Vector2<f64>>) -> f64 {
    let mut angles: Vec<f64> = neighbours
        .filter_map(|p| {
            let d = p - center;
            (d.norm_squared() > 0.0).then(|| d.y.atan2(d.x))
        })
        .collect();
    if angles.is_empty() {
        return 2.0 * std::f64::consts::PI;
    }
    angles.sort_by(f64::total_cmp);
    let mut gap = angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap
}

pub const DEFAULT_BOUNDARY_K: usize = 10;
pub const DEFAULT_BOUNDARY_GAP: f64 = std::f64::consts::FRAC_PI_2;

/// Plane inliers lying on the patch boundary.
///
/// Each inlier is moved along its viewing ray into the plane; it is a boundary point when the
/// directions to its `k` nearest in-plane neighbours leave an angular gap
/// wider than `gap`. Returned indices refer to `cloud`, in ascending order.
pub fn boundary_points(cloud: &PointCloud, plane: &PlaneModel, k: usize, gap: f64) -> Result<Vec<usize>, CloudError> {
    if k < 4 {
        return Err(CloudError::InvalidParams(format!("boundary neighbour count {k} < 4")));
    }
    let idx = &plane.inliers;
    if idx.len() <= k {
        return Err(CloudError::TooSparse {
            index: idx.first().copied().unwrap_or(0),
            found: idx.len().saturating_sub(1),
            k,
        });
    }
    let flat: Vec<Vector2<f64>> =
        idx.iter().map(|&i| plane.to_plane_coords(&plane.ray_project(&cloud.points()[i]))).collect();
    let grid = GridIndex::new(&flat, 4.0);
    let mut out = Vec::new();
    for (local, &global) in idx.iter().enumerate() {
        let nn = grid.knn(local, k);
        if nn.len() < k {
            return Err(CloudError::TooSparse { index: global, found: nn.len(), k });
        }
        if max_angular_gap(flat[local], nn.iter().map(|&j| flat[j])) > gap {
            out.push(global);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// A fitted in-plane line.
#[derive(Debug, Clone, PartialEq)]
pub struct Line3 {
    pub anchor: Point3<f64>,
    pub direction: Vector3<f64>,
    /// Indices into the cloud the line was fitted on.
    pub inliers: Vec<usize>,
}

impl Line3 {
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.anchor;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

fn fit_line_2d(pts: &[Vector2<f64>], members: &[usize]) -> (Vector2<f64>, Vector2<f64>) {
    let c = members.iter().fold(Vector2::zeros(), |acc, &i| acc + pts[i]) / members.len() as f64;
    let cov = members.iter().fold(Matrix2::zeros(), |acc, &i| {
        let d = pts[i] - c;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let big = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    (c, eig.eigenvectors.column(big).into_owned().normalize())
}

fn line_members(
    pts: &[Vector2<f64>],
    pool: &[usize],
    anchor: &Vector2<f64>,
    dir: &Vector2<f64>,
    thr: f64,
) -> Vec<usize> {
    pool.iter()
        .copied()
        .filter(|&i| {
            let d = pts[i] - anchor;
            (d.x * dir.y - d.y * dir.x).abs() <= thr
        })
        .collect()
}

pub const DEFAULT_MAX_LINES: usize = 8;

/// Sequential RANSAC line extraction on `indices` (points of `cloud`),
/// working in the coordinates of `plane`.
pub fn ransac_lines(
    cloud: &PointCloud,
    indices: &[usize],
    plane: &PlaneModel,
    params: &RansacParams,
    max_lines: usize,
) -> Result<Vec<Line3>, CloudError> {
    params.validate()?;
    if indices.len() < 2 {
        return Err(CloudError::NotEnoughPoints { needed: 2, got: indices.len() });
    }
    let flat: Vec<Vector2<f64>> =
        indices.iter().map(|&i| plane.to_plane_coords(&plane.ray_project(&cloud.points()[i]))).collect();
    let (u, v) = plane.basis();
    let min_inliers = params.min_inliers.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut remaining: Vec<usize> = (0..flat.len()).collect();
    let mut lines = Vec::new();
    while lines.len() < max_lines && remaining.len() >= min_inliers {
        let mut best: Option<Vec<usize>> = None;
        for _ in 0..params.iterations {
            let s = sample(&mut rng, remaining.len(), 2);
            let (a, b) = (flat[remaining[s.index(0)]], flat[remaining[s.index(1)]]);
            let Some(dir) = (b - a).try_normalize(1e-12) else { continue };
            let members = line_members(&flat, &remaining, &a, &dir, params.threshold);
            if best.as_ref().is_none_or(|m| members.len() > m.len()) {
                best = Some(members);
            }
        }
        let Some(sampled) = best else { break };
        if sampled.len() < min_inliers {
            break;
        }
        let (c, dir) = fit_line_2d(&flat, &sampled);
        let mut members = line_members(&flat, &remaining, &c, &dir, params.threshold);
        if members.len() < min_inliers {
            members = sampled;
        }
        let (c, dir) = fit_line_2d(&flat, &members);
        remaining.retain(|i| !members.contains(i));
        lines.push(Line3 {
            anchor: plane.from_plane_coords(&c),
            direction: (u * dir.x + v * dir.y).normalize(),
            inliers: members.iter().map(|&i| indices[i]).collect(),
        });
    }
    Ok(lines)
}

/// Intersection of two fitted lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub point: Point3<f64>,
    /// Indices of the two generating lines, lower first.
    pub lines: (usize, usize),
}

/// In-plane intersections of non-parallel line pairs that lie within
/// `max_gap` meters of some inlier of both lines.
pub fn corner_points(cloud: &PointCloud, lines: &[Line3], plane: &PlaneModel, max_gap: f64) -> Vec<Corner> {
    let flat: Vec<(Vector2<f64>, Vector2<f64>)> = lines
        .iter()
        .map(|l| {
            let a = plane.to_plane_coords(&l.anchor);
            let b = plane.to_plane_coords(&(l.anchor + l.direction));
            (a, (b - a).normalize())
        })
        .collect();
    let near_inlier = |line: &Line3, p: &Point3<f64>| {
        line.inliers.iter().any(|&i| (plane.ray_project(&cloud.points()[i]) - p).norm() <= max_gap)
    };
    let mut out = Vec::new();
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            let ((a1, d1), (a2, d2)) = (flat[i], flat[j]);
            let det = d1.x * d2.y - d1.y * d2.x;
            if det.abs() < PARALLEL_ANGLE.sin() {
                continue;
            }
            let w = a2 - a1;
            let t = (w.x * d2.y - w.y * d2.x) / det;
            let p = plane.from_plane_coords(&(a1 + d1 * t));
            if near_inlier(&lines[i], &p) && near_inlier(&lines[j], &p) {
                out.push(Corner { point: p, lines: (i, j) });
            }
        }
    }
    out
}

/// Two corners joined along a shared generating line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub corners: (usize, usize),
    pub line: usize,
    pub length: f64,
}

/// Pairs corners that share a generating line. Each line yields at most one
/// edge, between its two closest corners.
pub fn pair_corners_to_edges(corners: &[Corner], n_lines: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for line in 0..n_lines {
        let on_line: Vec<usize> =
            (0..corners.len()).filter(|&c| corners[c].lines.0 == line || corners[c].lines.1 == line).collect();
        let mut best: Option<Edge> = None;
        for (a, &ci) in on_line.iter().enumerate() {
            for &cj in &on_line[a + 1..] {
                let length = (corners[ci].point - corners[cj].point).norm();
                if best.is_none_or(|e| length < e.length) {
                    best = Some(Edge { corners: (ci, cj), line, length });
                }
            }
        }
        edges.extend(best);
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_rect(lx: f64, ly: f64, step: f64, z: f64) -> Vec<Point3<f64>> {
        let nx = (lx / step).round() as usize;
        let ny = (ly / step).round() as usize;
        let mut pts = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                pts.push(Point3::new((i as f64 + 0.5) * step - lx / 2.0, (j as f64 + 0.5) * step - ly / 2.0, z));
            }
        }
        pts
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(-0.8..0.8);
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn plane_z_equals_one() {
        let cloud = PointCloud::new(grid_rect(0.3, 0.2, 0.01, 1.0)).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        assert!((plane.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        assert!((plane.offset - 1.0).abs() < 1e-9);
        assert_eq!(plane.inliers.len(), cloud.len());
    }

    #[test]
    fn plane_tilted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // x + y + z = 1 around a point in front of the camera
        let pts: Vec<Point3<f64>> = (0..400)
            .map(|_| {
                let x: f64 = rng.random_range(-0.3..0.3);
                let y: f64 = rng.random_range(-0.3..0.3);
                Point3::new(x, y, 1.0 - x - y)
            })
            .collect();
        let plane = ransac_plane(&PointCloud::new(pts).unwrap(), &RansacParams::plane()).unwrap();
        let expected = -Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
        assert!((plane.normal - expected).norm() < 1e-6, "{:?}", plane.normal);
        assert!((plane.normal.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn plane_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_true = Vector3::new(0.2, -0.3, -1.0).normalize();
        let c = Point3::new(0.05, 0.02, 0.9);
        let (u, v) = plane_basis(&n_true);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let mut pts = Vec::new();
        for _ in 0..800 {
            let a: f64 = rng.random_range(-0.15..0.15);
            let b: f64 = rng.random_range(-0.15..0.15);
            pts.push(c + u * a + v * b + n_true * noise.sample(&mut rng));
        }
        for _ in 0..200 {
            pts.push(Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.6..1.2)));
        }
        let plane = ransac_plane(&PointCloud::new(pts).unwrap(), &RansacParams::plane()).unwrap();
        let err = plane.normal.dot(&n_true).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(err < 0.5, "normal error {err} deg");
        assert!(plane.inliers.iter().filter(|&&i| i < 800).count() >= 790);
    }

    #[test]
    fn plane_too_few_points_or_inliers() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0)]).unwrap();
        assert!(matches!(ransac_plane(&cloud, &RansacParams::plane()), Err(CloudError::NotEnoughPoints { .. })));
        let cloud = PointCloud::new(grid_rect(0.05, 0.05, 0.01, 1.0)).unwrap();
        assert!(matches!(
            ransac_plane(&cloud, &RansacParams::plane()),
            Err(CloudError::InsufficientInliers { best: 25, required: 30 })
        ));
    }

    #[test]
    fn plane_is_deterministic_and_rigidly_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = grid_rect(0.2, 0.1, 0.005, 0.0);
        for _ in 0..100 {
            pts.push(Point3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.02..0.1),
            ));
        }
        let base = PointCloud::new(pts).unwrap();
        let lift = Vector3::new(0.0, 0.0, 1.0);
        let cloud = base.transformed(&Matrix3::identity(), &lift);
        let p1 = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        let p2 = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        assert_eq!(p1, p2);
        let r = random_rotation(&mut rng);
        let t = Vector3::new(0.05, -0.02, 0.1);
        let moved = cloud.transformed(&r, &t);
        let p3 = ransac_plane(&moved, &RansacParams::plane()).unwrap();
        assert_eq!(p1.inliers, p3.inliers);
        for &i in &p3.inliers {
            assert!(p3.signed_distance(&moved.points()[i]).abs() <= 0.005);
        }
    }

    #[test]
    fn surface_axes_of_rectangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3<f64>> =
            (0..3000).map(|_| Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.045..0.045), 1.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        let sp = surface_pose(&cloud, &plane).unwrap();
        assert!(sp.major.dot(&Vector3::x()).abs() > 1f64.to_radians().cos());
        assert!(sp.major.x >= 0.0);
        assert!(sp.is_right_handed(1e-9));
        assert!((sp.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
    }

    #[test]
    fn square_patch_is_degenerate() {
        let cloud = PointCloud::new(grid_rect(0.1, 0.1, 0.005, 1.0)).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        assert!(matches!(surface_pose(&cloud, &plane), Err(CloudError::DegenerateScatter { .. })));
    }

    #[test]
    fn surface_pose_recovers_random_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let r = random_rotation(&mut rng) * rot_z(yaw);
            let t = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0);
            let base = PointCloud::new(grid_rect(0.2, 0.088, 0.004, 0.0)).unwrap();
            let cloud = base.transformed(&r, &t);
            let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
            let sp = surface_pose(&cloud, &plane).unwrap();
            let expected = r * Vector3::x();
            let ang = sp.major.dot(&expected).abs().min(1.0).acos().to_degrees();
            assert!(ang < 1.0, "major axis off by {ang} deg");
            assert!((sp.centroid.coords - t).norm() < 1e-9);
            assert!(sp.is_right_handed(1e-9));
            assert!(sp.normal.dot(&-sp.centroid.coords) > 0.0);
        }
    }

    #[test]
    fn surface_pose_is_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = PointCloud::new(grid_rect(0.2, 0.09, 0.005, 1.0)).unwrap();
        let plane = ransac_plane(&base, &RansacParams::plane()).unwrap();
        let sp = surface_pose(&base, &plane).unwrap();
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let t = Vector3::new(0.0, 0.0, 0.2);
            let moved = base.transformed(&r, &t);
            let mp = ransac_plane(&moved, &RansacParams::plane()).unwrap();
            let msp = surface_pose(&moved, &mp).unwrap();
            assert!((msp.centroid.coords - (r * sp.centroid.coords + t)).norm() < 1e-6);
            // major/minor are defined up to sign
            assert!((msp.major.dot(&(r * sp.major)).abs() - 1.0).abs() < 1e-6);
            assert!((msp.minor.dot(&(r * sp.minor)).abs() - 1.0).abs() < 1e-6);
            assert!((msp.normal - r * sp.normal).norm() < 1e-6);
        }
    }

    #[test]
    fn boundary_of_grid_rectangle_is_outer_ring() {
        let step = 0.005;
        let (lx, ly) = (0.2, 0.09);
        let cloud = PointCloud::new(grid_rect(lx, ly, step, 1.0)).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        let boundary = boundary_points(&cloud, &plane, DEFAULT_BOUNDARY_K, DEFAULT_BOUNDARY_GAP).unwrap();
        // oracle: distance to the nearest rectangle edge below one grid step
        let expected: Vec<usize> = cloud
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let dx = lx / 2.0 - p.x.abs();
                let dy = ly / 2.0 - p.y.abs();
                dx.min(dy) < step
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(boundary, expected);
    }

    #[test]
    fn boundary_ring_is_connected() {
        let step = 0.004;
        let cloud = PointCloud::new(grid_rect(0.12, 0.06, step, 1.0)).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        let boundary = boundary_points(&cloud, &plane, DEFAULT_BOUNDARY_K, DEFAULT_BOUNDARY_GAP).unwrap();
        let cell = |i: usize| {
            let p = cloud.points()[i];
            (((p.x + 0.06) / step).floor() as i64, ((p.y + 0.03) / step).floor() as i64)
        };
        let cells: Vec<(i64, i64)> = boundary.iter().map(|&i| cell(i)).collect();
        let mut seen = vec![false; cells.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for b in 0..cells.len() {
                if !seen[b] && (cells[a].0 - cells[b].0).abs() <= 1 && (cells[a].1 - cells[b].1).abs() <= 1 {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn disk_interior_is_not_boundary() {
        let mut pts = Vec::new();
        for j in -30i32..=30 {
            for i in -30i32..=30 {
                if i * i + j * j <= 900 {
                    pts.push(Point3::new(i as f64 * 0.002, j as f64 * 0.002, 1.0));
                }
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let plane = ransac_plane(&cloud, &RansacParams::plane()).unwrap();
        let boundary = boundary_points(&cloud, &plane, DEFAULT_BOUNDARY_K, DEFAULT_BOUNDARY_GAP).unwrap();
        let center = cloud.points().iter().position(|p| p.x == 0.0 && p.y == 0.0).unwrap();
        assert!(!boundary.contains(&center));
        for &b in &boundary {
            let p = cloud.points()[b];
            assert!(p.x.hypot(p.y) > 0.05);
        }
    }

    #[test]
    fn collinear_strip_is_all_boundary() {
        let pts: Vec<Point3<f64>> = (0..40).map(|i| Point3::new(i as f64 * 0.003, 0.0, 1.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let plane = PlaneModel { normal: Vector3::new(0.0, 0.0, -1.0), offset: 1.0, inliers: (0..40).collect() };
        let boundary = boundary_points(&cloud, &plane, 4, DEFAULT_BOUNDARY_GAP).unwrap();
        assert_eq!(boundary.len(), 40);
    }

    #[test]
    fn boundary_too_sparse_and_bad_k() {
        let cloud = PointCloud::new(grid_rect(0.01, 0.01, 0.005, 1.0)).unwrap();
        let plane = PlaneModel { normal: Vector3::new(0.0, 0.0, -1.0), offset: 1.0, inliers: (0..4).collect() };
        assert!(matches!(boundary_points(&cloud, &plane, 10, DEFAULT_BOUNDARY_GAP), Err(CloudError::TooSparse { .. })));
        assert!(matches!(boundary_points(&cloud, &plane, 3, DEFAULT_BOUNDARY_GAP), Err(CloudError::InvalidParams(_))));
    }

    fn rectangle_outline(lx: f64, ly: f64, step: f64, r: &Matrix3<f64>, t: &Vector3<f64>) -> PointCloud {
        let mut pts = Vec::new();
        let nx = (lx / step).round() as usize;
        let ny = (ly / step).round() as usize;
        for i in 0..=nx {
            let x = i as f64 * step - lx / 2.0;
            pts.push(Point3::new(x, -ly / 2.0, 0.0));
            pts.push(Point3::new(x, ly / 2.0, 0.0));
        }
        for j in 1..ny {
            let y = j as f64 * step - ly / 2.0;
            pts.push(Point3::new(-lx / 2.0, y, 0.0));
            pts.push(Point3::new(lx / 2.0, y, 0.0));
        }
        PointCloud::new(pts).unwrap().transformed(r, t)
    }

    fn face_plane(r: &Matrix3<f64>, t: &Vector3<f64>, n: usize) -> PlaneModel {
        let mut normal = r * Vector3::z();
        let mut offset = -normal.dot(t);
        if normal.dot(&-t) < 0.0 {
            normal = -normal;
            offset = -offset;
        }
        PlaneModel { normal, offset, inliers: (0..n).collect() }
    }

    #[test]
    fn rectangle_lines_corners_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let r = random_rotation(&mut rng) * rot_z(rng.random_range(0.0..3.0));
            let t = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0);
            let cloud = rectangle_outline(0.2, 0.09, 0.002, &r, &t);
            let plane = face_plane(&r, &t, cloud.len());
            let idx: Vec<usize> = (0..cloud.len()).collect();
            let lines = ransac_lines(&cloud, &idx, &plane, &RansacParams::line(), DEFAULT_MAX_LINES).unwrap();
            assert_eq!(lines.len(), 4);
            for a in &lines {
                assert!(a.direction.dot(&plane.normal).abs() < 1e-6);
                for b in &lines {
                    let c = a.direction.dot(&b.direction).abs();
                    assert!(c > 1f64.to_radians().cos() || c < 1f64.to_radians().sin());
                }
            }
            let corners = corner_points(&cloud, &lines, &plane, 0.02);
            assert_eq!(corners.len(), 4);
            let truth: Vec<Vector3<f64>> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                .iter()
                .map(|(sx, sy)| r * Vector3::new(sx * 0.1, sy * 0.045, 0.0) + t)
                .collect();
            for c in &corners {
                let d = truth.iter().map(|q| (c.point.coords - q).norm()).fold(f64::MAX, f64::min);
                assert!(d < 1e-3, "corner off by {d}");
            }
            let edges = pair_corners_to_edges(&corners, lines.len());
            let mut lengths: Vec<f64> = edges.iter().map(|e| e.length).collect();
            lengths.sort_by(f64::total_cmp);
            assert_eq!(lengths.len(), 4);
            for (l, e) in lengths.iter().zip([0.09, 0.09, 0.2, 0.2]) {
                assert!((l - e).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn collinear_points_give_one_line() {
        let pts: Vec<Point3<f64>> = (0..50).map(|i| Point3::new(i as f64 * 0.004 - 0.1, 0.01, 1.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let plane = PlaneModel { normal: Vector3::new(0.0, 0.0, -1.0), offset: 1.0, inliers: (0..50).collect() };
        let lines = ransac_lines(&cloud, &plane.inliers, &plane, &RansacParams::line(), 8).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].inliers.len(), 50);
    }

    #[test]
    fn unstructured_noise_gives_no_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point3<f64>> =
            (0..60).map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let plane = PlaneModel { normal: Vector3::new(0.0, 0.0, -1.0), offset: 1.0, inliers: (0..60).collect() };
        let strict = RansacParams { threshold: 1e-4, ..RansacParams::line() };
        assert!(ransac_lines(&cloud, &plane.inliers, &plane, &strict, 8).unwrap().is_empty());
    }

    fn line_through(a: Point3<f64>, dir: Vector3<f64>, inliers: Vec<usize>) -> Line3 {
        Line3 { anchor: a, direction: dir.normalize(), inliers }
    }

    #[test]
    fn corner_trivial_cases() {
        let pts = vec![Point3::new(0.01, 0.0, 0.0), Point3::new(0.0, 0.01, 0.0), Point3::new(0.02, 0.02, 0.0)];
        let cloud = PointCloud::new(pts).unwrap();
        let plane = PlaneModel { normal: Vector3::z(), offset: 0.0, inliers: vec![0, 1, 2] };
        let lx = line_through(Point3::new(0.5, 0.0, 0.0), Vector3::x(), vec![0]);
        let ly = line_through(Point3::new(0.0, 0.3, 0.0), Vector3::y(), vec![1]);
        let corners = corner_points(&cloud, &[lx.clone(), ly], &plane, 0.02);
        assert_eq!(corners.len(), 1);
        assert!(corners[0].point.coords.norm() < 1e-12);
        assert_eq!(corners[0].lines, (0, 1));

        let parallel = line_through(Point3::new(0.0, 0.02, 0.0), Vector3::x(), vec![2]);
        assert!(corner_points(&cloud, &[lx.clone(), parallel], &plane, 0.02).is_empty());

        // far-away pseudo-intersection rejected by the gap rule
        let ly_far = line_through(Point3::new(0.5, 0.3, 0.0), Vector3::y(), vec![2]);
        assert!(corner_points(&cloud, &[lx, ly_far], &plane, 0.02).is_empty());
    }

    #[test]
    fn edge_pairing_combinatorics() {
        let c = |x: f64, y: f64, l: (usize, usize)| Corner { point: Point3::new(x, y, 0.0), lines: l };
        let tri = [c(0.0, 0.0, (0, 1)), c(1.0, 0.0, (0, 2)), c(0.0, 1.0, (1, 2))];
        let edges = pair_corners_to_edges(&tri, 3);
        assert_eq!(edges.len(), 3);
        let lone = [c(0.0, 0.0, (0, 1)), c(1.0, 1.0, (2, 3))];
        assert!(pair_corners_to_edges(&lone, 4).is_empty());
        // a line with three corners only keeps its two closest
        let three = [c(0.0, 0.0, (0, 1)), c(0.3, 0.0, (0, 2)), c(1.0, 0.0, (0, 3))];
        let edges = pair_corners_to_edges(&three, 4);
        assert_eq!(edges.len(), 1);
        assert!((edges[0].length - 0.3).abs() < 1e-12);
    }

    #[test]
    fn registered_cloud_validation() {
        let p = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.1, 0.0, 1.0)];
        assert!(PointCloud::registered(p.clone(), vec![[1, 1], [1, 1]]).is_err());
        assert!(PointCloud::registered(p.clone(), vec![[1, 1]]).is_err());
        assert!(PointCloud::new(vec![Point3::new(f64::NAN, 0.0, 0.0)]).is_err());
        let c = PointCloud::registered(p, vec![[1, 1], [2, 1]]).unwrap();
        assert_eq!(c.subset(&[1]).pixels().unwrap(), &[[2, 1]]);
    }
}
