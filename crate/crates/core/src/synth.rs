//! Synthetic ground truth: cuboid bricks rendered through a pinhole camera
//! into a pixel-registered point cloud, an instance mask, rotated boxes and
//! poses.
//!
//! Pixel `(u, v)` covers `[u, u+1) x [v, v+1)` in image coordinates and its
//! ray passes through the pixel center.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geom::{box_corners, BrickClass, InstanceMask, Point2, RotatedBox};
use crate::pose::{BrickDims, BrickPose, FaceType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("cloud has no pixel registration")]
    NotRegistered,
    #[error("no cloud points fall inside the box")]
    EmptyCrop,
}

/// Pinhole intrinsics. `cx`, `cy` follow the convention where integer pixel
/// indices sit at pixel centers, so the default `319.5` is the image middle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SynthError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as u32 || self.height > u16::MAX as u32 {
            return Err(SynthError::InvalidCamera(format!("unsupported size {}x{}", self.width, self.height)));
        }
        let inside = |c: f64, n: u32| (-0.5..n as f64 - 0.5).contains(&c);
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(SynthError::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Ray through the center of pixel `(u, v)`, scaled to unit depth.
    pub fn ray(&self, u: u32, v: u32) -> Vector3<f64> {
        Vector3::new((u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0)
    }

    /// Continuous image coordinates of a camera-frame point (`z > 0`).
    pub fn project(&self, p: &Point3<f64>) -> Point2 {
        Point2::new(self.fx * p.x / p.z + self.cx + 0.5, self.fy * p.y / p.z + self.cy + 0.5)
    }

    /// The point at depth `z` seen through the center of pixel `(u, v)`.
    pub fn back_project(&self, u: u32, v: u32, z: f64) -> Point3<f64> {
        Point3::from(self.ray(u, v) * z)
    }
}

/// A brick placed in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBrick {
    pub pose: BrickPose,
    pub dims: BrickDims,
    #[serde(rename = "class")]
    pub class_id: BrickClass,
}

/// Ground plane `normal . p + offset = 0` in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub bricks: Vec<SceneBrick>,
    pub camera: CameraModel,
    /// Standard deviation of range noise along each ray, meters.
    pub noise_sigma: f64,
    /// Rendered as unlabeled background when present.
    #[serde(default)]
    pub ground: Option<GroundPlane>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.camera.validate()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidScene("noise sigma must be non-negative".into()));
        }
        if self.bricks.len() >= u16::MAX as usize {
            return Err(SynthError::InvalidScene(format!("too many bricks ({})", self.bricks.len())));
        }
        for (i, b) in self.bricks.iter().enumerate() {
            if !(b.pose.translation.z > 0.0) {
                return Err(SynthError::InvalidScene(format!("brick {i} center is not in front of the camera")));
            }
            if !b.pose.is_valid(1e-6) {
                return Err(SynthError::InvalidScene(format!("brick {i} has an invalid rotation")));
            }
        }
        Ok(())
    }
}

/// Ground-truth box of a visible instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: u16,
    #[serde(flatten)]
    pub rect: RotatedBox,
}

/// Ground-truth pose of every brick, visible or not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtPose {
    pub id: u16,
    #[serde(rename = "class")]
    pub class_id: BrickClass,
    pub dims: BrickDims,
    pub pixels: usize,
    #[serde(flatten)]
    pub pose: BrickPose,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub cloud: PointCloud,
    pub mask: InstanceMask,
    pub boxes: Vec<GtBox>,
    pub poses: Vec<GtPose>,
}

/// Ray parameter where a ray from the origin enters the box, if it does.
fn ray_box_entry(dir: &Vector3<f64>, brick: &SceneBrick) -> Option<f64> {
    let rt = brick.pose.rotation.transpose();
    let o = rt * -brick.pose.translation;
    let d = rt * dir;
    let half = brick.dims.as_vector() / 2.0;
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
        near = near.max(a.min(b));
        far = far.min(a.max(b));
    }
    // camera inside a brick is treated as no hit
    (near <= far && near > 0.0).then_some(near)
}

/// Pixel rectangle `[u0, u1) x [v0, v1)` that can contain the brick.
fn screen_bounds(cam: &CameraModel, brick: &SceneBrick) -> (u32, u32, u32, u32) {
    let full = (0, cam.width, 0, cam.height);
    let half = brick.dims.as_vector() / 2.0;
    let (mut lo, mut hi) =
        (Point2::new(f64::INFINITY, f64::INFINITY), Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for i in 0..8 {
        let local = Vector3::new(
            if i & 1 == 0 { -half.x } else { half.x },
            if i & 2 == 0 { -half.y } else { half.y },
            if i & 4 == 0 { -half.z } else { half.z },
        );
        let p = brick.pose.apply(&Point3::from(local));
        if p.z <= 1e-6 {
            return full;
        }
        let q = cam.project(&p);
        lo = Point2::new(lo.x.min(q.x), lo.y.min(q.y));
        hi = Point2::new(hi.x.max(q.x), hi.y.max(q.y));
    }
    let clamp = |x: f64, n: u32| x.clamp(0.0, n as f64) as u32;
    (
        clamp(lo.x.floor() - 1.0, cam.width),
        clamp(hi.x.ceil() + 1.0, cam.width),
        clamp(lo.y.floor() - 1.0, cam.height),
        clamp(hi.y.ceil() + 1.0, cam.height),
    )
}

/// Renders the scene with a per-pixel depth buffer.
///
/// Brick `i` gets instance id `i + 1`. Ground hits become unlabeled cloud
/// points. With `noise_sigma > 0` every range is perturbed along its ray.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<RenderedScene, SynthError> {
    spec.validate()?;
    let cam = &spec.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut labels = vec![0u16; w * h];

    if let Some(g) = &spec.ground {
        let n = Vector3::from(g.normal);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = cam.ray(u, v);
                let denom = n.dot(&d);
                if denom.abs() > 1e-12 {
                    let t = -g.offset / denom;
                    if t > 0.0 {
                        depth[v as usize * w + u as usize] = t;
                    }
                }
            }
        }
    }
    for (i, brick) in spec.bricks.iter().enumerate() {
        let (u0, u1, v0, v1) = screen_bounds(cam, brick);
        for v in v0..v1 {
            for u in u0..u1 {
                let k = v as usize * w + u as usize;
                if let Some(t) = ray_box_entry(&cam.ray(u, v), brick) {
                    if t < depth[k] {
                        depth[k] = t;
                        labels[k] = (i + 1) as u16;
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let z = depth[v as usize * w + u as usize];
            if !z.is_finite() {
                continue;
            }
            let mut p = cam.back_project(u, v, z);
            if spec.noise_sigma > 0.0 {
                let r = p.coords.norm();
                p = Point3::from(p.coords * ((r + noise.sample(&mut rng)) / r));
            }
            points.push(p);
            pixels.push([u as u16, v as u16]);
        }
    }
    let cloud = PointCloud::registered(points, pixels).map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    let class_of: BTreeMap<u16, BrickClass> =
        spec.bricks.iter().enumerate().map(|(i, b)| ((i + 1) as u16, b.class_id)).collect();
    let mask = InstanceMask::new(cam.width, cam.height, labels, class_of)
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    let regions = mask.regions();
    let boxes = mask.instance_boxes().into_iter().map(|(id, rect)| GtBox { id, rect }).collect();
    let poses = spec
        .bricks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let id = (i + 1) as u16;
            GtPose {
                id,
                class_id: b.class_id,
                dims: b.dims,
                pixels: regions.get(&id).map_or(0, |r| r.len()),
                pose: b.pose,
            }
        })
        .collect();
    Ok(RenderedScene { cloud, mask, boxes, poses })
}

/// Points of a registered cloud whose pixel centers fall inside `region`.
pub fn crop_brick_cloud(cloud: &PointCloud, region: &RotatedBox) -> Result<PointCloud, SynthError> {
    let pixels = cloud.pixels().ok_or(SynthError::NotRegistered)?;
    let poly = box_corners(region);
    let (lo, hi) = poly.bounds();
    let keep: Vec<usize> = pixels
        .iter()
        .enumerate()
        .filter(|(_, px)| {
            let c = Point2::new(px[0] as f64 + 0.5, px[1] as f64 + 0.5);
            c.x >= lo.x - 1e-9
                && c.x <= hi.x + 1e-9
                && c.y >= lo.y - 1e-9
                && c.y <= hi.y + 1e-9
                && poly.contains(c, 1e-9)
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(SynthError::EmptyCrop);
    }
    Ok(cloud.subset(&keep))
}

/// Random scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterParams {
    pub n_bricks: usize,
    pub dims: BrickDims,
    pub noise_sigma: f64,
    pub camera: CameraModel,
    /// Camera height above the ground, meters.
    pub camera_height: (f64, f64),
    /// Maximum camera tilt away from straight down, radians.
    pub max_camera_tilt: f64,
    /// Maximum brick tilt away from its resting orientation, radians.
    pub max_brick_tilt: f64,
    /// Relative probability of resting on an LW, LH or WH face.
    pub rest_weights: [f64; 3],
    /// Probability that a brick is stacked on an earlier one.
    pub stack_prob: f64,
    /// Half-extent of the square ground region bricks are dropped into, meters.
    pub spread: f64,
    pub render_ground: bool,
}

impl Default for ClutterParams {
    fn default() -> Self {
        Self {
            n_bricks: 6,
            dims: BrickDims::DEFAULT,
            noise_sigma: 0.0,
            camera: CameraModel::default(),
            camera_height: (0.7, 1.0),
            max_camera_tilt: 15f64.to_radians(),
            max_brick_tilt: 10f64.to_radians(),
            rest_weights: [0.6, 0.3, 0.1],
            stack_prob: 0.3,
            spread: 0.2,
            render_ground: false,
        }
    }
}

impl ClutterParams {
    pub fn single_brick() -> Self {
        Self { n_bricks: 1, stack_prob: 0.0, spread: 0.15, ..Self::default() }
    }
}

/// Rotation taking the brick frame so that the given face rests on the ground
/// (world z up).
fn resting_rotation(face: FaceType) -> Matrix3<f64> {
    match face {
        FaceType::LW => Matrix3::identity(),
        // brick y (W) vertical
        FaceType::LH => *Rotation3::from_axis_angle(&Vector3::x_axis(), PI / 2.0).matrix(),
        // brick x (L) vertical
        FaceType::WH => *Rotation3::from_axis_angle(&Vector3::y_axis(), -PI / 2.0).matrix(),
    }
}

fn random_tilt(rng: &mut impl Rng, max: f64) -> Matrix3<f64> {
    if max <= 0.0 {
        return Matrix3::identity();
    }
    let az = rng.random_range(0.0..2.0 * PI);
    let axis = Unit::new_normalize(Vector3::new(az.cos(), az.sin(), 0.0));
    *Rotation3::from_axis_angle(&axis, rng.random_range(0.0..max)).matrix()
}

/// Half-height of a rotated brick along world z.
fn vertical_half_extent(r: &Matrix3<f64>, dims: &BrickDims) -> f64 {
    let half = dims.as_vector() / 2.0;
    (0..3).map(|k| r[(2, k)].abs() * half[k]).sum()
}

/// Builds a random scene: a tilted camera above a ground plane and bricks
/// resting on it or on each other.
pub fn random_scene(params: &ClutterParams, rng: &mut impl Rng) -> Result<SceneSpec, SynthError> {
    params.camera.validate()?;
    let height = rng.random_range(params.camera_height.0..=params.camera_height.1);
    let tilt = random_tilt(rng, params.max_camera_tilt);
    // camera looking straight down: camera z = -world z, camera x = world x
    let down = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let r_wc = tilt * down;
    let cam_pos = Vector3::new(0.0, 0.0, height);
    let look = r_wc.column(2).into_owned();
    let t_hit = -cam_pos.z / look.z;
    let target = cam_pos + look * t_hit;
    let r_cw = r_wc.transpose();
    let to_cam = |r: &Matrix3<f64>, t: &Vector3<f64>| BrickPose {
        rotation: r_cw * r,
        translation: r_cw * (t - cam_pos),
        face: None,
    };

    let total: f64 = params.rest_weights.iter().sum();
    if !(total > 0.0) {
        return Err(SynthError::InvalidScene("rest weights must not all be zero".into()));
    }
    let min_dist = params.dims.max_dim() / 2.0;
    let mut placed: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::new();
    let mut bricks = Vec::new();
    for _ in 0..params.n_bricks {
        for _attempt in 0..200 {
            let pick = rng.random_range(0.0..total);
            let face = if pick < params.rest_weights[0] {
                FaceType::LW
            } else if pick < params.rest_weights[0] + params.rest_weights[1] {
                FaceType::LH
            } else {
                FaceType::WH
            };
            let yaw = *Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..2.0 * PI)).matrix();
            let r = random_tilt(rng, params.max_brick_tilt) * yaw * resting_rotation(face);
            let half_up = vertical_half_extent(&r, &params.dims);
            let stack = !placed.is_empty() && rng.random_bool(params.stack_prob.clamp(0.0, 1.0));
            let t = if stack {
                let (rb, tb) = placed[rng.random_range(0..placed.len())];
                let top = tb.z + vertical_half_extent(&rb, &params.dims);
                let jitter = params.dims.max_dim() * 0.5;
                Vector3::new(
                    tb.x + rng.random_range(-jitter..jitter),
                    tb.y + rng.random_range(-jitter..jitter),
                    top + half_up,
                )
            } else {
                Vector3::new(
                    target.x + rng.random_range(-params.spread..=params.spread),
                    target.y + rng.random_range(-params.spread..=params.spread),
                    half_up,
                )
            };
            if placed.iter().all(|(_, q)| (q - t).norm() >= min_dist) {
                placed.push((r, t));
                bricks.push(SceneBrick {
                    pose: to_cam(&r, &t),
                    dims: params.dims,
                    class_id: if rng.random_bool(0.5) { BrickClass::Blue } else { BrickClass::Green },
                });
                break;
            }
        }
    }
    let ground = params.render_ground.then(|| {
        let n = r_cw * Vector3::z();
        let p0 = r_cw * -cam_pos;
        GroundPlane { normal: n.into(), offset: -n.dot(&p0) }
    });
    Ok(SceneSpec { bricks, camera: params.camera, noise_sigma: params.noise_sigma, ground })
}

/// A random scene from a seed, rendered with a seed derived from it.
pub fn generate(params: &ClutterParams, seed: u64) -> Result<(SceneSpec, RenderedScene), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_scene(params, &mut rng)?;
    let rendered = render_scene(&spec, rng.random())?;
    Ok((spec, rendered))
}
