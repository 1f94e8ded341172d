//! Brick poses: surface identification from edge lengths, the face-to-brick
//! relative transform, topmost selection, placement checks and the
//! wall-building simulation.

use nalgebra::{Matrix3, Point3, Rotation3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::cloud::{
    boundary_points, corner_points, pair_corners_to_edges, ransac_lines, ransac_plane, surface_pose, CloudError,
    Corner, Edge, Line3, PlaneModel, PointCloud, RansacParams, SurfacePose, DEFAULT_BOUNDARY_GAP, DEFAULT_BOUNDARY_K,
    DEFAULT_MAX_LINES,
};
use crate::geom::RotatedBox;
use crate::synth::{crop_brick_cloud, SynthError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("invalid brick dimensions: {0}")]
    InvalidDims(String),
    #[error("need at least one edge length, got {found}")]
    NotEnoughEdges { found: usize },
    #[error("edge lengths {lengths:?} match no face within tolerance")]
    NoMatch { lengths: Vec<f64> },
    #[error("edge lengths {lengths:?} match several faces: {candidates:?}")]
    Ambiguous { lengths: Vec<f64>, candidates: Vec<FaceType> },
    #[error("surface frame is not orthonormal and right-handed")]
    InvalidFrame,
    #[error("no poses to choose from")]
    EmptyInput,
    #[error("face corners do not contain two adjacent edges ({edges} edges found)")]
    IncompleteFace { edges: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Brick dimensions in meters, `l >= w >= h > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct BrickDims {
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

impl BrickDims {
    /// Ratio between consecutive dimensions below which faces are hard to tell apart.
    pub const DISTINCT_RATIO: f64 = 1.05;

    pub const DEFAULT: BrickDims = BrickDims { l: 0.20, w: 0.09, h: 0.06 };

    pub fn new(l: f64, w: f64, h: f64) -> Result<Self, PoseError> {
        if !(l.is_finite() && w.is_finite() && h.is_finite()) || !(h > 0.0) {
            return Err(PoseError::InvalidDims(format!("({l}, {w}, {h}) must be finite and positive")));
        }
        if !(l >= w && w >= h) {
            return Err(PoseError::InvalidDims(format!("({l}, {w}, {h}) must satisfy L >= W >= H")));
        }
        Ok(Self { l, w, h })
    }

    /// True when two consecutive dimensions are within [`Self::DISTINCT_RATIO`].
    pub fn is_ambiguous(&self) -> bool {
        self.l / self.w <= Self::DISTINCT_RATIO || self.w / self.h <= Self::DISTINCT_RATIO
    }

    /// Edge lengths of a face, longer first, and the thickness orthogonal to it.
    pub fn face_extent(&self, face: FaceType) -> (f64, f64, f64) {
        match face {
            FaceType::LW => (self.l, self.w, self.h),
            FaceType::LH => (self.l, self.h, self.w),
            FaceType::WH => (self.w, self.h, self.l),
        }
    }

    pub fn max_dim(&self) -> f64 {
        self.l
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.l, self.w, self.h)
    }
}

impl Default for BrickDims {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<[f64; 3]> for BrickDims {
    type Error = PoseError;
    fn try_from(v: [f64; 3]) -> Result<Self, PoseError> {
        BrickDims::new(v[0], v[1], v[2])
    }
}

impl From<BrickDims> for [f64; 3] {
    fn from(d: BrickDims) -> Self {
        [d.l, d.w, d.h]
    }
}

impl std::str::FromStr for BrickDims {
    type Err = PoseError;
    fn from_str(s: &str) -> Result<Self, PoseError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PoseError::InvalidDims(format!("{s:?}: {e}")))?;
        match parts[..] {
            [l, w, h] => BrickDims::new(l, w, h),
            _ => Err(PoseError::InvalidDims(format!("{s:?}: expected L,W,H"))),
        }
    }
}

/// A face type, named by the two brick dimensions spanning it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaceType {
    LW,
    LH,
    WH,
}

impl FaceType {
    pub const ALL: [FaceType; 3] = [FaceType::LW, FaceType::LH, FaceType::WH];

    pub fn as_str(self) -> &'static str {
        match self {
            FaceType::LW => "LW",
            FaceType::LH => "LH",
            FaceType::WH => "WH",
        }
    }

    /// Brick axis (0 = x/L, 1 = y/W, 2 = z/H) orthogonal to the face.
    pub fn normal_axis(self) -> usize {
        match self {
            FaceType::LW => 2,
            FaceType::LH => 1,
            FaceType::WH => 0,
        }
    }
}

impl fmt::Display for FaceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceSide {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

/// One of the six faces: type plus the sign of its outward normal along the brick axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaceId {
    pub face: FaceType,
    pub side: FaceSide,
}

impl FaceId {
    /// Outward unit normal in brick coordinates.
    pub fn normal(&self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.face.normal_axis()] = if self.side == FaceSide::Plus { 1.0 } else { -1.0 };
        n
    }

    pub fn all() -> [FaceId; 6] {
        let mut out = [FaceId { face: FaceType::LW, side: FaceSide::Plus }; 6];
        for (i, f) in FaceType::ALL.iter().enumerate() {
            out[2 * i] = FaceId { face: *f, side: FaceSide::Plus };
            out[2 * i + 1] = FaceId { face: *f, side: FaceSide::Minus };
        }
        out
    }
}

/// Rigid brick pose: `rotation` maps brick coordinates (x along L, y along W,
/// z along H, origin at the centroid) into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct BrickPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub face: Option<FaceType>,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    face: Option<FaceType>,
}

impl TryFrom<PoseJson> for BrickPose {
    type Error = PoseError;
    fn try_from(j: PoseJson) -> Result<Self, PoseError> {
        let r = Matrix3::from_fn(|i, k| j.r[i][k]);
        let pose = BrickPose { rotation: r, translation: Vector3::from(j.t), face: j.face };
        // JSON keeps 9 significant digits, so allow for rounding
        if !pose.is_valid(1e-6) {
            return Err(PoseError::InvalidFrame);
        }
        Ok(pose)
    }
}

impl From<BrickPose> for PoseJson {
    fn from(p: BrickPose) -> Self {
        PoseJson {
            r: std::array::from_fn(|i| std::array::from_fn(|k| p.rotation[(i, k)])),
            t: p.translation.into(),
            face: p.face,
        }
    }
}

impl BrickPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        let pose = BrickPose { rotation, translation, face: None };
        if pose.is_valid(1e-9) {
            Ok(pose)
        } else {
            Err(PoseError::InvalidFrame)
        }
    }

    pub fn identity() -> Self {
        BrickPose { rotation: Matrix3::identity(), translation: Vector3::zeros(), face: None }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol) && self.translation.iter().all(|v| v.is_finite())
    }

    /// Brick-frame point to camera frame.
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Camera-frame point to brick frame.
    pub fn inverse_apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// `(R, t) * self`, i.e. the pose after moving the whole scene rigidly.
    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        BrickPose { rotation: r * self.rotation, translation: r * self.translation + t, face: self.face }
    }

    pub fn with_face(mut self, face: FaceType) -> Self {
        self.face = Some(face);
        self
    }
}

fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
        && (r.determinant() - 1.0).abs() <= tol
}

/// Default edge-length matching tolerance in meters.
pub const DEFAULT_SURFACE_TOL: f64 = 0.01;

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Identifies which face type a set of measured edge lengths belongs to.
///
/// Lengths are split into two groups at the largest gap when that gap
/// exceeds `tol`. Two groups must match a face's (long, short) pair; a single
/// group matches every face with an edge of that length.
pub fn identify_surface(edges: &[f64], dims: &BrickDims, tol: f64) -> Result<FaceType, PoseError> {
    if edges.is_empty() {
        return Err(PoseError::NotEnoughEdges { found: 0 });
    }
    if !(tol > 0.0) {
        return Err(PoseError::InvalidParams(format!("tolerance {tol} must be positive")));
    }
    let mut sorted = edges.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (split, gap) = sorted.windows(2).enumerate().map(|(i, w)| (i + 1, w[1] - w[0])).fold((0, 0.0), |best, cur| {
        if cur.1 > best.1 {
            cur
        } else {
            best
        }
    });
    let groups: Vec<f64> =
        if gap > tol { vec![median(&sorted[split..]), median(&sorted[..split])] } else { vec![median(&sorted)] };
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    let candidates: Vec<FaceType> = FaceType::ALL
        .into_iter()
        .filter(|&f| {
            let (a, b, _) = dims.face_extent(f);
            match groups[..] {
                [long, short] => close(long, a) && close(short, b),
                [only] => close(only, a) || close(only, b),
                _ => unreachable!(),
            }
        })
        .collect();
    match candidates.len() {
        0 => Err(PoseError::NoMatch { lengths: sorted }),
        1 => Ok(candidates[0]),
        _ => Err(PoseError::Ambiguous { lengths: sorted, candidates }),
    }
}

/// Assembles the brick pose from a visible face's frame.
///
/// `sp.major` must follow the face's longer edge and `sp.normal` its outward
/// normal. The brick centroid sits half the face thickness behind the face.
pub fn brick_pose_from_surface(sp: &SurfacePose, face: FaceType, dims: &BrickDims) -> Result<BrickPose, PoseError> {
    if !sp.is_right_handed(1e-6) {
        return Err(PoseError::InvalidFrame);
    }
    let (e1, e2, e3) = (sp.major, sp.minor, sp.normal);
    let cols = match face {
        FaceType::LW => [e1, e2, e3],
        FaceType::LH => [e1, e3, -e2],
        FaceType::WH => [e3, e1, e2],
    };
    let (_, _, thickness) = dims.face_extent(face);
    Ok(BrickPose {
        rotation: Matrix3::from_columns(&cols),
        translation: sp.centroid.coords - e3 * (thickness / 2.0),
        face: Some(face),
    })
}

/// Proper rotations mapping a cuboid with distinct edge lengths onto itself.
pub fn cuboid_symmetries() -> [Matrix3<f64>; 4] {
    [
        Matrix3::identity(),
        Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
        Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0)),
        Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
    ]
}

/// Intrinsic X-Y-Z Euler angles `(a, b, c)` with `R = Rx(a) Ry(b) Rz(c)`, radians.
pub fn euler_xyz(r: &Matrix3<f64>) -> [f64; 3] {
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    if r[(0, 2)].abs() < 1.0 - 1e-12 {
        [(-r[(1, 2)]).atan2(r[(2, 2)]), b, (-r[(0, 1)]).atan2(r[(0, 0)])]
    } else {
        // gimbal lock: fold the whole residual into the first angle
        [r[(1, 0)].atan2(r[(1, 1)]), b, 0.0]
    }
}

pub fn rotation_from_euler_xyz(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), a);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), c);
    *(rx * ry * rz).matrix()
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Difference between an estimated and a reference pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDiff {
    /// Centroid distance in meters.
    pub translation: f64,
    /// Geodesic rotation error in degrees.
    pub rotation_deg: f64,
    /// Absolute intrinsic XYZ Euler angles of the residual rotation, degrees.
    pub euler_deg: [f64; 3],
}

impl PoseDiff {
    pub fn max_euler_deg(&self) -> f64 {
        self.euler_deg.iter().copied().fold(0.0, f64::max)
    }
}

/// Pose error modulo the cuboid symmetry group: the symmetric equivalent of
/// `estimate` closest to `truth` is compared.
pub fn pose_error(estimate: &BrickPose, truth: &BrickPose) -> PoseDiff {
    let base = truth.rotation.transpose() * estimate.rotation;
    let residual = cuboid_symmetries()
        .iter()
        .map(|s| base * s)
        .min_by(|a, b| rotation_angle(a).total_cmp(&rotation_angle(b)))
        .expect("group is non-empty");
    PoseDiff {
        translation: (estimate.translation - truth.translation).norm(),
        rotation_deg: rotation_angle(&residual).to_degrees(),
        euler_deg: euler_xyz(&residual).map(|a| a.abs().to_degrees()),
    }
}

/// Index of the pose highest along `up`; ties go to the lowest index.
pub fn select_topmost(poses: &[BrickPose], up: &Vector3<f64>) -> Result<usize, PoseError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in poses.iter().enumerate() {
        let h = p.translation.dot(up);
        if best.is_none_or(|(_, bh)| h > bh) {
            best = Some((i, h));
        }
    }
    best.map(|(i, _)| i).ok_or(PoseError::EmptyInput)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementCriteria {
    /// Maximum centroid distance after projection onto the ground plane, meters.
    pub max_centroid_dist: f64,
    /// Maximum absolute Euler angle difference per axis, degrees.
    pub max_euler_deg: f64,
}

impl Default for PlacementCriteria {
    fn default() -> Self {
        Self { max_centroid_dist: 0.1, max_euler_deg: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub success: bool,
    pub centroid_err: f64,
    pub euler_err: [f64; 3],
}

/// Compares a placed brick with its reference.
pub fn placement_check(
    pose: &BrickPose,
    reference: &BrickPose,
    criteria: &PlacementCriteria,
    ground_normal: &Vector3<f64>,
) -> PlacementReport {
    let n = ground_normal.normalize();
    let d = pose.translation - reference.translation;
    let centroid_err = (d - n * n.dot(&d)).norm();
    let residual = reference.rotation.transpose() * pose.rotation;
    let euler_err = euler_xyz(&residual).map(|a| a.abs().to_degrees());
    let success = centroid_err < criteria.max_centroid_dist && euler_err.iter().all(|&e| e < criteria.max_euler_deg);
    PlacementReport { success, centroid_err, euler_err }
}

/// Placement noise: isotropic Gaussian horizontal offset (m) and rotation
/// vector (rad) added to every robot placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementNoise {
    pub sigma_t: f64,
    pub sigma_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallParams {
    pub rounds: usize,
    /// Total layers including the manually placed first one.
    pub layers: usize,
    pub noise: PlacementNoise,
    pub dims: BrickDims,
    pub criteria: PlacementCriteria,
    pub up: [f64; 3],
    pub seed: u64,
}

impl Default for WallParams {
    fn default() -> Self {
        Self {
            rounds: 25,
            layers: 6,
            noise: PlacementNoise { sigma_t: 0.0, sigma_r: 0.0 },
            dims: BrickDims::DEFAULT,
            criteria: PlacementCriteria::default(),
            up: [0.0, 0.0, 1.0],
            seed: 7,
        }
    }
}

/// Successful rounds per robot-placed layer (layer 2 onward).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WallReport {
    pub rounds: usize,
    pub layers: Vec<usize>,
    pub successes: Vec<usize>,
}

/// Per-round seed derived from the base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Simulates wall building.
///
/// The first layer is placed exactly. Every later brick is aimed at the
/// previously placed brick stacked by one brick height along its own
/// vertical axis, then perturbed by the noise model, so placement errors
/// chain upward. A placement succeeds when it passes [`placement_check`]
/// against the first-layer brick; a round counts for a layer only if every
/// placement up to that layer succeeded.
pub fn simulate_wall(params: &WallParams) -> Result<WallReport, PoseError> {
    let up = Vector3::from(params.up)
        .try_normalize(1e-12)
        .ok_or_else(|| PoseError::InvalidParams("up vector is zero".into()))?;
    if params.layers < 1 {
        return Err(PoseError::InvalidParams("need at least one layer".into()));
    }
    let PlacementNoise { sigma_t, sigma_r } = params.noise;
    if !(sigma_t >= 0.0 && sigma_r >= 0.0) {
        return Err(PoseError::InvalidParams("noise must be non-negative".into()));
    }
    // brick z along up, so the stacking axis is the brick's own z
    let base_rot = rotation_aligning_z(&up);
    let manual = BrickPose { rotation: base_rot, translation: up * (params.dims.h / 2.0), face: None };
    let ground_axes = {
        let a = base_rot.column(0).into_owned();
        let b = base_rot.column(1).into_owned();
        (a, b)
    };
    let t_noise = Normal::new(0.0, sigma_t).expect("sigma checked");
    let r_noise = Normal::new(0.0, sigma_r).expect("sigma checked");

    let mut successes = vec![0usize; params.layers - 1];
    for round in 0..params.rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, round as u64));
        let mut previous = manual;
        for layer in 1..params.layers {
            let z = previous.rotation.column(2).into_owned();
            let target = BrickPose {
                rotation: previous.rotation,
                translation: previous.translation + z * params.dims.h,
                face: None,
            };
            let offset = ground_axes.0 * t_noise.sample(&mut rng) + ground_axes.1 * t_noise.sample(&mut rng);
            let rotvec = Vector3::new(r_noise.sample(&mut rng), r_noise.sample(&mut rng), r_noise.sample(&mut rng));
            let placed = BrickPose {
                rotation: Rotation3::new(rotvec).matrix() * target.rotation,
                translation: target.translation + offset,
                face: None,
            };
            if !placement_check(&placed, &manual, &params.criteria, &up).success {
                break;
            }
            successes[layer - 1] += 1;
            previous = placed;
        }
    }
    Ok(WallReport { rounds: params.rounds, layers: (2..=params.layers).collect(), successes })
}

/// A rotation whose third column is `up`.
fn rotation_aligning_z(up: &Vector3<f64>) -> Matrix3<f64> {
    match Rotation3::rotation_between(&Vector3::z(), up) {
        Some(r) => *r.matrix(),
        // up = -z
        None => Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
    }
}

/// Parameters of the full cloud-to-pose pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub plane: RansacParams,
    pub line: RansacParams,
    pub boundary_k: usize,
    pub boundary_gap: f64,
    pub max_lines: usize,
    pub corner_max_gap: f64,
    pub surface_tol: f64,
    pub dims: BrickDims,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            plane: RansacParams::plane(),
            line: RansacParams::line(),
            boundary_k: DEFAULT_BOUNDARY_K,
            boundary_gap: DEFAULT_BOUNDARY_GAP,
            max_lines: DEFAULT_MAX_LINES,
            corner_max_gap: 0.02,
            surface_tol: DEFAULT_SURFACE_TOL,
            dims: BrickDims::DEFAULT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Crop,
    Plane,
    SurfacePose,
    Boundary,
    Lines,
    Corners,
    Edges,
    IdentifySurface,
    BrickPose,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError { stage, source: e.into() }
}

/// Every intermediate product of the pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub crop: PointCloud,
    pub plane: PlaneModel,
    /// Principal-axis frame of the plane inliers.
    pub surface: SurfacePose,
    /// Indices into `crop`.
    pub boundary: Vec<usize>,
    pub lines: Vec<Line3>,
    pub corners: Vec<Corner>,
    pub edges: Vec<Edge>,
    pub face: FaceType,
    /// Face frame rebuilt from the corners; this one drives the brick pose.
    pub refined: SurfacePose,
    pub pose: BrickPose,
}

/// Runs crop, plane, surface pose, boundary, lines, corners, edges, surface
/// identification and the relative transform on one detected box.
pub fn estimate_brick_pose(
    cloud: &PointCloud,
    region: &RotatedBox,
    params: &PipelineParams,
) -> Result<PipelineOutput, PipelineError> {
    let crop = crop_brick_cloud(cloud, region).map_err(at(Stage::Crop))?;
    estimate_from_crop(crop, params)
}

/// The pipeline without the cropping step.
pub fn estimate_from_crop(crop: PointCloud, params: &PipelineParams) -> Result<PipelineOutput, PipelineError> {
    let plane = ransac_plane(&crop, &params.plane).map_err(at(Stage::Plane))?;
    let plane = face_support(&crop, plane, params.plane.threshold);
    let surface = surface_pose(&crop, &plane).map_err(at(Stage::SurfacePose))?;
    let boundary =
        boundary_points(&crop, &plane, params.boundary_k, params.boundary_gap).map_err(at(Stage::Boundary))?;
    let lines = ransac_lines(&crop, &boundary, &plane, &params.line, params.max_lines).map_err(at(Stage::Lines))?;
    let corners = corner_points(&crop, &lines, &plane, params.corner_max_gap);
    let edges = pair_corners_to_edges(&corners, lines.len());
    let lengths: Vec<f64> = edges.iter().map(|e| e.length).collect();
    let face = identify_surface(&lengths, &params.dims, params.surface_tol).map_err(at(Stage::IdentifySurface))?;
    let refined = face_frame(&plane, &surface, &corners, &edges).map_err(at(Stage::Edges))?;
    let pose = brick_pose_from_surface(&refined, face, &params.dims).map_err(at(Stage::BrickPose))?;
    Ok(PipelineOutput { crop, plane, surface, boundary, lines, corners, edges, face, refined, pose })
}

/// Re-selects the face points with a band scaled to the measured noise.
///
/// A fixed threshold drops noisy face points (leaving holes that read as
/// boundary) and, on clean data, admits a strip of the neighbouring face.
/// Four robust standard deviations avoids both.
fn face_support(crop: &PointCloud, plane: PlaneModel, threshold: f64) -> PlaneModel {
    let pts = crop.points();
    let mut res: Vec<f64> = plane.inliers.iter().map(|&i| plane.signed_distance(&pts[i]).abs()).collect();
    res.sort_by(f64::total_cmp);
    let sigma = 1.4826 * res[res.len() / 2];
    let band = (4.0 * sigma).clamp(1e-6, 2.0 * threshold);
    let inliers: Vec<usize> = (0..pts.len()).filter(|&i| plane.signed_distance(&pts[i]).abs() <= band).collect();
    if inliers.len() < 3 {
        return plane;
    }
    PlaneModel { inliers, ..plane }
}

/// Cosine below which two edges count as perpendicular.
const PERPENDICULAR_COS: f64 = 0.34;

/// Rebuilds the face frame from its recovered corners.
///
/// Requires two edges meeting at a corner. The in-plane orientation is the
/// length-weighted mean of all edge directions modulo a quarter turn, the
/// major axis is the one nearest the longest edge, and the center is the
/// mean of four corners or the midpoint of the open diagonal of three.
fn face_frame(
    plane: &PlaneModel,
    surface: &SurfacePose,
    corners: &[Corner],
    edges: &[Edge],
) -> Result<SurfacePose, PoseError> {
    let flat = |p: &Point3<f64>| plane.to_plane_coords(p);
    let dir = |e: &Edge| flat(&corners[e.corners.1].point) - flat(&corners[e.corners.0].point);
    // adjacent pair: two edges sharing a corner at roughly a right angle
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            let (a, b) = (&edges[i], &edges[j]);
            let shared = [a.corners.0, a.corners.1].into_iter().any(|c| c == b.corners.0 || c == b.corners.1);
            let cos = dir(a).normalize().dot(&dir(b).normalize()).abs();
            if shared && cos < PERPENDICULAR_COS {
                let score = a.length + b.length;
                if best.is_none_or(|(_, _, s)| score > s) {
                    best = Some((i, j, score));
                }
            }
        }
    }
    let Some((i, j, _)) = best else {
        return Err(PoseError::IncompleteFace { edges: edges.len() });
    };

    // orientation modulo pi/2 via the quadrupled angle
    let mut acc = Vector2::zeros();
    for e in edges {
        let d = dir(e);
        let a = d.y.atan2(d.x) * 4.0;
        acc += Vector2::new(a.cos(), a.sin()) * e.length;
    }
    let phi = acc.y.atan2(acc.x) / 4.0;
    let longest = if edges[i].length >= edges[j].length { &edges[i] } else { &edges[j] };
    let ld = dir(longest).normalize();
    let cand = [Vector2::new(phi.cos(), phi.sin()), Vector2::new(-phi.sin(), phi.cos())];
    let major2 = if cand[0].dot(&ld).abs() >= cand[1].dot(&ld).abs() { cand[0] } else { cand[1] };

    let mut ids: Vec<usize> = Vec::new();
    for e in edges {
        for c in [e.corners.0, e.corners.1] {
            if !ids.contains(&c) {
                ids.push(c);
            }
        }
    }
    let center2 = if ids.len() >= 4 {
        ids.iter().map(|&c| flat(&corners[c].point)).sum::<Vector2<f64>>() / ids.len() as f64
    } else {
        let (a, b) = (&edges[i], &edges[j]);
        let shared = if a.corners.0 == b.corners.0 || a.corners.0 == b.corners.1 { a.corners.0 } else { a.corners.1 };
        let other = |e: &Edge| if e.corners.0 == shared { e.corners.1 } else { e.corners.0 };
        (flat(&corners[other(a)].point) + flat(&corners[other(b)].point)) / 2.0
    };
    let (u, v) = plane.basis();
    let major = u * major2.x + v * major2.y;
    SurfacePose::from_axes(plane.from_plane_coords(&center2), surface.normal, major).ok_or(PoseError::InvalidFrame)
}
