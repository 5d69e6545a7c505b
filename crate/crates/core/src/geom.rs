//! Rigid transforms, pinhole cameras, voxel grids and projection.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames are
//! x right, y down, z along the optical axis. Pixel `(u, v)` is measured
//! from the top-left corner with pixel centers at integer + 0.5.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or closer than this camera-frame depth never project.
pub const NEAR_PLANE: f64 = 0.01;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(m, Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = p.rotation[(i, j)];
            }
        }
        PoseRepr {
            rotation,
            translation: p.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    /// Checked constructor: `rotation` must be orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("RᵀR deviates from I by {err:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds from a quaternion, which is normalized first.
    pub fn from_quaternion(q: nalgebra::Quaternion<f64>, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(q);
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: t,
        }
    }

    /// Builds from an axis-angle vector (axis scaled by angle in radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::z() * yaw, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_points(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|p| self.apply(p)).collect()
    }
}

/// Result of projecting an ego-frame point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera with an ego-to-camera extrinsic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_from_ego: Pose,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    cam_from_ego: Pose,
}

impl TryFrom<CameraRepr> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRepr) -> Result<Self> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, r.cam_from_ego)
    }
}

impl From<CameraModel> for CameraRepr {
    fn from(c: CameraModel) -> Self {
        CameraRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            cam_from_ego: c.cam_from_ego,
        }
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_from_ego: Pose,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("zero-sized image".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_from_ego,
        })
    }

    /// Camera mounted at `position` (ego frame) looking horizontally along
    /// ego yaw `yaw`, square pixels, principal point at the image center.
    pub fn looking_along(
        yaw: f64,
        position: Vector3<f64>,
        hfov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let ego_from_cam = Matrix3::from_columns(&[right, down, forward]);
        let ego_from_cam = Pose::new(ego_from_cam, position)?;
        Self::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            ego_from_cam.invert(),
        )
    }

    pub fn ego_from_cam(&self) -> Pose {
        self.cam_from_ego.invert()
    }

    /// Camera center in the ego frame.
    pub fn center_ego(&self) -> Vector3<f64> {
        *self.ego_from_cam().translation()
    }

    /// Ego-frame unit direction of the ray through image point `(u, v)`.
    pub fn ray_direction_ego(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.cam_from_ego.rotation().transpose() * d).normalize()
    }

    pub fn project(&self, pt_ego: &Vector3<f64>) -> Option<Projection> {
        let pc = self.cam_from_ego.apply(pt_ego);
        if pc.z <= NEAR_PLANE {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        let inside = (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        inside.then_some(Projection { u, v, depth: pc.z })
    }
}

pub fn project(cam: &CameraModel, pt_ego: &Vector3<f64>) -> Option<Projection> {
    cam.project(pt_ego)
}

/// True when the point projects into at least one camera.
pub fn in_frustum(cams: &[CameraModel], pt_ego: &Vector3<f64>) -> bool {
    cams.iter().any(|c| c.project(pt_ego).is_some())
}

/// Integer voxel coordinate inside a [`GridSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey(pub [i32; 3]);

impl VoxelKey {
    pub fn offset(self, d: [i32; 3]) -> VoxelKey {
        VoxelKey([self.0[0] + d[0], self.0[1] + d[1], self.0[2] + d[2]])
    }

    /// Key of the parent voxel on a grid with twice the pitch.
    pub fn parent(self) -> VoxelKey {
        VoxelKey(self.0.map(|k| k.div_euclid(2)))
    }
}

/// Axis-aligned voxel grid over `[p_min, p_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct GridSpec {
    p_min: Vector3<f64>,
    p_max: Vector3<f64>,
    voxel_size: Vector3<f64>,
    dims: [i32; 3],
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    p_min: [f64; 3],
    p_max: [f64; 3],
    voxel_size: [f64; 3],
}

impl TryFrom<GridRepr> for GridSpec {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        GridSpec::new(r.p_min.into(), r.p_max.into(), r.voxel_size.into())
    }
}

impl From<GridSpec> for GridRepr {
    fn from(g: GridSpec) -> Self {
        GridRepr {
            p_min: g.p_min.into(),
            p_max: g.p_max.into(),
            voxel_size: g.voxel_size.into(),
        }
    }
}

impl GridSpec {
    pub fn new(p_min: Vector3<f64>, p_max: Vector3<f64>, voxel_size: Vector3<f64>) -> Result<Self> {
        let mut dims = [0i32; 3];
        for a in 0..3 {
            if !(p_min[a].is_finite() && p_max[a].is_finite() && voxel_size[a].is_finite()) {
                return Err(Error::InvalidGrid("non-finite bounds".into()));
            }
            if p_min[a] >= p_max[a] {
                return Err(Error::InvalidGrid(format!("p_min >= p_max on axis {a}")));
            }
            if voxel_size[a] <= 0.0 {
                return Err(Error::InvalidGrid(format!("voxel size on axis {a} is {}", voxel_size[a])));
            }
            let n = ((p_max[a] - p_min[a]) / voxel_size[a]).ceil();
            if n > i32::MAX as f64 {
                return Err(Error::InvalidGrid(format!("{n} voxels on axis {a}")));
            }
            dims[a] = n as i32;
        }
        Ok(Self {
            p_min,
            p_max,
            voxel_size,
            dims,
        })
    }

    /// Desk-scale default: [-16, -16, -2] to [16, 16, 6] m at (0.25, 0.25, 0.5) m.
    pub fn desk() -> Self {
        Self::new(
            Vector3::new(-16.0, -16.0, -2.0),
            Vector3::new(16.0, 16.0, 6.0),
            Vector3::new(0.25, 0.25, 0.5),
        )
        .expect("static grid")
    }

    /// Full-size driving volume: [-72, -72, -4] to [72, 72, 12] m at (0.1, 0.1, 0.2) m.
    pub fn paper_scale() -> Self {
        Self::new(
            Vector3::new(-72.0, -72.0, -4.0),
            Vector3::new(72.0, 72.0, 12.0),
            Vector3::new(0.1, 0.1, 0.2),
        )
        .expect("static grid")
    }

    pub fn p_min(&self) -> &Vector3<f64> {
        &self.p_min
    }

    pub fn p_max(&self) -> &Vector3<f64> {
        &self.p_max
    }

    pub fn voxel_size(&self) -> &Vector3<f64> {
        &self.voxel_size
    }

    pub fn dims(&self) -> [i32; 3] {
        self.dims
    }

    pub fn contains_key(&self, k: VoxelKey) -> bool {
        (0..3).all(|a| k.0[a] >= 0 && k.0[a] < self.dims[a])
    }

    /// Floor-indexed voxel of `p`, or `None` outside `[p_min, p_max)`.
    pub fn key_of(&self, p: &Vector3<f64>) -> Option<VoxelKey> {
        let mut k = [0i32; 3];
        for a in 0..3 {
            if !(p[a] >= self.p_min[a] && p[a] < self.p_max[a]) {
                return None;
            }
            let i = ((p[a] - self.p_min[a]) / self.voxel_size[a]).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            k[a] = i as i32;
        }
        Some(VoxelKey(k))
    }

    pub fn center(&self, k: VoxelKey) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.p_min[a] + (k.0[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Min and max corners of the voxel's cuboid.
    pub fn cuboid(&self, k: VoxelKey) -> (Vector3<f64>, Vector3<f64>) {
        let lo = Vector3::from_fn(|a, _| self.p_min[a] + k.0[a] as f64 * self.voxel_size[a]);
        (lo, lo + self.voxel_size)
    }

    /// Grid with doubled pitch over the same origin, used by pooling stages.
    pub fn coarsened(&self) -> GridSpec {
        let voxel_size = self.voxel_size * 2.0;
        let dims = self.dims.map(|d| (d + 1) / 2);
        GridSpec {
            p_min: self.p_min,
            p_max: self.p_max,
            voxel_size,
            dims,
        }
    }

    /// Bit-level equality, used to reject mixing scaffolds.
    pub fn same_as(&self, other: &GridSpec) -> bool {
        let bits = |v: &Vector3<f64>| v.map(f64::to_bits);
        bits(&self.p_min) == bits(&other.p_min)
            && bits(&self.p_max) == bits(&other.p_max)
            && bits(&self.voxel_size) == bits(&other.voxel_size)
            && self.dims == other.dims
    }
}
