use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Shared pinhole intrinsics. Pixel centres sit on integer coordinates,
/// origin top-left, +y down.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intrinsics {
    pub fov_y_deg: f64,
    pub near: f64,
    pub far: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fov_y_deg: 60.0, near: 0.1, far: 2.0e5, width: 512, height: 512 }
    }
}

impl Intrinsics {
    pub fn with_size(width: u32, height: u32) -> Self {
        Self { width, height, ..Self::default() }
    }

    /// Focal length in pixels.
    #[inline]
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / math::tan(0.5 * self.fov_y_deg.to_radians())
    }

    #[inline]
    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// Distance along the camera forward axis.
    pub depth: f64,
    /// `depth <= near` or `depth >= far`.
    pub culled: bool,
}

/// Camera extrinsics plus intrinsics.
///
/// `rotation` is world-to-camera with rows (right, down, forward).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraPose {
    pub position: Vec3,
    pub rotation: Mat3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(position: Vec3, rotation: Mat3, intrinsics: Intrinsics) -> Result<Self> {
        if math::orthonormality_error(&rotation) > 1e-6 || math::det(&rotation) < 0.0 {
            return Err(Error::InvalidArgument("camera rotation is not a proper rotation".into()));
        }
        if !(intrinsics.near > 0.0 && intrinsics.near < intrinsics.far) {
            return Err(Error::InvalidArgument("need 0 < near < far".into()));
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(Self { position, rotation, intrinsics })
    }

    /// Camera at `eye` looking at `target` with +z as world up.
    ///
    /// When the view direction is (anti)parallel to +z the +y axis is used
    /// as the up hint instead.
    pub fn look_at(eye: Vec3, target: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = math::normalize(math::sub(target, eye))
            .ok_or_else(|| Error::InvalidArgument("eye and target coincide".into()))?;
        let up = if math::dot(forward, [0.0, 0.0, 1.0]).abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        Self::from_forward(eye, forward, up, intrinsics)
    }

    /// Camera from yaw (about +z, from +x) and pitch (positive looks down),
    /// both in degrees.
    pub fn from_yaw_pitch(eye: Vec3, yaw_deg: f64, pitch_deg: f64, intrinsics: Intrinsics) -> Result<Self> {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let forward = [math::cos(pitch) * math::cos(yaw), math::cos(pitch) * math::sin(yaw), -math::sin(pitch)];
        Self::look_at(eye, math::add(eye, forward), intrinsics)
    }

    fn from_forward(eye: Vec3, forward: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let right = math::normalize(math::cross(forward, up))
            .ok_or_else(|| Error::InvalidArgument("degenerate up vector".into()))?;
        let down = math::cross(forward, right);
        Self::new(eye, [right, down, forward], intrinsics)
    }

    #[inline]
    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        math::mat_vec(&self.rotation, math::sub(p, self.position))
    }

    /// Pinhole projection; culled points still carry their coordinates.
    #[inline]
    pub fn world_to_screen(&self, p: Vec3) -> Projection {
        let c = self.to_camera(p);
        let depth = c[2];
        let f = self.intrinsics.focal_px();
        let (cx, cy) = self.intrinsics.principal_point();
        let culled = !(depth > self.intrinsics.near && depth < self.intrinsics.far);
        let (x, y) =
            if depth.abs() > 0.0 { (f * c[0] / depth + cx, f * c[1] / depth + cy) } else { (f64::NAN, f64::NAN) };
        Projection { x, y, depth, culled }
    }

    /// `∂(x_px, y_px) / ∂(world position)` at `p`.
    pub fn projection_jacobian(&self, p: Vec3) -> Result<[[f64; 3]; 2]> {
        let c = self.to_camera(p);
        let z = c[2];
        if !(z > self.intrinsics.near && z < self.intrinsics.far) {
            return Err(Error::Culled);
        }
        let f = self.intrinsics.focal_px();
        let cam = [[f / z, 0.0, -f * c[0] / (z * z)], [0.0, f / z, -f * c[1] / (z * z)]];
        let r = &self.rotation;
        let mut j = [[0.0; 3]; 2];
        for row in 0..2 {
            for col in 0..3 {
                j[row][col] = (0..3).map(|k| cam[row][k] * r[k][col]).sum();
            }
        }
        Ok(j)
    }
}
