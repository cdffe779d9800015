use alloc::vec::Vec;
use core::f64::consts::PI;

use super::{Aabb, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::math;

/// Camera lattice above the cloud: `grid_n × grid_n` locations, each with
/// every (yaw, pitch) pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridParams {
    pub grid_n: usize,
    pub yaw_step_deg: f64,
    pub pitches_deg: Vec<f64>,
    /// Height above `aabb.max.z`; `None` means `0.25 × diagonal`.
    pub height: Option<f64>,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { grid_n: 10, yaw_step_deg: 45.0, pitches_deg: alloc::vec![1.0, 30.0, 60.0], height: None }
    }
}

/// Cameras on a hemisphere around the box centre, looking inwards.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HemisphereParams {
    pub radius_scale: f64,
    pub theta_step: f64,
    pub phi_step: f64,
}

impl Default for HemisphereParams {
    fn default() -> Self {
        Self { radius_scale: 0.75, theta_step: PI / 8.0, phi_step: PI / 16.0 }
    }
}

/// `k * step` for `k = 0, 1, ...` while below `end` (or up to `end`
/// inclusive), with a small tolerance against accumulated rounding.
fn steps(step: f64, end: f64, inclusive: bool) -> Vec<f64> {
    let tol = 1e-9 * end.abs().max(1.0);
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let v = k as f64 * step;
        let keep = if inclusive { v <= end + tol } else { v < end - tol };
        if !keep {
            break;
        }
        out.push(v);
        k += 1;
    }
    out
}

fn lattice(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

pub fn grid_viewpoints(aabb: &Aabb, params: &GridParams, intrinsics: Intrinsics) -> Result<Vec<CameraPose>> {
    if params.grid_n == 0 {
        return Err(Error::InvalidArgument("grid_n must be >= 1".into()));
    }
    if !(params.yaw_step_deg > 0.0) {
        return Err(Error::InvalidArgument("yaw step must be positive".into()));
    }
    if aabb.is_empty() {
        return Err(Error::InvalidArgument("empty bounding box".into()));
    }
    let height = params.height.unwrap_or(0.25 * aabb.diagonal());
    if !(height > 0.0) {
        return Err(Error::InvalidArgument("camera height must be positive".into()));
    }
    let z = aabb.max[2] as f64 + height;
    let yaws = steps(params.yaw_step_deg, 360.0, false);
    let n = params.grid_n;
    let mut poses = Vec::with_capacity(n * n * yaws.len() * params.pitches_deg.len());
    for iy in 0..n {
        for ix in 0..n {
            let x = lattice(aabb.min[0] as f64, aabb.max[0] as f64, n, ix);
            let y = lattice(aabb.min[1] as f64, aabb.max[1] as f64, n, iy);
            for &yaw in &yaws {
                for &pitch in &params.pitches_deg {
                    poses.push(CameraPose::from_yaw_pitch([x, y, z], yaw, pitch, intrinsics)?);
                }
            }
        }
    }
    Ok(poses)
}

pub fn hemisphere_viewpoints(
    aabb: &Aabb,
    params: &HemisphereParams,
    intrinsics: Intrinsics,
) -> Result<Vec<CameraPose>> {
    if !(params.radius_scale > 0.0 && params.theta_step > 0.0 && params.phi_step > 0.0) {
        return Err(Error::InvalidArgument("hemisphere steps and scale must be positive".into()));
    }
    let diag = aabb.diagonal();
    if aabb.is_empty() || !(diag > 0.0) {
        return Err(Error::InvalidArgument("degenerate bounding box".into()));
    }
    let r = params.radius_scale * diag;
    let centre = aabb.center();
    let thetas = steps(params.theta_step, 2.0 * PI, false);
    let phis = steps(params.phi_step, 0.5 * PI, true);
    let mut poses = Vec::with_capacity(thetas.len() * phis.len());
    for &phi in &phis {
        // The pole is shared by every theta.
        let ring: &[f64] = if phi == 0.0 { &thetas[..1] } else { &thetas };
        for &theta in ring {
            let dir = [math::sin(phi) * math::cos(theta), math::sin(phi) * math::sin(theta), math::cos(phi)];
            let eye = math::add(centre, math::scale(dir, r));
            poses.push(CameraPose::look_at(eye, centre, intrinsics)?);
        }
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [4.0, 2.0, 1.0])
    }

    #[test]
    fn grid_default_count() {
        let poses = grid_viewpoints(&unit_box(), &GridParams::default(), Intrinsics::default()).unwrap();
        assert_eq!(poses.len(), 10 * 10 * 8 * 3);
    }

    #[test]
    fn grid_single_cell() {
        let p = GridParams { grid_n: 1, yaw_step_deg: 360.0, pitches_deg: alloc::vec![30.0], height: Some(1.0) };
        let poses = grid_viewpoints(&unit_box(), &p, Intrinsics::default()).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].position, [2.0, 1.0, 2.0]);
    }

    #[test]
    fn grid_rejects_bad_yaw_step() {
        let p = GridParams { yaw_step_deg: 0.0, ..GridParams::default() };
        assert!(grid_viewpoints(&unit_box(), &p, Intrinsics::default()).is_err());
    }

    #[test]
    fn hemisphere_default_count_and_radius() {
        let b = unit_box();
        let poses = hemisphere_viewpoints(&b, &HemisphereParams::default(), Intrinsics::default()).unwrap();
        assert_eq!(poses.len(), 16 * 8 + 1);
        let r = 0.75 * b.diagonal();
        for p in &poses {
            let d = math::norm(math::sub(p.position, b.center()));
            assert!((d - r).abs() <= 1e-4 * r);
        }
    }

    #[test]
    fn hemisphere_rejects_point_box() {
        let b = Aabb::new([1.0; 3], [1.0; 3]);
        assert!(hemisphere_viewpoints(&b, &HemisphereParams::default(), Intrinsics::default()).is_err());
    }
}
