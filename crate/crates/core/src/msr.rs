//! Multi-stream rasterizer.
//!
//! Two stages. *Render* projects every point to a single pixel and keeps,
//! per pixel, the point with the smallest `(depth, index)` pair packed into
//! one `u64` (f32 depth bits high, point index low). Because the packed
//! minimum is order independent, the result does not depend on how points
//! are scheduled across threads. *Resolve* expands the winning indices into
//! feature channels; there is no blending across points.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, PointCloud, StreamData};
use crate::math;
use crate::tensor::Tensor;

/// Index-plane value for background pixels.
pub const BACKGROUND: u32 = u32::MAX;
const EMPTY_KEY: u64 = u64::MAX;
/// Upper bound on feature channels.
pub const MAX_CHANNELS: usize = 16;

/// Which derived channels the rasterizer emits.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamSelection {
    pub rgb: bool,
    pub depth: bool,
    pub vel2d: bool,
    pub vel3d: bool,
    /// Pass-through streams, one channel per component.
    pub scalars: Vec<String>,
    /// Append the coverage plane as a channel.
    pub coverage: bool,
    /// Divisor applied to velocity channels.
    pub velocity_scale: f32,
}

impl Default for StreamSelection {
    fn default() -> Self {
        Self::rgb_only()
    }
}

impl StreamSelection {
    pub fn rgb_only() -> Self {
        Self {
            rgb: true,
            depth: false,
            vel2d: false,
            vel3d: false,
            scalars: Vec::new(),
            coverage: false,
            velocity_scale: 1.0,
        }
    }

    pub fn rgb_depth_vel2d(velocity_scale: f32) -> Self {
        Self { depth: true, vel2d: true, velocity_scale, ..Self::rgb_only() }
    }

    /// Channel names in emission order; a pure function of the selection.
    pub fn channel_names(&self, pc: Option<&PointCloud>) -> Result<Vec<String>> {
        let mut names: Vec<String> = Vec::new();
        if self.rgb {
            names.extend(["r", "g", "b"].map(String::from));
        }
        if self.depth {
            names.push("depth".into());
        }
        if self.vel2d {
            names.extend(["vel2d_x", "vel2d_y", "vel2d_theta", "vel2d_mag"].map(String::from));
        }
        if self.vel3d {
            names.extend(["vel3d_x", "vel3d_y", "vel3d_z", "vel3d_mag"].map(String::from));
        }
        for s in &self.scalars {
            let arity = match pc {
                Some(pc) => pc.require_stream(s)?.arity(),
                None => 1,
            };
            if arity == 1 {
                names.push(s.clone());
            } else {
                names.extend((0..arity).map(|k| alloc::format!("{s}.{k}")));
            }
        }
        if self.coverage {
            names.push("coverage".into());
        }
        if names.len() > MAX_CHANNELS {
            return Err(Error::Config(alloc::format!("{} channels exceed the limit of {MAX_CHANNELS}", names.len())));
        }
        if names.is_empty() {
            return Err(Error::Config("no channels selected".into()));
        }
        Ok(names)
    }

    pub fn validate(&self, pc: &PointCloud) -> Result<()> {
        if self.rgb {
            pc.require_stream("rgb")?;
        }
        if self.vel2d || self.vel3d {
            let v = pc.require_stream("velocity")?;
            if v.arity() != 3 {
                return Err(Error::Config("velocity stream must have arity 3".into()));
            }
        }
        if (self.vel2d || self.vel3d) && !(self.velocity_scale > 0.0) {
            return Err(Error::Config("velocity_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Raster output of the multi-stream rasterizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub names: Vec<String>,
    /// `[channels, height, width]`.
    pub features: Tensor<f32>,
    /// 1 where a point landed.
    pub coverage: Vec<u8>,
    /// Winning point per pixel, [`BACKGROUND`] elsewhere.
    pub index: Vec<u32>,
    /// View depth of the winning point, 0 for background.
    pub depth: Vec<f32>,
}

impl FeatureImage {
    pub fn channel(&self, name: &str) -> Option<&[f32]> {
        self.names.iter().position(|n| n == name).map(|c| self.features.plane(c))
    }

    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c != 0).count()
    }
}

/// `(vx, vy, vz, |v|) / scale`.
pub fn encode_vel3d(v: [f32; 3], scale: f32) -> [f32; 4] {
    let n = math::norm(math::to_f64(v)) as f32;
    [v[0] / scale, v[1] / scale, v[2] / scale, n / scale]
}

/// Screen-projected velocity `v' = J v` as `(v'x, v'y, θ, |v'|)`.
///
/// `θ = atan2(-v'y, v'x)` so that angles follow the usual counter-clockwise
/// orientation on a +y-down image; `θ = 0` when `|v'| < 1e-9`.
pub fn encode_vel2d(cam: &CameraPose, p: [f64; 3], v: [f64; 3], scale: f32) -> Result<[f32; 4]> {
    let j = cam.projection_jacobian(p)?;
    let vx = math::dot(j[0], v);
    let vy = math::dot(j[1], v);
    let mag = math::sqrt(vx * vx + vy * vy);
    let theta = if mag < 1e-9 { 0.0 } else { math::atan2(-vy, vx) };
    let s = scale as f64;
    Ok([(vx / s) as f32, (vy / s) as f32, theta as f32, (mag / s) as f32])
}

/// Packed z-buffer key of point `index` if it lands inside the image.
#[inline]
pub fn point_key(cam: &CameraPose, p: [f32; 3], index: u32) -> Option<(usize, u64)> {
    let proj = cam.world_to_screen(math::to_f64(p));
    if proj.culled {
        return None;
    }
    let px = math::floor(proj.x + 0.5);
    let py = math::floor(proj.y + 0.5);
    let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
    if !(px >= 0.0 && py >= 0.0 && px < w && py < h) {
        return None;
    }
    let pixel = py as usize * cam.intrinsics.width as usize + px as usize;
    let depth = proj.depth as f32;
    Some((pixel, ((depth.to_bits() as u64) << 32) | index as u64))
}

fn render_sequential(pc: &PointCloud, cam: &CameraPose, zbuf: &mut [u64]) {
    for (i, &p) in pc.positions().iter().enumerate() {
        if let Some((pixel, key)) = point_key(cam, p, i as u32) {
            if key < zbuf[pixel] {
                zbuf[pixel] = key;
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn render_stage(pc: &PointCloud, cam: &CameraPose, npix: usize) -> Vec<u64> {
    use core::sync::atomic::{AtomicU64, Ordering};
    use rayon::prelude::*;

    if rayon::current_num_threads() <= 1 {
        let mut zbuf = vec![EMPTY_KEY; npix];
        render_sequential(pc, cam, &mut zbuf);
        return zbuf;
    }
    let zbuf: Vec<AtomicU64> = (0..npix).map(|_| AtomicU64::new(EMPTY_KEY)).collect();
    pc.positions().par_chunks(1 << 14).enumerate().for_each(|(chunk, pts)| {
        let base = chunk << 14;
        for (k, &p) in pts.iter().enumerate() {
            if let Some((pixel, key)) = point_key(cam, p, (base + k) as u32) {
                zbuf[pixel].fetch_min(key, Ordering::Relaxed);
            }
        }
    });
    zbuf.into_iter().map(AtomicU64::into_inner).collect()
}

#[cfg(not(feature = "parallel"))]
fn render_stage(pc: &PointCloud, cam: &CameraPose, npix: usize) -> Vec<u64> {
    let mut zbuf = vec![EMPTY_KEY; npix];
    render_sequential(pc, cam, &mut zbuf);
    zbuf
}

/// Fills the feature vector of one covered pixel.
fn resolve_pixel(
    pc: &PointCloud,
    cam: &CameraPose,
    sel: &StreamSelection,
    scalars: &[&StreamData],
    idx: usize,
    depth: f32,
    out: &mut [f32],
) {
    let mut c = 0;
    if sel.rgb {
        let rgb = pc.stream("rgb").expect("validated");
        for k in 0..3 {
            out[c] = rgb.get_f32(idx, k);
            c += 1;
        }
    }
    if sel.depth {
        out[c] = (cam.intrinsics.near as f32 / depth).clamp(0.0, 1.0);
        c += 1;
    }
    if sel.vel2d || sel.vel3d {
        let vel = pc.stream("velocity").expect("validated");
        let v = [vel.get_f32(idx, 0), vel.get_f32(idx, 1), vel.get_f32(idx, 2)];
        if sel.vel2d {
            let p = math::to_f64(pc.positions()[idx]);
            // Winning points are never culled, so the Jacobian exists.
            let enc = encode_vel2d(cam, p, math::to_f64(v), sel.velocity_scale).unwrap_or([0.0; 4]);
            out[c..c + 4].copy_from_slice(&enc);
            c += 4;
        }
        if sel.vel3d {
            out[c..c + 4].copy_from_slice(&encode_vel3d(v, sel.velocity_scale));
            c += 4;
        }
    }
    for s in scalars {
        for k in 0..s.arity() {
            out[c] = s.get_f32(idx, k);
            c += 1;
        }
    }
    if sel.coverage {
        out[c] = 1.0;
    }
}

/// Rasterizes `pc` from `cam` into a multi-channel feature image.
pub fn rasterize(pc: &PointCloud, cam: &CameraPose, sel: &StreamSelection) -> Result<FeatureImage> {
    sel.validate(pc)?;
    let names = sel.channel_names(Some(pc))?;
    let scalars: Vec<&StreamData> = sel.scalars.iter().map(|s| pc.require_stream(s)).collect::<Result<_>>()?;
    if pc.len() >= BACKGROUND as usize {
        return Err(Error::InvalidArgument("point count exceeds the 32-bit index range".into()));
    }
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    let npix = w * h;
    let zbuf = render_stage(pc, cam, npix);

    let nc = names.len();
    let mut index = vec![BACKGROUND; npix];
    let mut depth = vec![0.0f32; npix];
    let mut coverage = vec![0u8; npix];
    // Interleaved scratch, transposed to planes below.
    let mut interleaved = vec![0.0f32; npix * nc];
    {
        let resolve_row = |y: usize, feat: &mut [f32], idx_row: &mut [u32], d_row: &mut [f32], cov: &mut [u8]| {
            for x in 0..w {
                let key = zbuf[y * w + x];
                if key == EMPTY_KEY {
                    continue;
                }
                let i = (key & 0xffff_ffff) as usize;
                let d = f32::from_bits((key >> 32) as u32);
                idx_row[x] = i as u32;
                d_row[x] = d;
                cov[x] = 1;
                resolve_pixel(pc, cam, sel, &scalars, i, d, &mut feat[x * nc..(x + 1) * nc]);
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            interleaved
                .par_chunks_mut(w * nc)
                .zip(index.par_chunks_mut(w))
                .zip(depth.par_chunks_mut(w))
                .zip(coverage.par_chunks_mut(w))
                .enumerate()
                .for_each(|(y, (((f, i), d), c))| resolve_row(y, f, i, d, c));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for (y, (((f, i), d), c)) in interleaved
                .chunks_mut(w * nc)
                .zip(index.chunks_mut(w))
                .zip(depth.chunks_mut(w))
                .zip(coverage.chunks_mut(w))
                .enumerate()
            {
                resolve_row(y, f, i, d, c);
            }
        }
    }
    let mut planes = vec![0.0f32; npix * nc];
    for (p, px) in interleaved.chunks_exact(nc).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planes[c * npix + p] = v;
        }
    }
    let features = Tensor::from_vec(&[nc, h, w], planes)?;
    Ok(FeatureImage { width: w, height: h, names, features, coverage, index, depth })
}
