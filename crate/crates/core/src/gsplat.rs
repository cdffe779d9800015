//! Gaussian splat reference renderer.
//!
//! Each point becomes a 3D Gaussian: elongated along its velocity for flow
//! data, isotropic with a 4-NN radius for terrain. Frames are rendered on
//! the CPU in 16×16 tiles by front-to-back alpha compositing. The global
//! depth order is fixed before binning, so tiles can be processed in any
//! order without changing the output.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{knn_avg_distance, CameraPose, PointCloud};
use crate::math::{self, Mat3, Vec3};
use crate::tensor::Tensor;

pub const TILE: usize = 16;
/// Screen-space low-pass added to every projected covariance, px².
pub const LOWPASS_PX2: f64 = 0.3;
/// Compositing stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1.0 / 255.0;
const MAX_CONDITION: f64 = 1e12;

/// Per-splat Gaussian parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplatSet {
    pub means: Vec<[f32; 3]>,
    /// Symmetric, world units².
    pub covariances: Vec<[[f32; 3]; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
}

impl SplatSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if self.covariances.len() != n || self.colors.len() != n || self.opacities.len() != n {
            return Err(Error::Shape("splat arrays are not length-aligned".into()));
        }
        for cov in &self.covariances {
            let m = mat_to_f64(cov);
            for i in 0..3 {
                for j in 0..3 {
                    if (m[i][j] - m[j][i]).abs() > 1e-6 * (1.0 + m[i][j].abs()) {
                        return Err(Error::InvalidArgument("covariance not symmetric".into()));
                    }
                }
            }
            if math::symmetric_eigen(&m).0[2] < -1e-9 {
                return Err(Error::InvalidArgument("covariance not positive semi-definite".into()));
            }
        }
        if self.opacities.iter().any(|&o| !(o > 0.0 && o <= 1.0)) {
            return Err(Error::InvalidArgument("opacity outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// How points are turned into splats.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SplatStyle {
    /// Gaussians stretched along the `velocity` stream.
    VectorField {
        stretch: f64,
        /// Use `diag(s², 1, 1)` instead of `diag(s, 1, 1)`.
        square_scales: bool,
        /// Multiplies every covariance; `None` means `(0.5 × median 4-NN)²`.
        base_scale: Option<f64>,
        opacity: f32,
        /// Magnitude mapped to the top of the colormap; `None` means the
        /// 99th percentile of `|v|`.
        velocity_scale: Option<f32>,
    },
    /// Isotropic Gaussians with the mean 4-NN distance as radius, coloured
    /// by the `rgb` stream.
    Terrain { opacity: f32 },
}

impl SplatStyle {
    pub fn vector_field(stretch: f64) -> Self {
        SplatStyle::VectorField { stretch, square_scales: false, base_scale: None, opacity: 0.8, velocity_scale: None }
    }
}

fn mat_to_f64(m: &[[f32; 3]; 3]) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[i][j] as f64;
        }
    }
    out
}

fn mat_to_f32(m: &Mat3) -> [[f32; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[i][j] as f32;
        }
    }
    out
}

/// Right-handed orthonormal basis whose first column is `v / |v|`.
pub fn rotation_from_dominant_axis(v: Vec3) -> Result<Mat3> {
    let e1 = math::normalize(v).ok_or_else(|| Error::InvalidArgument("zero direction vector".into()))?;
    let helper = if math::dot(e1, [0.0, 0.0, 1.0]).abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let e2 = math::normalize(math::cross(helper, e1)).expect("helper is not parallel to e1");
    let e3 = math::cross(e1, e2);
    Ok([[e1[0], e2[0], e3[0]], [e1[1], e2[1], e3[1]], [e1[2], e2[2], e3[2]]])
}

/// `R · diag(s, 1, 1) · Rᵀ` with `R` from [`rotation_from_dominant_axis`].
pub fn covariance_from_vector(v: Vec3, stretch: f64, square_scales: bool) -> Result<Mat3> {
    if !(stretch > 0.0) {
        return Err(Error::InvalidArgument("stretch factor must be positive".into()));
    }
    let r = rotation_from_dominant_axis(v)?;
    let major = if square_scales { stretch * stretch } else { stretch };
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // The two minor axes have unit variance: R S Rᵀ = I + (major - 1) e1 e1ᵀ.
            let id = if i == j { 1.0 } else { 0.0 };
            out[i][j] = id + (major - 1.0) * r[i][0] * r[j][0];
        }
    }
    Ok(out)
}

pub fn isotropic_covariance(radius: f64) -> Result<Mat3> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let r2 = radius * radius;
    Ok([[r2, 0.0, 0.0], [0.0, r2, 0.0], [0.0, 0.0, r2]])
}

/// Screen-space Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    /// `[[a, b], [b, c]]`, px².
    pub cov: [[f64; 2]; 2],
    pub depth: f64,
}

/// `μ' = project(mean)`, `Σ' = J Σ Jᵀ + 0.3 I`.
pub fn project_gaussian(cam: &CameraPose, mean: Vec3, cov: &Mat3) -> Result<ProjectedGaussian> {
    let proj = cam.world_to_screen(mean);
    if proj.culled {
        return Err(Error::Culled);
    }
    let j = cam.projection_jacobian(mean)?;
    let mut js = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            js[r][c] = (0..3).map(|k| j[r][k] * cov[k][c]).sum();
        }
    }
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = (0..3).map(|k| js[r][k] * j[c][k]).sum();
        }
    }
    // Exact symmetry regardless of summation order.
    let off = 0.5 * (out[0][1] + out[1][0]);
    out[0][1] = off;
    out[1][0] = off;
    out[0][0] += LOWPASS_PX2;
    out[1][1] += LOWPASS_PX2;
    Ok(ProjectedGaussian { mean: [proj.x, proj.y], cov: out, depth: proj.depth })
}

/// Viridis-like piecewise-linear colormap over `t ∈ [0, 1]`.
pub fn colormap(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.229, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) } * 4.0;
    let i = (t as usize).min(3);
    let f = t - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let g = 1.0 - f;
    [a[0] * g + b[0] * f, a[1] * g + b[1] * f, a[2] * g + b[2] * f]
}

/// 99th percentile of `|v|` over the `velocity` stream, at least `1e-12`.
pub fn velocity_percentile(pc: &PointCloud) -> Result<f32> {
    let vel = pc.require_stream("velocity")?;
    if pc.is_empty() {
        return Ok(1.0);
    }
    let mut mags: Vec<f32> = (0..pc.len())
        .map(|i| math::norm([vel.get_f32(i, 0) as f64, vel.get_f32(i, 1) as f64, vel.get_f32(i, 2) as f64]) as f32)
        .collect();
    mags.sort_by(f32::total_cmp);
    let rank = ((0.99 * (mags.len() - 1) as f64) + 0.5) as usize;
    Ok(mags[rank].max(1e-12))
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

pub fn build_splats(pc: &PointCloud, style: SplatStyle) -> Result<SplatSet> {
    let n = pc.len();
    let means = pc.positions().to_vec();
    match style {
        SplatStyle::VectorField { stretch, square_scales, base_scale, opacity, velocity_scale } => {
            let vel = pc.require_stream("velocity")?;
            if vel.arity() != 3 {
                return Err(Error::Config("velocity stream must have arity 3".into()));
            }
            let base = match base_scale {
                Some(b) => b,
                None if n >= 2 => {
                    let nn = median(knn_avg_distance(pc, 4)?) as f64;
                    let b = (0.5 * nn) * (0.5 * nn);
                    if b > 0.0 {
                        b
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            let vscale = match velocity_scale {
                Some(s) => s,
                None => velocity_percentile(pc)?,
            };
            let mut covariances = Vec::with_capacity(n);
            let mut colors = Vec::with_capacity(n);
            for i in 0..n {
                let v = [vel.get_f32(i, 0) as f64, vel.get_f32(i, 1) as f64, vel.get_f32(i, 2) as f64];
                let mag = math::norm(v);
                let cov = if mag > 0.0 {
                    covariance_from_vector(v, stretch, square_scales)?
                } else {
                    isotropic_covariance(1.0)?
                };
                let mut scaled = [[0.0; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        scaled[r][c] = base * cov[r][c];
                    }
                }
                covariances.push(mat_to_f32(&scaled));
                colors.push(colormap(mag as f32 / vscale));
            }
            Ok(SplatSet { means, covariances, colors, opacities: vec![opacity; n] })
        }
        SplatStyle::Terrain { opacity } => {
            let rgb = pc.require_stream("rgb")?;
            let radii = if n >= 2 { knn_avg_distance(pc, 4)? } else { vec![1.0; n] };
            let mut covariances = Vec::with_capacity(n);
            for &r in &radii {
                let r = if r > 0.0 { r as f64 } else { 1e-6 };
                covariances.push(mat_to_f32(&isotropic_covariance(r)?));
            }
            let colors = (0..n).map(|i| [rgb.get_f32(i, 0), rgb.get_f32(i, 1), rgb.get_f32(i, 2)]).collect();
            Ok(SplatSet { means, covariances, colors, opacities: vec![opacity; n] })
        }
    }
}

/// A splat ready for compositing.
#[derive(Debug, Clone, Copy)]
struct ScreenSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    bbox: [i64; 4],
    color: [f32; 3],
    opacity: f64,
}

/// Rendered frame plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatRender {
    /// `[3, height, width]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Remaining transmittance per pixel.
    pub transmittance: Vec<f32>,
    /// Splats dropped for an ill-conditioned screen covariance.
    pub skipped: usize,
}

fn prepare(splats: &SplatSet, cam: &CameraPose) -> (Vec<ScreenSplat>, usize) {
    let (w, h) = (cam.intrinsics.width as i64, cam.intrinsics.height as i64);
    let mut skipped = 0usize;
    let mut visible: Vec<(f64, usize, ScreenSplat)> = Vec::new();
    for i in 0..splats.len() {
        let mean = math::to_f64(splats.means[i]);
        let Ok(g) = project_gaussian(cam, mean, &mat_to_f64(&splats.covariances[i])) else {
            continue;
        };
        let [[a, b], [_, c]] = g.cov;
        let det = a * c - b * b;
        let tr_half = 0.5 * (a + c);
        let disc = math::sqrt((tr_half * tr_half - det).max(0.0));
        let (lmax, lmin) = (tr_half + disc, tr_half - disc);
        if !(lmin > 0.0) || !(det > 0.0) || lmax / lmin > MAX_CONDITION || !g.mean[0].is_finite() {
            skipped += 1;
            continue;
        }
        let (rx, ry) = (3.0 * math::sqrt(a), 3.0 * math::sqrt(c));
        let bbox = [
            libm::ceil(g.mean[0] - rx) as i64,
            libm::ceil(g.mean[1] - ry) as i64,
            math::floor(g.mean[0] + rx) as i64,
            math::floor(g.mean[1] + ry) as i64,
        ];
        if bbox[2] < 0 || bbox[3] < 0 || bbox[0] >= w || bbox[1] >= h || bbox[0] > bbox[2] || bbox[1] > bbox[3] {
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let s = ScreenSplat { mean: g.mean, conic, bbox, color: splats.colors[i], opacity: splats.opacities[i] as f64 };
        visible.push((g.depth, i, s));
    }
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (visible.into_iter().map(|v| v.2).collect(), skipped)
}

fn shade_tile(
    tile_x: usize,
    tile_y: usize,
    w: usize,
    h: usize,
    list: &[u32],
    screen: &[ScreenSplat],
) -> Vec<([f32; 3], f32)> {
    let x0 = tile_x * TILE;
    let y0 = tile_y * TILE;
    let x1 = (x0 + TILE).min(w);
    let y1 = (y0 + TILE).min(h);
    let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        for x in x0..x1 {
            let mut t = 1.0f64;
            let mut col = [0.0f64; 3];
            for &si in list {
                let s = &screen[si as usize];
                let (xi, yi) = (x as i64, y as i64);
                if xi < s.bbox[0] || xi > s.bbox[2] || yi < s.bbox[1] || yi > s.bbox[3] {
                    continue;
                }
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let maha = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                let alpha = (s.opacity * math::exp(-0.5 * maha)).min(1.0);
                for k in 0..3 {
                    col[k] += s.color[k] as f64 * alpha * t;
                }
                t *= 1.0 - alpha;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            out.push(([col[0] as f32, col[1] as f32, col[2] as f32], t as f32));
        }
    }
    out
}

/// Front-to-back alpha compositing of all splats on a black background.
pub fn render_gsplat(splats: &SplatSet, cam: &CameraPose) -> Result<SplatRender> {
    let n = splats.len();
    if splats.covariances.len() != n || splats.colors.len() != n || splats.opacities.len() != n {
        return Err(Error::Shape("splat arrays are not length-aligned".into()));
    }
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    let (screen, skipped) = prepare(splats, cam);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in screen.iter().enumerate() {
        let tx0 = (s.bbox[0].max(0) as usize) / TILE;
        let ty0 = (s.bbox[1].max(0) as usize) / TILE;
        let tx1 = (s.bbox[2].min(w as i64 - 1) as usize) / TILE;
        let ty1 = (s.bbox[3].min(h as i64 - 1) as usize) / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    let shade = |t: usize| shade_tile(t % tiles_x, t / tiles_x, w, h, &bins[t], &screen);
    #[cfg(feature = "parallel")]
    let tiles: Vec<Vec<([f32; 3], f32)>> = {
        use rayon::prelude::*;
        (0..bins.len()).into_par_iter().map(shade).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let tiles: Vec<Vec<([f32; 3], f32)>> = (0..bins.len()).map(shade).collect();

    let npix = w * h;
    let mut image = vec![0.0f32; 3 * npix];
    let mut transmittance = vec![1.0f32; npix];
    for (t, pixels) in tiles.iter().enumerate() {
        let (x0, y0) = ((t % tiles_x) * TILE, (t / tiles_x) * TILE);
        let tw = (x0 + TILE).min(w) - x0;
        for (k, (rgb, tr)) in pixels.iter().enumerate() {
            let p = (y0 + k / tw) * w + x0 + k % tw;
            for c in 0..3 {
                image[c * npix + p] = rgb[c].clamp(0.0, 1.0);
            }
            transmittance[p] = *tr;
        }
    }
    Ok(SplatRender { image: Tensor::from_vec(&[3, h, w], image)?, transmittance, skipped })
}
