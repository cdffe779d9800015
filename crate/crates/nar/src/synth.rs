//! Procedural point clouds standing in for measured scientific data.

use std::str::FromStr;

use nar_core::gsplat::colormap;
use nar_core::{PointCloud, Stream, StreamData};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    VortexField,
    StormTrajectories,
    Terrain,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vortex_field" => Ok(Self::VortexField),
            "storm_trajectories" => Ok(Self::StormTrajectories),
            "terrain" => Ok(Self::Terrain),
            _ => Err(Error::InvalidArgument(format!(
                "unknown kind `{s}` (expected vortex_field, storm_trajectories or terrain)"
            ))),
        }
    }
}

pub const MIN_POINTS: usize = 1000;

/// Extent of the flow volume: `x, y ∈ [-1, 1]`, `z ∈ [0, 1]`.
pub const FLOW_MIN: [f32; 3] = [-1.0, -1.0, 0.0];
pub const FLOW_MAX: [f32; 3] = [1.0, 1.0, 1.0];

/// `v(x, y, z) = (−y, x, 0.1·sin z)`.
pub fn vortex_velocity(p: [f32; 3]) -> [f32; 3] {
    [-p[1], p[0], (0.1 * (p[2] as f64).sin()) as f32]
}

fn speed_color(v: [f32; 3], vmax: f32) -> [u8; 3] {
    let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    colormap((m / vmax).clamp(0.0, 1.0)).map(|c| (c * 255.0).round() as u8)
}

/// Largest vortex speed inside the flow volume, reached at an xy corner
/// with z = 1.
fn vortex_vmax() -> f32 {
    let vz = 0.1 * 1f64.sin();
    (2.0 + vz * vz).sqrt() as f32
}

fn flow_cloud(positions: Vec<[f32; 3]>, velocity: Vec<[f32; 3]>) -> Result<PointCloud> {
    let vmax = vortex_vmax();
    let rgb: Vec<u8> = velocity.iter().flat_map(|&v| speed_color(v, vmax)).collect();
    let vel: Vec<f32> = velocity.iter().flatten().copied().collect();
    Ok(PointCloud::new(
        positions,
        vec![
            Stream { name: "rgb".into(), data: StreamData::U8 { arity: 3, data: rgb } },
            Stream { name: "velocity".into(), data: StreamData::F32 { arity: 3, data: vel } },
        ],
    )?)
}

/// Jittered stratified samples in the flow volume: the first `n` cells of
/// a seeded shuffle of a `k³` lattice, one uniform point per cell.
fn vortex_field(n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let k = (n as f64).cbrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..k * k * k).collect();
    cells.shuffle(rng);
    let mut positions = Vec::with_capacity(n);
    for &cell in &cells[..n] {
        let (i, j, l) = (cell % k, (cell / k) % k, cell / (k * k));
        let mut p = [0f32; 3];
        for (axis, idx) in [i, j, l].into_iter().enumerate() {
            let t = (idx as f64 + rng.random::<f64>()) / k as f64;
            p[axis] = (FLOW_MIN[axis] as f64 + t * (FLOW_MAX[axis] - FLOW_MIN[axis]) as f64) as f32;
        }
        positions.push(p);
    }
    let velocity = positions.iter().map(|&p| vortex_velocity(p)).collect();
    flow_cloud(positions, velocity)
}

pub const TRAJECTORY_STEPS: usize = 50;
const TRAJECTORY_DT: f64 = 0.04;

/// Polylines advected through the vortex field with midpoint steps; each
/// vertex carries the tangent of its outgoing segment.
fn storm_trajectories(n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let field = |p: [f64; 3]| {
        let v = vortex_velocity([p[0] as f32, p[1] as f32, p[2] as f32]);
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };
    let mut positions = Vec::with_capacity(n);
    let mut velocity = Vec::with_capacity(n);
    while positions.len() < n {
        let mut p: [f64; 3] =
            core::array::from_fn(|a| FLOW_MIN[a] as f64 + rng.random::<f64>() * (FLOW_MAX[a] - FLOW_MIN[a]) as f64);
        let len = TRAJECTORY_STEPS.min(n - positions.len());
        let mut line = Vec::with_capacity(len + 1);
        line.push(p);
        for _ in 0..len {
            let v = field(p);
            let mid = [
                p[0] + 0.5 * TRAJECTORY_DT * v[0],
                p[1] + 0.5 * TRAJECTORY_DT * v[1],
                p[2] + 0.5 * TRAJECTORY_DT * v[2],
            ];
            let vm = field(mid);
            p = [p[0] + TRAJECTORY_DT * vm[0], p[1] + TRAJECTORY_DT * vm[1], p[2] + TRAJECTORY_DT * vm[2]];
            line.push(p);
        }
        for k in 0..len {
            let (a, b) = (line[k], line[k + 1]);
            positions.push([a[0] as f32, a[1] as f32, a[2] as f32]);
            velocity.push([
                ((b[0] - a[0]) / TRAJECTORY_DT) as f32,
                ((b[1] - a[1]) / TRAJECTORY_DT) as f32,
                ((b[2] - a[2]) / TRAJECTORY_DT) as f32,
            ]);
        }
    }
    flow_cloud(positions, velocity)
}

/// Seeded fractal value noise used as the terrain height field.
#[derive(Debug, Clone)]
pub struct Terrain {
    lattice: Vec<f64>,
}

const LATTICE: usize = 64;
const OCTAVES: usize = 5;

impl Terrain {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e44_a1ee);
        Self { lattice: (0..LATTICE * LATTICE).map(|_| rng.random::<f64>()).collect() }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let at = |i: i64, j: i64| {
            let (i, j) = (i.rem_euclid(LATTICE as i64) as usize, j.rem_euclid(LATTICE as i64) as usize);
            self.lattice[j * LATTICE + i]
        };
        let (i, j) = (fx as i64, fy as i64);
        let a = at(i, j) + sx * (at(i + 1, j) - at(i, j));
        let b = at(i, j + 1) + sx * (at(i + 1, j + 1) - at(i, j + 1));
        a + sy * (b - a)
    }

    /// Height at `(x, y)` for `x, y ∈ [-1, 1]`, roughly in `[0, 0.4]`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (mut amp, mut freq, mut h) = (0.2, 2.0, 0.0);
        for o in 0..OCTAVES {
            let off = 7.3 * o as f64;
            h += amp * self.value((x + 1.0) * freq + off, (y + 1.0) * freq + off);
            amp *= 0.5;
            freq *= 2.0;
        }
        h
    }
}

fn terrain(n: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let field = Terrain::new(seed);
    let mut positions = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(3 * n);
    let light = [-0.5f64, -0.4, 0.77];
    let ln = (light[0] * light[0] + light[1] * light[1] + light[2] * light[2]).sqrt();
    let e = 1e-3;
    for _ in 0..n {
        let x = rng.random::<f64>() * 2.0 - 1.0;
        let y = rng.random::<f64>() * 2.0 - 1.0;
        let z = field.height(x, y);
        let dx = (field.height(x + e, y) - field.height(x - e, y)) / (2.0 * e);
        let dy = (field.height(x, y + e) - field.height(x, y - e)) / (2.0 * e);
        let nl = (dx * dx + dy * dy + 1.0).sqrt();
        let shade = ((-dx * light[0] - dy * light[1] + light[2]) / (nl * ln)).clamp(0.0, 1.0);
        let base = colormap((z / 0.4).clamp(0.0, 1.0) as f32);
        positions.push([x as f32, y as f32, z as f32]);
        for c in base {
            rgb.push(((0.25 + 0.75 * shade) * c as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(PointCloud::new(positions, vec![Stream { name: "rgb".into(), data: StreamData::U8 { arity: 3, data: rgb } }])?)
}

/// Deterministic synthetic cloud of `n` points (`n ≥ 1000`).
pub fn make_synthetic_pc(kind: SynthKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_POINTS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_POINTS} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::VortexField => vortex_field(n, &mut rng),
        SynthKind::StormTrajectories => storm_trajectories(n, &mut rng),
        SynthKind::Terrain => terrain(n, seed, &mut rng),
    }
}
