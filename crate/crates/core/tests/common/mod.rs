#![allow(dead_code)]

use nar_core::{CameraPose, Intrinsics, PointCloud, Stream, StreamData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, with_velocity: bool) -> PointCloud {
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let mut streams = vec![Stream {
        name: "rgb".into(),
        data: StreamData::U8 { arity: 3, data: (0..3 * n).map(|_| rng.random()).collect() },
    }];
    if with_velocity {
        streams.push(Stream {
            name: "velocity".into(),
            data: StreamData::F32 { arity: 3, data: (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect() },
        });
    }
    PointCloud::new(positions, streams).unwrap()
}

/// Camera outside the unit cube looking roughly at the origin.
pub fn random_camera(rng: &mut ChaCha8Rng, width: u32, height: u32) -> CameraPose {
    loop {
        let eye = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let r: f64 = eye.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if r < 2.0 {
            continue;
        }
        let target = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        if let Ok(c) = CameraPose::look_at(eye, target, Intrinsics::with_size(width, height)) {
            return c;
        }
    }
}
