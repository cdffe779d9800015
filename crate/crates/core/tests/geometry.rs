#![allow(clippy::needless_range_loop)]

mod common;

use common::{random_camera, random_cloud, rng};
use nar_core::geometry::{
    grid_viewpoints, hemisphere_viewpoints, knn_avg_distance, morton_key, morton_reorder, GridParams, HemisphereParams,
};
use nar_core::math;
use nar_core::{Aabb, CameraPose, Intrinsics, PointCloud, Stream, StreamData};
use proptest::prelude::*;
use rand::Rng;

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    (1..max, any::<u64>()).prop_map(|(n, seed)| random_cloud(&mut rng(seed), n, true))
}

fn point_tuple(pc: &PointCloud, i: usize) -> (Vec<u32>, Vec<u32>) {
    let pos = pc.positions()[i].iter().map(|v| v.to_bits()).collect();
    let mut attrs = Vec::new();
    for s in pc.streams() {
        for k in 0..s.data.arity() {
            attrs.push(s.data.get_f32(i, k).to_bits());
        }
    }
    (pos, attrs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subsample_is_stream_aligned(pc in cloud_strategy(400), factor in 1usize..12) {
        let sub = pc.subsample(factor).unwrap();
        prop_assert_eq!(sub.len(), pc.len().div_ceil(factor));
        for j in 0..sub.len() {
            prop_assert_eq!(point_tuple(&sub, j), point_tuple(&pc, j * factor));
        }
    }

    #[test]
    fn subsample_by_one_is_identity(pc in cloud_strategy(200)) {
        prop_assert_eq!(pc.subsample(1).unwrap(), pc);
    }

    #[test]
    fn morton_reorder_is_a_permutation(pc in cloud_strategy(300)) {
        let out = morton_reorder(&pc);
        let mut a: Vec<_> = (0..pc.len()).map(|i| point_tuple(&pc, i)).collect();
        let mut b: Vec<_> = (0..out.len()).map(|i| point_tuple(&out, i)).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn aabb_contains_every_position(pc in cloud_strategy(300)) {
        let b = pc.aabb();
        prop_assert!(pc.positions().iter().all(|&p| b.contains(p)));
    }
}

#[test]
fn subsample_of_hundred_by_ten() {
    let positions: Vec<[f32; 3]> = (0..100).map(|i| [i as f32, 0.0, 0.0]).collect();
    let pc = PointCloud::new(positions, vec![]).unwrap();
    let sub = pc.subsample(10).unwrap();
    let xs: Vec<f32> = sub.positions().iter().map(|p| p[0]).collect();
    assert_eq!(xs, (0..10).map(|i| (i * 10) as f32).collect::<Vec<_>>());
    assert!(pc.subsample(0).is_err());
}

/// Bit-by-bit interleave, independent of the magic-mask spread.
fn oracle_key(p: [f32; 3], b: &Aabb) -> u64 {
    let q = |v: f32, lo: f32, hi: f32| -> u64 {
        let e = hi as f64 - lo as f64;
        if e <= 0.0 {
            return 0;
        }
        let t = ((v as f64 - lo as f64) / e).clamp(0.0, 1.0);
        (t * ((1u64 << 21) - 1) as f64).round() as u64
    };
    let qs = [q(p[0], b.min[0], b.max[0]), q(p[1], b.min[1], b.max[1]), q(p[2], b.min[2], b.max[2])];
    let mut key = 0u64;
    for bit in 0..21 {
        for (axis, qa) in qs.iter().enumerate() {
            key |= ((qa >> bit) & 1) << (3 * bit + axis);
        }
    }
    key
}

#[test]
fn morton_order_matches_interleave_and_sort_oracle() {
    let pc = random_cloud(&mut rng(11), 1000, false);
    let b = pc.aabb();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by_key(|&i| (oracle_key(pc.positions()[i], &b), i));
    for &i in &order[..50] {
        assert_eq!(morton_key(pc.positions()[i], &b), oracle_key(pc.positions()[i], &b));
    }
    let expected: Vec<[f32; 3]> = order.iter().map(|&i| pc.positions()[i]).collect();
    assert_eq!(morton_reorder(&pc).positions(), &expected[..]);
}

#[test]
fn morton_extremes() {
    let pc = random_cloud(&mut rng(3), 200, false);
    let b = pc.aabb();
    assert_eq!(morton_key(b.min, &b), 0);
    assert_eq!(morton_key(b.max, &b), (1u64 << 63) - 1);
    let mut pts = pc.positions().to_vec();
    pts.push(b.max);
    pts.insert(5, b.min);
    let pc = PointCloud::new(pts, vec![]).unwrap();
    let out = morton_reorder(&pc);
    assert_eq!(out.positions()[0], b.min);
    assert_eq!(*out.positions().last().unwrap(), b.max);
}

fn knn_oracle(pc: &PointCloud, k: usize) -> Vec<f64> {
    let p = pc.positions();
    let k = k.min(p.len() - 1);
    (0..p.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..p.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = (0..3).map(|a| (p[i][a] as f64 - p[j][a] as f64).powi(2)).sum();
                    (s.sqrt(), j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().map(|x| x.0).sum::<f64>() / k as f64
        })
        .collect()
}

#[test]
fn knn_matches_all_pairs_oracle() {
    for (seed, n, k) in [(1u64, 500usize, 4usize), (2, 50, 4), (3, 5, 4), (4, 300, 1), (5, 1000, 8)] {
        let pc = random_cloud(&mut rng(seed), n, false);
        let got = knn_avg_distance(&pc, k).unwrap();
        let want = knn_oracle(&pc, k);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "n={n} k={k}: {g} vs {w}");
        }
    }
}

#[test]
fn knn_on_clustered_points() {
    // Dense clump plus far outliers stresses the grid cell sizing.
    let mut r = rng(9);
    let mut pts: Vec<[f32; 3]> =
        (0..400).map(|_| [r.random_range(0.0..0.01), r.random_range(0.0..0.01), 0.0]).collect();
    pts.extend([[100.0, 0.0, 0.0], [0.0, 100.0, 50.0], [-80.0, 3.0, 9.0]]);
    let pc = PointCloud::new(pts, vec![]).unwrap();
    let got = knn_avg_distance(&pc, 4).unwrap();
    for (g, w) in got.iter().zip(knn_oracle(&pc, 4)) {
        assert!((*g as f64 - w).abs() < 1e-6 * w.max(1.0));
    }
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut o = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            o[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

/// Viewport · projection · view as homogeneous 4×4 matrices.
fn projection_matrix(cam: &CameraPose) -> [[f64; 4]; 4] {
    let r = cam.rotation;
    let t = math::mat_vec(&r, cam.position);
    let view = [
        [r[0][0], r[0][1], r[0][2], -t[0]],
        [r[1][0], r[1][1], r[1][2], -t[1]],
        [r[2][0], r[2][1], r[2][2], -t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let i = cam.intrinsics;
    let f = 1.0 / (i.fov_y_deg.to_radians() / 2.0).tan();
    let aspect = i.width as f64 / i.height as f64;
    let (n, fa) = (i.near, i.far);
    let proj = [
        [f / aspect, 0.0, 0.0, 0.0],
        [0.0, f, 0.0, 0.0],
        [0.0, 0.0, (fa + n) / (fa - n), -2.0 * fa * n / (fa - n)],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let (w, h) = (i.width as f64, i.height as f64);
    let viewport =
        [[w / 2.0, 0.0, 0.0, w / 2.0], [0.0, h / 2.0, 0.0, h / 2.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    mat4_mul(&viewport, &mat4_mul(&proj, &view))
}

#[test]
fn projection_matches_homogeneous_matrix_oracle() {
    let mut r = rng(21);
    let mut checked = 0;
    for _ in 0..200 {
        let (w, h) = (r.random_range(16..800), r.random_range(16..800));
        let cam = random_camera(&mut r, w, h);
        let m = projection_matrix(&cam);
        for _ in 0..20 {
            let p = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
            let got = cam.world_to_screen(p);
            let h: Vec<f64> = (0..4).map(|row| (0..3).map(|k| m[row][k] * p[k]).sum::<f64>() + m[row][3]).collect();
            if got.culled {
                continue;
            }
            assert!((got.x - h[0] / h[3]).abs() < 1e-4 && (got.y - h[1] / h[3]).abs() < 1e-4);
            assert!((got.depth - h[3]).abs() < 1e-9 * h[3].abs().max(1.0));
            checked += 1;
        }
    }
    assert!(checked > 3000);
}

#[test]
fn jacobian_matches_finite_differences_on_1000_cases() {
    let mut r = rng(5);
    let mut n = 0;
    while n < 1000 {
        let cam = random_camera(&mut r, 512, 512);
        let p = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let Ok(j) = cam.projection_jacobian(p) else { continue };
        let depth = cam.world_to_screen(p).depth;
        let u = loop {
            let v = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            if let Some(u) = math::normalize(v) {
                break u;
            }
        };
        let eps = 1e-4 * depth;
        let a = cam.world_to_screen(math::add(p, math::scale(u, eps)));
        let b = cam.world_to_screen(math::sub(p, math::scale(u, eps)));
        for row in 0..2 {
            let lin: f64 = (0..3).map(|k| j[row][k] * u[k] * eps).sum();
            let fd = if row == 0 { (a.x - b.x) / 2.0 } else { (a.y - b.y) / 2.0 };
            assert!((lin - fd).abs() < 1e-3, "{lin} vs {fd}");
        }
        n += 1;
    }
}

fn assert_orthonormal(c: &CameraPose) {
    assert!(math::orthonormality_error(&c.rotation) < 1e-6);
    assert!((math::det(&c.rotation) - 1.0).abs() < 1e-6);
}

#[test]
fn grid_defaults_give_2400_valid_poses() {
    let b = Aabb::new([-1.0, -2.0, 0.0], [3.0, 2.0, 1.0]);
    let intr = Intrinsics::default();
    let params = GridParams::default();
    let poses = grid_viewpoints(&b, &params, intr).unwrap();
    assert_eq!(poses.len(), 10 * 10 * 8 * 3);
    let mut k = 0;
    for _cell in 0..100 {
        for yaw in (0..8).map(|i| i as f64 * 45.0) {
            for pitch in [1.0f64, 30.0, 60.0] {
                let c = &poses[k];
                assert_orthonormal(c);
                let (y, p) = (yaw.to_radians(), pitch.to_radians());
                let want = [p.cos() * y.cos(), p.cos() * y.sin(), -p.sin()];
                assert!(math::norm(math::sub(c.forward(), want)) < 1e-9);
                assert!((c.position[2] - (1.0 + 0.25 * b.diagonal())).abs() < 1e-9);
                k += 1;
            }
        }
    }
    let one = GridParams { grid_n: 1, yaw_step_deg: 360.0, pitches_deg: vec![30.0], height: Some(1.0) };
    assert_eq!(grid_viewpoints(&b, &one, intr).unwrap().len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_count_is_closed_form(n in 1usize..6, yaw_div in 1usize..12, pitches in prop::collection::vec(0.0f64..80.0, 1..4)) {
        let b = Aabb::new([0.0; 3], [1.0, 2.0, 0.5]);
        let yaw_step = 360.0 / yaw_div as f64;
        let p = GridParams { grid_n: n, yaw_step_deg: yaw_step, pitches_deg: pitches.clone(), height: None };
        let poses = grid_viewpoints(&b, &p, Intrinsics::default()).unwrap();
        prop_assert_eq!(poses.len(), n * n * yaw_div * pitches.len());
    }

    #[test]
    fn hemisphere_count_is_closed_form(nt in 1usize..20, np in 1usize..10, scale in 0.3f64..3.0) {
        let b = Aabb::new([-1.0, 0.0, 2.0], [1.0, 3.0, 2.5]);
        let p = HemisphereParams {
            radius_scale: scale,
            theta_step: 2.0 * std::f64::consts::PI / nt as f64,
            phi_step: 0.5 * std::f64::consts::PI / np as f64,
        };
        let poses = hemisphere_viewpoints(&b, &p, Intrinsics::default()).unwrap();
        prop_assert_eq!(poses.len(), nt * np + 1);
    }
}

#[test]
fn hemisphere_defaults_give_129_poses_on_the_sphere_looking_in() {
    let b = Aabb::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0]);
    let poses = hemisphere_viewpoints(&b, &HemisphereParams::default(), Intrinsics::default()).unwrap();
    assert_eq!(poses.len(), 16 * 8 + 1);
    let centre = b.center();
    let r = 0.75 * b.diagonal();
    for c in &poses {
        assert_orthonormal(c);
        let to_centre = math::sub(centre, c.position);
        assert!((math::norm(to_centre) - r).abs() < 1e-4 * r);
        let cos = math::dot(math::normalize(to_centre).unwrap(), c.forward()).clamp(-1.0, 1.0);
        assert!(cos.acos() < 1e-5);
        assert!(c.position[2] >= centre[2] - 1e-9);
    }
}

#[test]
fn rejects_nine_streams() {
    let streams =
        (0..9).map(|i| Stream { name: format!("s{i}"), data: StreamData::F32 { arity: 1, data: vec![0.0] } }).collect();
    assert!(PointCloud::new(vec![[0.0; 3]], streams).is_err());
}
