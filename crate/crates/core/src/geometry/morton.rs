use alloc::vec::Vec;

use super::{Aabb, PointCloud};

const BITS: u32 = 21;
const MAX_Q: u64 = (1 << BITS) - 1;

/// Quantizes `v` over `[lo, hi]` to 21 bits; degenerate extents map to 0.
#[inline]
pub fn quantize_axis(v: f32, lo: f32, hi: f32) -> u64 {
    let extent = hi as f64 - lo as f64;
    if !(extent > 0.0) {
        return 0;
    }
    let t = ((v as f64 - lo as f64) / extent).clamp(0.0, 1.0);
    crate::math::floor(t * MAX_Q as f64 + 0.5) as u64
}

/// Spreads the low 21 bits of `v` so bit `i` lands on bit `3i`.
#[inline]
fn spread(v: u64) -> u64 {
    let mut x = v & MAX_Q;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// 63-bit Morton key, x in the lowest bit of each triple.
pub fn morton_key(p: [f32; 3], aabb: &Aabb) -> u64 {
    let qx = quantize_axis(p[0], aabb.min[0], aabb.max[0]);
    let qy = quantize_axis(p[1], aabb.min[1], aabb.max[1]);
    let qz = quantize_axis(p[2], aabb.min[2], aabb.max[2]);
    spread(qx) | (spread(qy) << 1) | (spread(qz) << 2)
}

/// Stable sort of points and all streams by ascending Morton key.
pub fn morton_reorder(pc: &PointCloud) -> PointCloud {
    if pc.is_empty() {
        return pc.clone();
    }
    let aabb = pc.aabb();
    let keys: Vec<u64> = pc.positions().iter().map(|&p| morton_key(p, &aabb)).collect();
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    pc.gather(&order)
}
