use alloc::vec;
use alloc::vec::Vec;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::math;

/// Uniform grid over the cloud's bounding box, points bucketed per cell
/// with a counting sort.
struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl Grid {
    fn build(pc: &PointCloud) -> Self {
        let aabb = pc.aabb();
        let n = pc.len();
        let diag = aabb.diagonal();
        let cell = if diag > 0.0 { diag / math::cbrt(n as f64) } else { 1.0 };
        let ext = aabb.extent();
        let mut dims = [1usize; 3];
        for k in 0..3 {
            dims[k] = ((ext[k] / cell) as usize + 1).max(1);
        }
        let origin = math::to_f64(aabb.min);
        let mut grid = Grid { origin, cell, dims, starts: Vec::new(), items: Vec::new() };
        let ncells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<u32> = pc.positions().iter().map(|&p| grid.flat(grid.coord(math::to_f64(p))) as u32).collect();
        let mut starts = vec![0u32; ncells + 1];
        for &c in &cell_of {
            starts[c as usize + 1] += 1;
        }
        for c in 0..ncells {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut items = vec![0u32; n];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c as usize] as usize] = i as u32;
            fill[c as usize] += 1;
        }
        grid.starts = starts;
        grid.items = items;
        grid
    }

    fn coord(&self, p: [f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let v = ((p[k] - self.origin[k]) / self.cell).max(0.0) as usize;
            c[k] = v.min(self.dims[k] - 1);
        }
        c
    }

    #[inline]
    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn cell_items(&self, c: [usize; 3]) -> &[u32] {
        let f = self.flat(c);
        &self.items[self.starts[f] as usize..self.starts[f + 1] as usize]
    }
}

/// Bounded candidate list ordered by `(distance², index)`.
struct Best {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl Best {
    fn offer(&mut self, d2: f64, idx: u32) {
        let cand = (d2, idx);
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (cand.0, cand.1) >= (last.0, last.1) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.iter().position(|&(d, i)| (cand.0, cand.1) < (d, i)).unwrap_or(self.items.len());
        self.items.insert(pos, cand);
    }
}

fn query(grid: &Grid, pts: &[[f32; 3]], i: usize, k: usize) -> f32 {
    let p = math::to_f64(pts[i]);
    let c = grid.coord(p);
    let mut best = Best { k, items: Vec::with_capacity(k + 1) };
    let max_ring = grid.dims.iter().copied().max().unwrap_or(1);
    let mut ring = 0usize;
    loop {
        let lo = |a: usize| a.saturating_sub(ring);
        let hi = |a: usize, d: usize| (a + ring).min(d - 1);
        for z in lo(c[2])..=hi(c[2], grid.dims[2]) {
            for y in lo(c[1])..=hi(c[1], grid.dims[1]) {
                for x in lo(c[0])..=hi(c[0], grid.dims[0]) {
                    let cheb = x.abs_diff(c[0]).max(y.abs_diff(c[1])).max(z.abs_diff(c[2]));
                    if cheb != ring {
                        continue;
                    }
                    for &j in grid.cell_items([x, y, z]) {
                        if j as usize == i {
                            continue;
                        }
                        let d2 = {
                            let q = math::to_f64(pts[j as usize]);
                            let d = math::sub(q, p);
                            math::dot(d, d)
                        };
                        best.offer(d2, j);
                    }
                }
            }
        }
        // Anything in ring + 1 or beyond is at least `ring * cell` away.
        if best.items.len() == k {
            let reach = ring as f64 * grid.cell;
            if best.items[k - 1].0 < reach * reach {
                break;
            }
        }
        if ring >= max_ring {
            break;
        }
        ring += 1;
    }
    let sum: f64 = best.items.iter().map(|&(d2, _)| math::sqrt(d2)).sum();
    (sum / best.items.len() as f64) as f32
}

/// Mean distance from each point to its `min(k, count - 1)` nearest
/// neighbours, self excluded, ties broken by lower index.
pub fn knn_avg_distance(pc: &PointCloud, k: usize) -> Result<Vec<f32>> {
    let n = pc.len();
    if n < 2 {
        return Err(Error::InsufficientPoints(n));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let k = k.min(n - 1);
    let grid = Grid::build(pc);
    let pts = pc.positions();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..n).into_par_iter().map(|i| query(&grid, pts, i, k)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..n).map(|i| query(&grid, pts, i, k)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn unit_grid_interior_radius_is_one() {
        let mut pos = Vec::new();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    pos.push([x as f32, y as f32, z as f32]);
                }
            }
        }
        let pc = PointCloud::new(pos, Vec::new()).unwrap();
        let r = knn_avg_distance(&pc, 4).unwrap();
        let centre = (2 * 5 + 2) * 5 + 2;
        assert!((r[centre] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_points_clamp_k() {
        let pc = PointCloud::new(vec![[0.0; 3], [3.0, 4.0, 0.0]], Vec::new()).unwrap();
        assert_eq!(knn_avg_distance(&pc, 4).unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn single_point_is_an_error() {
        let pc = PointCloud::new(vec![[0.0; 3]], Vec::new()).unwrap();
        assert_eq!(knn_avg_distance(&pc, 4), Err(Error::InsufficientPoints(1)));
    }

    #[test]
    fn coincident_points_are_zero_distance() {
        let pc = PointCloud::new(vec![[1.0; 3]; 6], Vec::new()).unwrap();
        assert!(knn_avg_distance(&pc, 4).unwrap().iter().all(|&r| r == 0.0));
    }
}
