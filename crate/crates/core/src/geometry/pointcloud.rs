use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Streams per point cloud, positions excluded.
pub const MAX_STREAMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    /// Sentinel for an empty set: `min = +inf`, `max = -inf`.
    pub const EMPTY: Aabb = Aabb { min: [f32::INFINITY; 3], max: [f32::NEG_INFINITY; 3] };

    pub fn new(min: [f32; 3], max: [f32; 3]) -> Self {
        Self { min, max }
    }

    pub fn from_points(points: &[[f32; 3]]) -> Self {
        points.iter().fold(Self::EMPTY, |mut b, p| {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
            b
        })
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    pub fn extent(&self) -> Vec3 {
        if self.is_empty() {
            return [0.0; 3];
        }
        math::sub(math::to_f64(self.max), math::to_f64(self.min))
    }

    pub fn diagonal(&self) -> f64 {
        math::norm(self.extent())
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(math::to_f64(self.min), math::to_f64(self.max)), 0.5)
    }

    pub fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }
}

/// Payload of one attribute stream; `arity` values per point.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamData {
    U8 { arity: u8, data: Vec<u8> },
    F32 { arity: u8, data: Vec<f32> },
}

impl StreamData {
    pub fn arity(&self) -> usize {
        match self {
            StreamData::U8 { arity, .. } | StreamData::F32 { arity, .. } => *arity as usize,
        }
    }

    pub fn values(&self) -> usize {
        match self {
            StreamData::U8 { data, .. } => data.len(),
            StreamData::F32 { data, .. } => data.len(),
        }
    }

    /// Value `k` of point `i`; u8 streams are mapped to `[0, 1]`.
    #[inline]
    pub fn get_f32(&self, i: usize, k: usize) -> f32 {
        match self {
            StreamData::U8 { arity, data } => data[i * *arity as usize + k] as f32 / 255.0,
            StreamData::F32 { arity, data } => data[i * *arity as usize + k],
        }
    }

    fn gather(&self, indices: &[usize]) -> StreamData {
        fn pick<T: Copy>(data: &[T], arity: usize, indices: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(indices.len() * arity);
            for &i in indices {
                out.extend_from_slice(&data[i * arity..(i + 1) * arity]);
            }
            out
        }
        match self {
            StreamData::U8 { arity, data } => {
                StreamData::U8 { arity: *arity, data: pick(data, *arity as usize, indices) }
            }
            StreamData::F32 { arity, data } => {
                StreamData::F32 { arity: *arity, data: pick(data, *arity as usize, indices) }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub name: String,
    pub data: StreamData,
}

/// Positions plus up to [`MAX_STREAMS`] named per-point attribute streams.
///
/// Immutable after construction; the bounding box is computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
    streams: Vec<Stream>,
    aabb: Aabb,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, streams: Vec<Stream>) -> Result<Self> {
        if streams.len() > MAX_STREAMS {
            return Err(Error::Capacity(streams.len()));
        }
        let count = positions.len();
        for s in &streams {
            let arity = s.data.arity();
            if arity == 0 {
                return Err(Error::InvalidArgument(alloc::format!("stream `{}` has arity 0", s.name)));
            }
            if s.data.values() != count * arity {
                return Err(Error::InvalidArgument(alloc::format!(
                    "stream `{}` holds {} values, expected {}",
                    s.name,
                    s.data.values(),
                    count * arity
                )));
            }
        }
        for (i, s) in streams.iter().enumerate() {
            if streams[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidArgument(alloc::format!("duplicate stream `{}`", s.name)));
            }
        }
        let aabb = Aabb::from_points(&positions);
        Ok(Self { positions, streams, aabb })
    }

    pub fn empty() -> Self {
        Self { positions: Vec::new(), streams: Vec::new(), aabb: Aabb::EMPTY }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    #[inline]
    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }
    #[inline]
    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }
    #[inline]
    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    pub fn stream(&self, name: &str) -> Option<&StreamData> {
        self.streams.iter().find(|s| s.name == name).map(|s| &s.data)
    }

    pub fn require_stream(&self, name: &str) -> Result<&StreamData> {
        self.stream(name).ok_or_else(|| Error::MissingStream(name.into()))
    }

    /// New cloud holding the points at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> PointCloud {
        let positions = indices.iter().map(|&i| self.positions[i]).collect::<Vec<_>>();
        let streams =
            self.streams.iter().map(|s| Stream { name: s.name.clone(), data: s.data.gather(indices) }).collect();
        let aabb = Aabb::from_points(&positions);
        PointCloud { positions, streams, aabb }
    }

    /// Keeps points `0, factor, 2*factor, ...` with all streams in lockstep.
    pub fn subsample(&self, factor: usize) -> Result<PointCloud> {
        if factor == 0 {
            return Err(Error::InvalidArgument("subsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let indices: Vec<usize> = (0..self.len()).step_by(factor).collect();
        Ok(self.gather(&indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cloud(n: usize) -> PointCloud {
        let pos = (0..n).map(|i| [i as f32, 0.0, 0.0]).collect();
        let s = Stream {
            name: "s".into(),
            data: StreamData::F32 { arity: 2, data: (0..2 * n).map(|v| v as f32).collect() },
        };
        PointCloud::new(pos, vec![s]).unwrap()
    }

    #[test]
    fn subsample_keeps_stride_indices() {
        let pc = cloud(100);
        let sub = pc.subsample(10).unwrap();
        assert_eq!(sub.len(), 10);
        for (k, p) in sub.positions().iter().enumerate() {
            assert_eq!(p[0], (10 * k) as f32);
            assert_eq!(sub.stream("s").unwrap().get_f32(k, 1), (2 * 10 * k + 1) as f32);
        }
        assert_eq!(pc.subsample(1).unwrap(), pc);
        assert_eq!(cloud(101).subsample(10).unwrap().len(), 11);
        assert!(pc.subsample(0).is_err());
    }

    #[test]
    fn rejects_nine_streams_and_bad_lengths() {
        let streams = (0..9)
            .map(|i| Stream { name: alloc::format!("s{i}"), data: StreamData::U8 { arity: 1, data: vec![0; 2] } })
            .collect();
        assert_eq!(PointCloud::new(vec![[0.0; 3]; 2], streams), Err(Error::Capacity(9)));
        let bad = Stream { name: "x".into(), data: StreamData::U8 { arity: 3, data: vec![0; 5] } };
        assert!(PointCloud::new(vec![[0.0; 3]; 2], vec![bad]).is_err());
    }

    #[test]
    fn empty_cloud_has_sentinel_box() {
        let pc = PointCloud::new(Vec::new(), Vec::new()).unwrap();
        assert!(pc.aabb().is_empty());
        assert_eq!(pc.aabb(), Aabb::EMPTY);
        assert_eq!(pc.aabb().diagonal(), 0.0);
    }
}
