//! NARPC point cloud container.
//!
//! Little endian: magic `NARPC\0`, `u16` version, `u64` count, `u8` stream
//! count, then per stream `u8` name length, name, `u8` format (0 = u8,
//! 1 = f32) and `u8` arity; positions as `count × 3` f32; then every stream
//! payload back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nar_core::geometry::MAX_STREAMS;
use nar_core::{PointCloud, Stream, StreamData};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 6] = b"NARPC\0";
pub const VERSION: u16 = 1;

pub fn write_pointcloud(pc: &PointCloud, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + pc.len() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(pc.len() as u64).to_le_bytes());
    buf.push(pc.streams().len() as u8);
    for s in pc.streams() {
        let name = s.name.as_bytes();
        if name.len() > u8::MAX as usize {
            return Err(Error::Format(format!("stream name `{}` longer than 255 bytes", s.name)));
        }
        buf.push(name.len() as u8);
        buf.extend_from_slice(name);
        let (format, arity) = match &s.data {
            StreamData::U8 { arity, .. } => (0u8, *arity),
            StreamData::F32 { arity, .. } => (1u8, *arity),
        };
        buf.push(format);
        buf.push(arity);
    }
    for p in pc.positions() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in pc.streams() {
        match &s.data {
            StreamData::U8 { data, .. } => buf.extend_from_slice(data),
            StreamData::F32 { data, .. } => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn name(&mut self) -> Result<String> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("name is not UTF-8".into()))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn read_pointcloud(mut input: impl Read) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_pointcloud(&bytes)
}

pub fn decode_pointcloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(6).map_err(|_| Error::Format("file too short for a NARPC header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic, not a NARPC file".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported NARPC version {version}")));
    }
    let count = c.u64()?;
    let stream_count = c.u8()? as usize;
    if stream_count > MAX_STREAMS {
        return Err(Error::Capacity(stream_count));
    }
    let count = usize::try_from(count).map_err(|_| Error::Corrupt("point count overflows".into()))?;
    let mut headers = Vec::with_capacity(stream_count);
    for _ in 0..stream_count {
        let name = c.name()?;
        let format = c.u8()?;
        let arity = c.u8()?;
        if format > 1 {
            return Err(Error::Format(format!("stream `{name}` has unknown format {format}")));
        }
        headers.push((name, format, arity));
    }
    let coords = count.checked_mul(3).ok_or_else(|| Error::Corrupt("point count overflows".into()))?;
    if c.remaining() / 12 < count {
        return Err(Error::Corrupt(format!("truncated: {count} positions declared")));
    }
    let flat = c.f32s(coords)?;
    let positions: Vec<[f32; 3]> = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    let mut streams = Vec::with_capacity(stream_count);
    for (name, format, arity) in headers {
        let n = count.checked_mul(arity as usize).ok_or_else(|| Error::Corrupt("stream length overflows".into()))?;
        let data = if format == 0 {
            StreamData::U8 { arity, data: c.take(n)?.to_vec() }
        } else {
            StreamData::F32 { arity, data: c.f32s(n)? }
        };
        streams.push(Stream { name, data });
    }
    if c.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", c.remaining())));
    }
    Ok(PointCloud::new(positions, streams)?)
}

pub fn save_pointcloud(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pointcloud(pc, &mut buf)?;
    fs::write(path, buf).at(path)
}

pub fn load_pointcloud(path: &Path) -> Result<PointCloud> {
    decode_pointcloud(&fs::read(path).at(path)?)
}
