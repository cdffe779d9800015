//! Multi-channel f32 planes on disk, and 8-bit PNG output.
//!
//! Plane dump layout (little endian): `u32` width, `u32` height, `u16`
//! channel count, per channel `u8` name length + name, then each channel as
//! a row-major f32 plane. Feature images and raw ground truth share it.

use std::fs;
use std::path::Path;

use nar_core::{FeatureImage, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::narpc::Cursor;

/// Named `[C, H, W]` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub names: Vec<String>,
    pub data: Tensor<f32>,
}

impl Planes {
    pub fn new(names: Vec<String>, data: Tensor<f32>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != names.len() {
            return Err(Error::Format(format!("{} names for planes of shape {:?}", names.len(), data.shape())));
        }
        Ok(Self { names, data })
    }

    pub fn rgb(image: Tensor<f32>) -> Result<Self> {
        Self::new(vec!["r".into(), "g".into(), "b".into()], image)
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    /// First three channels named `r`, `g`, `b`, if present.
    pub fn rgb_channels(&self) -> Option<Tensor<f32>> {
        let idx: Vec<usize> =
            ["r", "g", "b"].iter().map(|n| self.names.iter().position(|m| m == n)).collect::<Option<_>>()?;
        let mut data = Vec::with_capacity(3 * self.width() * self.height());
        for i in idx {
            data.extend_from_slice(self.data.plane(i));
        }
        Tensor::from_vec(&[3, self.height(), self.width()], data).ok()
    }
}

impl From<&FeatureImage> for Planes {
    fn from(f: &FeatureImage) -> Self {
        Planes { names: f.names.clone(), data: f.features.clone() }
    }
}

pub fn encode_planes(p: &Planes) -> Result<Vec<u8>> {
    let (c, h, w) = p.data.chw();
    if c > u16::MAX as usize {
        return Err(Error::Format(format!("{c} channels exceed the dump limit")));
    }
    let mut buf = Vec::with_capacity(16 + c * (h * w * 4 + 8));
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    for n in &p.names {
        if n.len() > u8::MAX as usize {
            return Err(Error::Format(format!("channel name `{n}` too long")));
        }
        buf.push(n.len() as u8);
        buf.extend_from_slice(n.as_bytes());
    }
    for v in p.data.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_planes(bytes: &[u8]) -> Result<Planes> {
    let mut c = Cursor::new(bytes);
    let w = c.u32()? as usize;
    let h = c.u32()? as usize;
    let n = c.u16()? as usize;
    let names = (0..n).map(|_| c.name()).collect::<Result<Vec<_>>>()?;
    let len =
        n.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| Error::Corrupt("dimensions overflow".into()))?;
    let data = c.f32s(len)?;
    if c.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes in plane dump", c.remaining())));
    }
    Planes::new(names, Tensor::from_vec(&[n, h, w], data)?)
}

pub fn save_planes(p: &Planes, path: &Path) -> Result<()> {
    fs::write(path, encode_planes(p)?).at(path)
}

pub fn load_planes(path: &Path) -> Result<Planes> {
    decode_planes(&fs::read(path).at(path)?)
}

/// Linear `[0, 1]` → 8-bit, `round(v × 255)`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image as an 8-bit RGB PNG.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw();
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            rgb.push(to_u8(image.plane(ch)[p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB PNG into `[3, H, W]` values `v / 255`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("unsupported PNG layout {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + p] = buf[p * 3 + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_png(image)?).at(path)
}
