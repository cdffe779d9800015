//! PSNR and single-scale SSIM on planar RGB images in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_shapes(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(alloc::format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / MSE)` over all channels, capped at 100 dB.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * math::log10(1.0 / m)).min(PSNR_CAP_DB))
}

fn luma(img: &Tensor<f32>) -> Result<Vec<f64>> {
    let (c, h, w) = img.chw();
    if c != 3 {
        return Err(Error::Shape(alloc::format!("expected 3 channels, got {c}")));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    Ok((0..h * w).map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64).collect())
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = math::exp(-d * d / (2.0 * SIGMA * SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering: output is `(h - 10) × (w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma: 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, `L = 1`, mean over valid windows.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_shapes(a, b)?;
    let (_, h, w) = a.chw();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Shape(alloc::format!("image {w}×{h} is smaller than the {WINDOW}×{WINDOW} window")));
    }
    let (la, lb) = (luma(a)?, luma(b)?);
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &k);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &k);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok((total / mu_a.len() as f64).clamp(-1.0, 1.0))
}

/// One evaluated view.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub view_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, view_id: usize, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<()> {
        let row = MetricRow { view_id, psnr_db: psnr(reference, test)?, ssim: ssim(reference, test)? };
        self.rows.push(row);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}
