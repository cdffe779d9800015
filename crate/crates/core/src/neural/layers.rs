//! Network building blocks on `[channels, height, width]` tensors, each
//! with a hand-derived backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub fn elu<T: Real>(z: T) -> T {
    if z > T::ZERO {
        z
    } else {
        z.exp() - T::ONE
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

/// Activations below this magnitude are stored as zero.
pub const ACTIVATION_FLOOR: f64 = 1e-30;

/// Zero below [`ACTIVATION_FLOOR`]. Saturated gates otherwise leave values
/// whose products with the next layer's weights are subnormal, and
/// subnormal arithmetic slows every later convolution several-fold.
#[inline]
pub fn flush_tiny<T: Real>(v: T) -> T {
    if v.abs() < T::from_f64(ACTIVATION_FLOOR) {
        T::ZERO
    } else {
        v
    }
}

/// 3×3 patches with zero padding: row `ci*9 + ky*3 + kx`, column `y*w + x`.
pub fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    im2col3_rows(x, c, h, w, 0, h)
}

/// [`im2col3`] restricted to output rows `y0..y1`.
pub fn im2col3_rows<T: Real>(x: &[T], c: usize, h: usize, w: usize, y0: usize, y1: usize) -> Vec<T> {
    let hw = h * w;
    let n = (y1 - y0) * w;
    let mut cols = vec![T::ZERO; c * 9 * n];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    // Valid x range where 0 <= x + kx - 1 < w.
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        row[(y - y0) * w + xx] = src[sy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::ZERO; c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        dst[sy * w + xx + kx - 1] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], hw: usize) {
    for (row, &b) in out.chunks_exact_mut(hw).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Real>(dz: &[T], db: &mut [T], hw: usize) {
    for (row, g) in dz.chunks_exact(hw).zip(db.iter_mut()) {
        *g += row.iter().copied().sum::<T>();
    }
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Config(alloc::format!("{name}: expected shape {want:?}, got {got:?}")));
    }
    Ok(())
}

/// Pointwise affine map `y = W x + b` over channels; `W` is `[c_out, c_in]`.
pub fn conv1x1<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw();
    let co = weight.shape()[0];
    expect_shape("1x1 weight", weight.shape(), &[co, c])?;
    expect_shape("1x1 bias", bias.shape(), &[co])?;
    let hw = h * w;
    let mut out = vec![T::ZERO; co * hw];
    T::gemm(co, c, hw, weight.data(), false, x.data(), false, T::ZERO, &mut out);
    add_bias(&mut out, bias.data(), hw);
    Tensor::from_vec(&[co, h, w], out)
}

/// Backward of [`conv1x1`]: accumulates into `dw`, `db`, returns `dx`.
pub fn conv1x1_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let co = weight.shape()[0];
    let hw = h * w;
    T::gemm(co, hw, c, dy.data(), false, x.data(), true, T::ONE, dw.data_mut());
    accumulate_bias_grad(dy.data(), db.data_mut(), hw);
    let mut dx = vec![T::ZERO; c * hw];
    T::gemm(c, co, hw, weight.data(), true, dy.data(), false, T::ZERO, &mut dx);
    Tensor::from_vec(&[c, h, w], dx).expect("shape")
}

/// Plain 3×3 "same" convolution, weights `[c_out, c_in, 3, 3]`.
pub fn conv3x3<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, h, w) = x.chw();
    let co = weight.shape()[0];
    expect_shape("3x3 weight", weight.shape(), &[co, c, 3, 3])?;
    expect_shape("3x3 bias", bias.shape(), &[co])?;
    let hw = h * w;
    let cols = im2col3(x.data(), c, h, w);
    let mut out = vec![T::ZERO; co * hw];
    T::gemm(co, c * 9, hw, weight.data(), false, &cols, false, T::ZERO, &mut out);
    add_bias(&mut out, bias.data(), hw);
    Ok((Tensor::from_vec(&[co, h, w], out)?, cols))
}

/// Gradient w.r.t. the input of a 3×3 convolution, plus parameter
/// gradients accumulated when `dw`/`db` are given.
pub fn conv3x3_backward<T: Real>(
    cols: &[T],
    weight: &Tensor<T>,
    dz: &[T],
    (c, h, w): (usize, usize, usize),
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Vec<T> {
    let co = weight.shape()[0];
    let hw = h * w;
    if let Some((dw, db)) = grads {
        T::gemm(co, hw, c * 9, dz, false, cols, true, T::ONE, dw.data_mut());
        accumulate_bias_grad(dz, db.data_mut(), hw);
    }
    let mut dcols = vec![T::ZERO; c * 9 * hw];
    T::gemm(c * 9, co, hw, weight.data(), true, dz, false, T::ZERO, &mut dcols);
    col2im3(&dcols, c, h, w)
}

/// Parameters of one gated convolution.
#[derive(Debug, Clone, Copy)]
pub struct GatedParams<'a, T> {
    pub feature_w: &'a Tensor<T>,
    pub feature_b: &'a Tensor<T>,
    pub gate_w: &'a Tensor<T>,
    pub gate_b: &'a Tensor<T>,
}

/// Saved activations of one gated convolution.
#[derive(Debug, Clone)]
pub struct GatedCache<T> {
    cols: Vec<T>,
    /// `elu(conv_f(x) + b_f)`.
    feat: Vec<T>,
    /// `sigmoid(conv_g(x) + b_g)`.
    gate: Vec<T>,
    in_shape: (usize, usize, usize),
}

/// `elu(conv(x; W_f) + b_f) ⊙ sigmoid(conv(x; W_g) + b_g)`, 3×3 same padding.
pub fn gated_conv<T: Real>(x: &Tensor<T>, p: GatedParams<'_, T>) -> Result<(Tensor<T>, GatedCache<T>)> {
    let (c, h, w) = x.chw();
    let co = p.feature_w.shape()[0];
    expect_shape("gated feature weight", p.feature_w.shape(), &[co, c, 3, 3])?;
    expect_shape("gated gate weight", p.gate_w.shape(), &[co, c, 3, 3])?;
    expect_shape("gated feature bias", p.feature_b.shape(), &[co])?;
    expect_shape("gated gate bias", p.gate_b.shape(), &[co])?;
    let hw = h * w;
    let cols = im2col3(x.data(), c, h, w);
    let mut feat = vec![T::ZERO; co * hw];
    let mut gate = vec![T::ZERO; co * hw];
    T::gemm(co, c * 9, hw, p.feature_w.data(), false, &cols, false, T::ZERO, &mut feat);
    T::gemm(co, c * 9, hw, p.gate_w.data(), false, &cols, false, T::ZERO, &mut gate);
    add_bias(&mut feat, p.feature_b.data(), hw);
    add_bias(&mut gate, p.gate_b.data(), hw);
    feat.iter_mut().for_each(|v| *v = elu(*v));
    gate.iter_mut().for_each(|v| *v = sigmoid(*v));
    let out: Vec<T> = feat.iter().zip(&gate).map(|(&f, &g)| flush_tiny(f * g)).collect();
    Ok((Tensor::from_vec(&[co, h, w], out)?, GatedCache { cols, feat, gate, in_shape: (c, h, w) }))
}

/// Same result as [`gated_conv`] without a cache, processed in row bands
/// so the patch matrix stays small at large resolutions.
pub fn gated_conv_banded<T: Real>(x: &Tensor<T>, p: GatedParams<'_, T>) -> Result<Tensor<T>> {
    const BAND_VALUES: usize = 1 << 21;
    let (c, h, w) = x.chw();
    let co = p.feature_w.shape()[0];
    expect_shape("gated feature weight", p.feature_w.shape(), &[co, c, 3, 3])?;
    expect_shape("gated gate weight", p.gate_w.shape(), &[co, c, 3, 3])?;
    expect_shape("gated feature bias", p.feature_b.shape(), &[co])?;
    expect_shape("gated gate bias", p.gate_b.shape(), &[co])?;
    let hw = h * w;
    let band = (BAND_VALUES / (c * 9 * w).max(1)).clamp(1, h.max(1));
    let mut out = vec![T::ZERO; co * hw];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + band).min(h);
        let n = (y1 - y0) * w;
        let cols = im2col3_rows(x.data(), c, h, w, y0, y1);
        let mut feat = vec![T::ZERO; co * n];
        let mut gate = vec![T::ZERO; co * n];
        T::gemm(co, c * 9, n, p.feature_w.data(), false, &cols, false, T::ZERO, &mut feat);
        T::gemm(co, c * 9, n, p.gate_w.data(), false, &cols, false, T::ZERO, &mut gate);
        for o in 0..co {
            let (bf, bg) = (p.feature_b.data()[o], p.gate_b.data()[o]);
            let dst = &mut out[o * hw + y0 * w..][..n];
            for ((d, &f), &g) in dst.iter_mut().zip(&feat[o * n..(o + 1) * n]).zip(&gate[o * n..(o + 1) * n]) {
                *d = flush_tiny(elu(f + bf) * sigmoid(g + bg));
            }
        }
        y0 = y1;
    }
    Tensor::from_vec(&[co, h, w], out)
}

/// Mutable gradient slots of one gated convolution.
pub struct GatedGrads<'a, T> {
    pub feature_w: &'a mut Tensor<T>,
    pub feature_b: &'a mut Tensor<T>,
    pub gate_w: &'a mut Tensor<T>,
    pub gate_b: &'a mut Tensor<T>,
}

pub fn gated_conv_backward<T: Real>(
    cache: &GatedCache<T>,
    p: GatedParams<'_, T>,
    dy: &Tensor<T>,
    g: GatedGrads<'_, T>,
) -> Tensor<T> {
    let (c, h, w) = cache.in_shape;
    let hw = h * w;
    let co = p.feature_w.shape()[0];
    let mut dzf = vec![T::ZERO; co * hw];
    let mut dzg = vec![T::ZERO; co * hw];
    for i in 0..co * hw {
        let (f, s, d) = (cache.feat[i], cache.gate[i], dy.data()[i]);
        let elu_grad = if f > T::ZERO { T::ONE } else { f + T::ONE };
        dzf[i] = d * s * elu_grad;
        dzg[i] = d * f * s * (T::ONE - s);
    }
    T::gemm(co, hw, c * 9, &dzf, false, &cache.cols, true, T::ONE, g.feature_w.data_mut());
    T::gemm(co, hw, c * 9, &dzg, false, &cache.cols, true, T::ONE, g.gate_w.data_mut());
    accumulate_bias_grad(&dzf, g.feature_b.data_mut(), hw);
    accumulate_bias_grad(&dzg, g.gate_b.data_mut(), hw);
    let mut dcols = vec![T::ZERO; c * 9 * hw];
    T::gemm(c * 9, co, hw, p.feature_w.data(), true, &dzf, false, T::ZERO, &mut dcols);
    T::gemm(c * 9, co, hw, p.gate_w.data(), true, &dzg, false, T::ONE, &mut dcols);
    Tensor::from_vec(&[c, h, w], col2im3(&dcols, c, h, w)).expect("shape")
}

/// 2×2 mean pooling; odd trailing rows/columns are not allowed.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(alloc::format!("cannot pool {h}×{w} by 2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let src = x.plane(ci);
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[(ci * oh + y) * ow + xx] = s * quarter;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = dy.chw();
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[(ci * h + y) * w + xx] = dy.data()[(ci * oh + y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx).expect("shape")
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ci * oh + y) * ow + xx] = x.data()[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("shape")
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = dy.chw();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(ci * h + y / 2) * w + xx / 2] += dy.data()[(ci * oh + y) * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx).expect("shape")
}

/// Channel concatenation of equally sized maps.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(alloc::format!("cannot concat {h}×{w} with {hb}×{wb}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Splits a gradient of [`concat`] back into its two parts.
pub fn split<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = d.chw();
    let (da, db) = d.data().split_at(ca * h * w);
    (
        Tensor::from_vec(&[ca, h, w], da.to_vec()).expect("shape"),
        Tensor::from_vec(&[c - ca, h, w], db.to_vec()).expect("shape"),
    )
}

pub fn add_assign<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), other.shape());
    acc.data_mut().iter_mut().zip(other.data()).for_each(|(a, &b)| *a += b);
}

/// Halves the resolution `levels - 1` times: level 0 is `x` itself.
pub fn build_pyramid<T: Real>(x: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let (_, h, w) = x.chw();
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(alloc::format!("{w}×{h} is not divisible by {div}")));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(x.clone());
    for k in 1..levels {
        let next = avg_pool2(&out[k - 1])?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col3(&x, c, h, w);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im3(&y, c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pyramid_sizes_and_constants() {
        let x = Tensor::filled(&[3, 512, 512], 0.25f32);
        let p = build_pyramid(&x, 5).unwrap();
        let sizes: Vec<usize> = p.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sizes, [512, 256, 128, 64, 32]);
        assert!(p.iter().all(|t| t.data().iter().all(|&v| v == 0.25) && t.shape()[0] == 3));
        assert!(build_pyramid(&Tensor::<f32>::zeros(&[1, 24, 32]), 5).is_err());
    }

    #[test]
    fn gate_saturation() {
        let x = Tensor::from_vec(&[1, 3, 3], (0..9).map(|v| v as f64 * 0.2 - 0.8).collect()).unwrap();
        let fw = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| (v as f64 - 4.0) * 0.1).collect()).unwrap();
        let fb = Tensor::from_vec(&[1], alloc::vec![0.1]).unwrap();
        let gw = Tensor::zeros(&[1, 1, 3, 3]);
        let open = Tensor::from_vec(&[1], alloc::vec![20.0]).unwrap();
        let shut = Tensor::from_vec(&[1], alloc::vec![-20.0]).unwrap();
        let (y_open, _) =
            gated_conv(&x, GatedParams { feature_w: &fw, feature_b: &fb, gate_w: &gw, gate_b: &open }).unwrap();
        let (z, _) = conv3x3(&x, &fw, &fb).unwrap();
        for (a, b) in y_open.data().iter().zip(z.data()) {
            assert!((a - elu(*b)).abs() < 1e-6);
        }
        let (y_shut, _) =
            gated_conv(&x, GatedParams { feature_w: &fw, feature_b: &fb, gate_w: &gw, gate_b: &shut }).unwrap();
        assert!(y_shut.data().iter().all(|v| v.abs() < 1e-6));
    }
}
