//! Gated-convolution U-Net with a 1×1 descriptor head and a half-scale
//! feature pyramid injected into every encoder level.
//!
//! ```text
//! x ─ head(1×1) ─ pyramid ─┬ p0 ────────────── enc0 ─────────────── dec0 ─ 1×1 ─ σ
//!                          ├ p1 ─ [pool(enc0) ⧺ p1] ─ enc1 ─ ... ─ dec1
//!                          ...                                   ...
//!                          └ p4 ─ [pool(enc3) ⧺ p4] ─ enc4 (bottleneck)
//! ```
//!
//! Each `enc`/`dec` block is two gated 3×3 convolutions. Decoder level `k`
//! consumes `[upsample(dec_{k+1}) ⧺ enc_k]`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, GatedCache, GatedGrads, GatedParams};
use super::Real;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub levels: usize,
    pub out_channels: usize,
    /// `false` bypasses the 1×1 head ("no descriptors" ablation).
    pub descriptor_head: bool,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl UNetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 16,
            max_channels: 128,
            levels: 5,
            out_channels: 3,
            descriptor_head: true,
            seed: 0,
        }
    }

    /// Width of encoder/decoder level `k`.
    pub fn level_channels(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.max_channels)
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.levels > 12 {
            return Err(Error::Config(alloc::format!("unsupported level count {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.out_channels == 0 || self.max_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like<U>(other: &ParamSet<U>) -> Self {
        Self { names: other.names.clone(), tensors: other.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map(|&v| U::from_f64(v.to_f64()))).collect(),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            layers::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy)]
struct GatedIdx {
    fw: usize,
    fb: usize,
    gw: usize,
    gb: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    convs: [GatedIdx; 2],
    out_channels: usize,
}

/// Parameter layout of the network; the weights themselves live in a
/// [`ParamSet`] so the same layout serves `f32` and `f64`.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    shapes: Vec<(String, Vec<usize>)>,
    head: Option<(usize, usize)>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out: (usize, usize),
}

/// Saved activations for the backward pass.
pub struct Tape<T> {
    input: Tensor<T>,
    head_in: Option<Tensor<T>>,
    enc: Vec<[GatedCache<T>; 2]>,
    dec: Vec<[GatedCache<T>; 2]>,
    last: Tensor<T>,
    output: Tensor<T>,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            shapes.push((name, shape));
            shapes.len() - 1
        };
        let cin = config.in_channels;
        let head =
            config.descriptor_head.then(|| (push("head.w".into(), vec![cin, cin]), push("head.b".into(), vec![cin])));
        let gated = |prefix: &str, ci: usize, co: usize, push: &mut dyn FnMut(String, Vec<usize>) -> usize| GatedIdx {
            fw: push(alloc::format!("{prefix}.f.w"), vec![co, ci, 3, 3]),
            fb: push(alloc::format!("{prefix}.f.b"), vec![co]),
            gw: push(alloc::format!("{prefix}.g.w"), vec![co, ci, 3, 3]),
            gb: push(alloc::format!("{prefix}.g.b"), vec![co]),
        };
        let mut enc = Vec::with_capacity(config.levels);
        for k in 0..config.levels {
            let ci = if k == 0 { cin } else { config.level_channels(k - 1) + cin };
            let co = config.level_channels(k);
            let a = gated(&alloc::format!("enc{k}.0"), ci, co, &mut push);
            let b = gated(&alloc::format!("enc{k}.1"), co, co, &mut push);
            enc.push(Block { convs: [a, b], out_channels: co });
        }
        let mut dec = vec![None; config.levels.saturating_sub(1)];
        for k in (0..config.levels - 1).rev() {
            let ci = config.level_channels(k + 1) + config.level_channels(k);
            let co = config.level_channels(k);
            let a = gated(&alloc::format!("dec{k}.0"), ci, co, &mut push);
            let b = gated(&alloc::format!("dec{k}.1"), co, co, &mut push);
            dec[k] = Some(Block { convs: [a, b], out_channels: co });
        }
        let dec = dec.into_iter().map(|b| b.expect("filled")).collect();
        let c0 = config.level_channels(0);
        let out =
            (push("out.w".into(), vec![config.out_channels, c0]), push("out.b".into(), vec![config.out_channels]));
        Ok(Self { config, shapes, head, enc, dec, out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Seeded initialisation: fan-in scaled uniform weights, zero biases,
    /// gate biases `+1`, identity descriptor head.
    pub fn init_params<T: Real>(&self) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut names = Vec::with_capacity(self.shapes.len());
        let mut tensors = Vec::with_capacity(self.shapes.len());
        for (name, shape) in &self.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name == "head.w" {
                let c = shape[0];
                (0..n).map(|i| if i / c == i % c { T::ONE } else { T::ZERO }).collect()
            } else if name.ends_with(".g.b") {
                vec![T::ONE; n]
            } else if name.ends_with(".b") {
                vec![T::ZERO; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = libm::sqrt(6.0 / fan_in as f64);
                (0..n).map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound)).collect()
            };
            names.push(name.clone());
            tensors.push(Tensor::from_vec(shape, data).expect("shape"));
        }
        ParamSet { names, tensors }
    }

    pub fn check_params<T>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.tensors.len() != self.shapes.len() {
            return Err(Error::Config(alloc::format!(
                "expected {} parameter tensors, got {}",
                self.shapes.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape), (pname, t)) in self.shapes.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Config(alloc::format!(
                    "parameter `{pname}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input<T>(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 3 || x.shape()[0] != self.config.in_channels {
            return Err(Error::Config(alloc::format!(
                "expected {} input channels, got shape {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        let m = self.config.size_multiple();
        if !x.shape()[1].is_multiple_of(m) || !x.shape()[2].is_multiple_of(m) {
            return Err(Error::Shape(alloc::format!(
                "input {}×{} is not a multiple of {m}",
                x.shape()[2],
                x.shape()[1]
            )));
        }
        Ok(())
    }

    fn gp<'a, T>(params: &'a ParamSet<T>, g: GatedIdx) -> GatedParams<'a, T> {
        GatedParams {
            feature_w: &params.tensors[g.fw],
            feature_b: &params.tensors[g.fb],
            gate_w: &params.tensors[g.gw],
            gate_b: &params.tensors[g.gb],
        }
    }

    fn block_forward<T: Real>(
        params: &ParamSet<T>,
        b: &Block,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, [GatedCache<T>; 2])> {
        let (y0, c0) = layers::gated_conv(x, Self::gp(params, b.convs[0]))?;
        let (y1, c1) = layers::gated_conv(&y0, Self::gp(params, b.convs[1]))?;
        Ok((y1, [c0, c1]))
    }

    fn block_backward<T: Real>(
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        b: &Block,
        caches: &[GatedCache<T>; 2],
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let mut d = dy.clone();
        for i in (0..2).rev() {
            let g = b.convs[i];
            let [fw, fb, gw, gb] = grads.tensors.get_disjoint_mut([g.fw, g.fb, g.gw, g.gb]).expect("distinct");
            d = layers::gated_conv_backward(
                &caches[i],
                Self::gp(params, g),
                &d,
                GatedGrads { feature_w: fw, feature_b: fb, gate_w: gw, gate_b: gb },
            );
        }
        d
    }

    /// Descriptor head: `y = W x + b` per pixel, or identity when disabled.
    pub fn head<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.head {
            Some((w, b)) => layers::conv1x1(x, &params.tensors[w], &params.tensors[b]),
            None => Ok(x.clone()),
        }
    }

    /// Forward pass keeping every activation needed by [`UNet::backward`].
    pub fn forward_train<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tape<T>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let levels = self.config.levels;
        let h = self.head(params, x)?;
        let pyramid = layers::build_pyramid(&h, levels)?;
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(levels);
        let mut enc_caches = Vec::with_capacity(levels);
        for k in 0..levels {
            let input = if k == 0 {
                pyramid[0].clone()
            } else {
                layers::concat(&layers::avg_pool2(&enc_out[k - 1])?, &pyramid[k])?
            };
            let (y, c) = Self::block_forward(params, &self.enc[k], &input)?;
            enc_out.push(y);
            enc_caches.push(c);
        }
        let mut d = enc_out[levels - 1].clone();
        let mut dec_caches: Vec<Option<[GatedCache<T>; 2]>> = (0..levels - 1).map(|_| None).collect();
        for k in (0..levels - 1).rev() {
            let input = layers::concat(&layers::upsample2(&d), &enc_out[k])?;
            let (y, c) = Self::block_forward(params, &self.dec[k], &input)?;
            d = y;
            dec_caches[k] = Some(c);
        }
        let logits = layers::conv1x1(&d, &params.tensors[self.out.0], &params.tensors[self.out.1])?;
        let output = logits.map(|&z| layers::sigmoid(z));
        debug_assert!(output.data().iter().all(|v| v.is_finite()), "non-finite network output");
        Ok(Tape {
            input: x.clone(),
            head_in: self.head.map(|_| x.clone()),
            enc: enc_caches,
            dec: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
            last: d,
            output,
        })
    }

    /// Inference forward pass; `[out_channels, H, W]` in `(0, 1)`.
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let levels = self.config.levels;
        let h = self.head(params, x)?;
        let pyramid = layers::build_pyramid(&h, levels)?;
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(levels);
        for k in 0..levels {
            let input = if k == 0 {
                pyramid[0].clone()
            } else {
                layers::concat(&layers::avg_pool2(&enc_out[k - 1])?, &pyramid[k])?
            };
            enc_out.push(self.block_infer(params, &self.enc[k], &input)?);
        }
        let mut d = enc_out.pop().expect("levels >= 1");
        for k in (0..levels - 1).rev() {
            let input = layers::concat(&layers::upsample2(&d), &enc_out[k])?;
            d = self.block_infer(params, &self.dec[k], &input)?;
        }
        let logits = layers::conv1x1(&d, &params.tensors[self.out.0], &params.tensors[self.out.1])?;
        Ok(logits.map(|&z| layers::sigmoid(z)))
    }

    fn block_infer<T: Real>(&self, params: &ParamSet<T>, b: &Block, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y0 = layers::gated_conv_banded(x, Self::gp(params, b.convs[0]))?;
        layers::gated_conv_banded(&y0, Self::gp(params, b.convs[1]))
    }

    /// Parameter gradients of `sum(dy ⊙ output)`, plus the input gradient.
    pub fn backward<T: Real>(&self, params: &ParamSet<T>, tape: &Tape<T>, dy: &Tensor<T>) -> (ParamSet<T>, Tensor<T>) {
        let levels = self.config.levels;
        let mut grads = ParamSet::<T>::zeros_like(params);
        let dlogits = Tensor::from_vec(
            dy.shape(),
            dy.data().iter().zip(tape.output.data()).map(|(&g, &y)| g * y * (T::ONE - y)).collect(),
        )
        .expect("shape");
        let mut dd = {
            let [dw, db] = grads.tensors.get_disjoint_mut([self.out.0, self.out.1]).expect("distinct");
            layers::conv1x1_backward(&tape.last, &params.tensors[self.out.0], &dlogits, dw, db)
        };
        let mut d_enc: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => layers::add_assign(acc, &g),
            None => *slot = Some(g),
        };
        for k in 0..levels - 1 {
            let dinput = Self::block_backward(params, &mut grads, &self.dec[k], &tape.dec[k], &dd);
            let (dup, dskip) = layers::split(&dinput, self.config.level_channels(k + 1));
            accumulate(&mut d_enc[k], dskip);
            dd = layers::upsample2_backward(&dup);
        }
        accumulate(&mut d_enc[levels - 1], dd);
        let mut d_pyr: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for k in (0..levels).rev() {
            let dy_k = d_enc[k].take().expect("every encoder level feeds the decoder");
            let dinput = Self::block_backward(params, &mut grads, &self.enc[k], &tape.enc[k], &dy_k);
            if k == 0 {
                d_pyr[0] = Some(dinput);
            } else {
                let (ddown, dp) = layers::split(&dinput, self.enc[k - 1].out_channels);
                d_pyr[k] = Some(dp);
                accumulate(&mut d_enc[k - 1], layers::avg_pool2_backward(&ddown));
            }
        }
        let mut g = d_pyr[levels - 1].take().expect("filled");
        for k in (0..levels - 1).rev() {
            let mut up = layers::avg_pool2_backward(&g);
            layers::add_assign(&mut up, d_pyr[k].as_ref().expect("filled"));
            g = up;
        }
        let dx = match (self.head, &tape.head_in) {
            (Some((w, b)), Some(x)) => {
                let [dw, db] = grads.tensors.get_disjoint_mut([w, b]).expect("distinct");
                layers::conv1x1_backward(x, &params.tensors[w], &g, dw, db)
            }
            _ => g,
        };
        debug_assert_eq!(dx.shape(), tape.input.shape());
        (grads, dx)
    }
}
