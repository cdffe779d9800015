//! Training objective: perceptual + α·MSE + β·total variation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, elu};
use super::Real;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What the total-variation term is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TvMode {
    /// TV of the prediction itself.
    Output,
    /// TV of `prediction − target`; zero whenever the two agree.
    #[default]
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Multiplies the perceptual term. The random-feature extractor yields
    /// feature errors around 1e-2, so the default lifts them to the scale
    /// of the `beta`-weighted gradient term.
    #[cfg_attr(feature = "serde", serde(default = "default_perceptual_weight"))]
    pub perceptual_weight: f64,
    pub perceptual: bool,
    pub perceptual_seed: u64,
    pub tv_mode: TvMode,
}

#[cfg(feature = "serde")]
fn default_perceptual_weight() -> f64 {
    DEFAULT_PERCEPTUAL_WEIGHT
}

pub const DEFAULT_PERCEPTUAL_WEIGHT: f64 = 1e4;

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e4,
            perceptual_weight: DEFAULT_PERCEPTUAL_WEIGHT,
            perceptual: true,
            perceptual_seed: 0x5eed,
            tv_mode: TvMode::Residual,
        }
    }
}

/// Individual loss terms, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub total: f64,
    pub perceptual: f64,
    pub reco: f64,
    pub tv: f64,
}

fn check_pair<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::Shape(alloc::format!("loss operands {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_pair(pred, target)?;
    let n = T::from_f64(pred.len().max(1) as f64);
    let mut sum = T::ZERO;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            (d + d) / n
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// Anisotropic total variation: the mean absolute difference over every
/// horizontally and vertically adjacent pair in every channel.
pub fn tv_loss<T: Real>(x: &Tensor<T>) -> (T, Tensor<T>) {
    let (c, h, w) = x.chw();
    let pairs = c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    let mut grad = vec![T::ZERO; x.len()];
    if pairs == 0 {
        return (T::ZERO, Tensor::from_vec(x.shape(), grad).expect("shape"));
    }
    let n = T::from_f64(pairs as f64);
    let sign = |d: T| {
        if d > T::ZERO {
            T::ONE / n
        } else if d < T::ZERO {
            -T::ONE / n
        } else {
            T::ZERO
        }
    };
    let mut sum = T::ZERO;
    let data = x.data();
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if xx + 1 < w {
                    let d = data[i + 1] - data[i];
                    sum += d.abs();
                    let s = sign(d);
                    grad[i + 1] += s;
                    grad[i] -= s;
                }
                if y + 1 < h {
                    let d = data[i + w] - data[i];
                    sum += d.abs();
                    let s = sign(d);
                    grad[i + w] += s;
                    grad[i] -= s;
                }
            }
        }
    }
    (sum / n, Tensor::from_vec(x.shape(), grad).expect("shape"))
}

/// 2×2 mean pooling that drops a trailing odd row/column.
fn pool_floor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut out = vec![T::ZERO; c * ho * wo];
    for ci in 0..c {
        let src = x.plane(ci);
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out[(ci * ho + y) * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out).expect("shape")
}

fn pool_floor_backward<T: Real>(dy: &Tensor<T>, (c, h, w): (usize, usize, usize)) -> Tensor<T> {
    let (_, ho, wo) = dy.chw();
    let q = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let g = dy.plane(ci);
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = g[y * wo + xx] * q;
                let i = 2 * y * w + 2 * xx;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + w] += v;
                dst[i + w + 1] += v;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx).expect("shape")
}

/// Frozen random-weight feature extractor: three stages of
/// `conv3×3 → elu → 2×2 mean pool` with 16, 32 and 64 channels.
#[derive(Debug, Clone)]
pub struct PerceptualNet<T> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 3] = [16, 32, 64];

/// Per-stage features plus what the backward pass needs.
type Traced<T> = (Vec<Tensor<T>>, Vec<StageCache<T>>);

struct StageCache<T> {
    cols: Vec<T>,
    pre: Vec<T>,
    in_shape: (usize, usize, usize),
    act_shape: (usize, usize, usize),
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut ci = in_channels;
        for &co in &PERCEPTUAL_CHANNELS {
            let bound = libm::sqrt(6.0 / (ci * 9) as f64);
            let data = (0..co * ci * 9).map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound)).collect();
            weights.push(Tensor::from_vec(&[co, ci, 3, 3], data).expect("shape"));
            biases.push(Tensor::zeros(&[co]));
            ci = co;
        }
        Self { weights, biases }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Traced<T>> {
        let mut feats = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        let mut cur = x.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let in_shape = cur.chw();
            let (z, cols) = layers::conv3x3(&cur, w, b)?;
            let act = z.map(|&v| elu(v));
            let pooled = pool_floor(&act);
            caches.push(StageCache { cols, pre: z.into_data(), in_shape, act_shape: act.chw() });
            feats.push(pooled.clone());
            cur = pooled;
        }
        Ok((feats, caches))
    }

    /// Feature activations after each stage.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward(x)?.0)
    }

    /// Mean over stages of the feature-space MSE, with gradient w.r.t. `pred`.
    pub fn loss(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        check_pair(pred, target)?;
        let (fp, caches) = self.forward(pred)?;
        let ft = self.features(target)?;
        let stages = T::from_f64(fp.len() as f64);
        let mut total = T::ZERO;
        let mut dcur: Option<Tensor<T>> = None;
        for s in (0..fp.len()).rev() {
            let (l, mut g) =
                if fp[s].is_empty() { (T::ZERO, Tensor::zeros(fp[s].shape())) } else { mse_loss(&fp[s], &ft[s])? };
            total += l / stages;
            g.data_mut().iter_mut().for_each(|v| *v = *v / stages);
            if let Some(d) = dcur.take() {
                layers::add_assign(&mut g, &d);
            }
            let cache = &caches[s];
            let dact = pool_floor_backward(&g, cache.act_shape);
            let dz: Vec<T> =
                dact.data().iter().zip(&cache.pre).map(|(&d, &z)| if z > T::ZERO { d } else { d * z.exp() }).collect();
            let dx = layers::conv3x3_backward(&cache.cols, &self.weights[s], &dz, cache.in_shape, None);
            let (c, h, w) = cache.in_shape;
            dcur = Some(Tensor::from_vec(&[c, h, w], dx)?);
        }
        Ok((total, dcur.expect("three stages")))
    }
}

/// The full objective with its configuration and frozen extractor.
#[derive(Debug, Clone)]
pub struct Loss<T> {
    config: LossConfig,
    perceptual: Option<PerceptualNet<T>>,
}

impl<T: Real> Loss<T> {
    pub fn new(config: LossConfig, channels: usize) -> Self {
        let perceptual = config.perceptual.then(|| PerceptualNet::new(channels, config.perceptual_seed));
        Self { config, perceptual }
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    /// Loss terms and the gradient of the total w.r.t. `pred`.
    pub fn evaluate(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(LossTerms, Tensor<T>)> {
        check_pair(pred, target)?;
        let alpha = T::from_f64(self.config.alpha);
        let beta = T::from_f64(self.config.beta);
        let (reco, g_reco) = mse_loss(pred, target)?;
        let (tv, g_tv) = match self.config.tv_mode {
            TvMode::Output => tv_loss(pred),
            TvMode::Residual => {
                let diff = Tensor::from_vec(
                    pred.shape(),
                    pred.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect(),
                )?;
                tv_loss(&diff)
            }
        };
        let (perc, g_perc) = match &self.perceptual {
            Some(net) => {
                let (l, g) = net.loss(pred, target)?;
                (l, Some(g))
            }
            None => (T::ZERO, None),
        };
        let wp = T::from_f64(self.config.perceptual_weight);
        let total = wp * perc + alpha * reco + beta * tv;
        let mut grad: Vec<T> = g_reco.data().iter().zip(g_tv.data()).map(|(&gr, &gt)| alpha * gr + beta * gt).collect();
        if let Some(g) = g_perc {
            grad.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += wp * b);
        }
        let terms =
            LossTerms { total: total.to_f64(), perceptual: perc.to_f64(), reco: reco.to_f64(), tv: tv.to_f64() };
        if !terms.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((terms, Tensor::from_vec(pred.shape(), grad)?))
    }
}
