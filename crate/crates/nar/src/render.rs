//! Inference: rasterize → pack → network, with per-stage timings.

use std::time::Instant;

use nar_core::msr::rasterize;
use nar_core::neural::{ParamSet, UNet};
use nar_core::{CameraPose, PointCloud, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelMeta, ModelState};
use crate::error::{Error, Result};

/// Per-frame stage durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub msr_ms: f64,
    pub transfer_proc_ms: f64,
    pub unet_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    /// Component-wise medians.
    pub fn median(samples: &[StageTimings]) -> StageTimings {
        let pick = |f: fn(&StageTimings) -> f64| median(samples.iter().map(f).collect());
        StageTimings {
            msr_ms: pick(|t| t.msr_ms),
            transfer_proc_ms: pick(|t| t.transfer_proc_ms),
            unet_ms: pick(|t| t.unet_ms),
            total_ms: pick(|t| t.total_ms),
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// An immutable, shareable trained network.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub meta: ModelMeta,
    net: UNet,
    params: ParamSet<f32>,
}

impl Renderer {
    pub fn new(state: &ModelState) -> Result<Self> {
        let net = state.network()?;
        net.check_params(&state.params)?;
        Ok(Self { meta: state.meta.clone(), net, params: state.params.clone() })
    }

    /// Zero-pads `[C, H, W]` features on the right and bottom to the
    /// network's size multiple.
    pub fn pack(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = features.chw();
        if c != self.meta.unet.in_channels {
            return Err(Error::StreamMismatch(format!(
                "model expects {} channels, features have {c}",
                self.meta.unet.in_channels
            )));
        }
        let m = self.net.config().size_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (hp, wp) == (h, w) {
            return Ok(features.clone());
        }
        let mut out = Tensor::zeros(&[c, hp, wp]);
        for ch in 0..c {
            let (src, dst) = (features.plane(ch), out.plane_mut(ch));
            for y in 0..h {
                dst[y * wp..y * wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Ok(out)
    }

    /// Runs the network on packed input and crops to `h × w`.
    pub fn run(&self, packed: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
        let y = self.net.forward(&self.params, packed)?;
        let (c, hp, wp) = y.chw();
        if (hp, wp) == (h, w) {
            return Ok(y);
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let p = y.plane(ch);
            for row in 0..h {
                out.extend_from_slice(&p[row * wp..row * wp + w]);
            }
        }
        Ok(Tensor::from_vec(&[c, h, w], out)?)
    }

    /// Features already in the model's channel layout → RGB.
    pub fn infer(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, h, w) = features.chw();
        self.run(&self.pack(features)?, h, w)
    }

    /// Full path for one camera.
    pub fn render(&self, pc: &PointCloud, cam: &CameraPose) -> Result<(Tensor<f32>, StageTimings)> {
        let start = Instant::now();
        let names = self
            .meta
            .selection
            .channel_names(Some(pc))
            .map_err(|e| Error::StreamMismatch(format!("point cloud does not provide the model's streams: {e}")))?;
        if names != self.meta.channel_names {
            return Err(Error::StreamMismatch(format!(
                "model was trained on channels {:?}, point cloud yields {names:?}",
                self.meta.channel_names
            )));
        }
        let feat = rasterize(pc, cam, &self.meta.selection).map_err(|e| match e {
            nar_core::Error::MissingStream(s) => Error::StreamMismatch(format!("missing stream `{s}`")),
            e => e.into(),
        })?;
        let msr_ms = ms(start);
        let t = Instant::now();
        let (h, w) = (feat.height, feat.width);
        let packed = self.pack(&feat.features)?;
        let transfer_proc_ms = ms(t);
        let t = Instant::now();
        let image = self.run(&packed, h, w)?;
        let unet_ms = ms(t);
        let total_ms = ms(start);
        Ok((image, StageTimings { msr_ms, transfer_proc_ms, unet_ms, total_ms }))
    }
}

/// `rasterize → pack → network` using a checkpoint.
pub fn render_neural(pc: &PointCloud, cam: &CameraPose, state: &ModelState) -> Result<(Tensor<f32>, StageTimings)> {
    Renderer::new(state)?.render(pc, cam)
}
