#![allow(dead_code)]

use std::path::Path;

use nar::checkpoint::{ModelMeta, ModelState};
use nar::dataset::{default_selection, default_style, generate_dataset, DatasetManifest, RenderSettings};
use nar::synth::{make_synthetic_pc, SynthKind};
use nar_core::geometry::{hemisphere_viewpoints, HemisphereParams};
use nar_core::neural::{LossConfig, UNetConfig};
use nar_core::{Intrinsics, PointCloud, StreamSelection};

pub fn small_meta(selection: StreamSelection, pc: &PointCloud, base: usize, levels: usize) -> ModelMeta {
    let channel_names = selection.channel_names(Some(pc)).unwrap();
    let unet =
        UNetConfig { base_channels: base, max_channels: 4 * base, levels, ..UNetConfig::new(channel_names.len()) };
    ModelMeta { unet, selection, channel_names, loss: LossConfig::default(), validation_views: vec![] }
}

pub fn small_state(pc: &PointCloud) -> ModelState {
    ModelState::init(small_meta(default_selection(pc).unwrap(), pc, 4, 3)).unwrap()
}

pub fn vortex(n: usize, seed: u64) -> PointCloud {
    make_synthetic_pc(SynthKind::VortexField, n, seed).unwrap()
}

/// Hemisphere views with a coarse step, so tests stay quick.
pub fn small_dataset(dir: &Path, pc: &PointCloud, side: u32, subsample: usize, theta_div: usize) -> DatasetManifest {
    let params = HemisphereParams {
        theta_step: 2.0 * std::f64::consts::PI / theta_div as f64,
        phi_step: std::f64::consts::PI / 4.0,
        ..HemisphereParams::default()
    };
    let views = hemisphere_viewpoints(&pc.aabb(), &params, Intrinsics::with_size(side, side)).unwrap();
    let settings = RenderSettings {
        width: side,
        height: side,
        selection: default_selection(pc).unwrap(),
        splat_style: default_style(pc),
        subsample,
        seed: 0,
    };
    let working = pc.subsample(subsample).unwrap();
    generate_dataset(pc, &working, &views, &settings, dir, None).unwrap()
}
