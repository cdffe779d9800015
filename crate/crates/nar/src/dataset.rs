//! Training-set generation: splat ground truth from the full cloud and
//! rasterizer features from the working cloud, one pair per view.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   gt/NNNN.png   8-bit preview
//!   gt/NNNN.f32   raw ground truth planes
//!   feat/NNNN.msr feature planes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nar_core::gsplat::{build_splats, render_gsplat, velocity_percentile};
use nar_core::msr::rasterize;
use nar_core::{CameraPose, PointCloud, SplatStyle, StreamSelection, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::planes::{load_planes, save_planes, save_png, Planes};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub width: u32,
    pub height: u32,
    pub selection: StreamSelection,
    pub splat_style: SplatStyle,
    /// Stride applied to the working cloud; ground truth always uses the
    /// full cloud.
    pub subsample: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub id: usize,
    pub pose: CameraPose,
    pub gt_png: String,
    pub gt_raw: String,
    pub features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pointcloud: Option<String>,
    pub settings: RenderSettings,
    pub channel_names: Vec<String>,
    pub views: Vec<ViewEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: DatasetManifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        m.validate(dir)?;
        Ok(m)
    }

    /// Every listed file exists and has the declared dimensions.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Format("manifest lists no views".into()));
        }
        for v in &self.views {
            for f in [&v.gt_png, &v.gt_raw, &v.features] {
                if !dir.join(f).is_file() {
                    return Err(Error::Format(format!("view {} references missing file {f}", v.id)));
                }
            }
            if v.pose.intrinsics.width != self.settings.width || v.pose.intrinsics.height != self.settings.height {
                return Err(Error::Format(format!("view {} has a different resolution", v.id)));
            }
        }
        Ok(())
    }

    pub fn view(&self, id: usize) -> Option<&ViewEntry> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.id).collect()
    }
}

/// The rasterizer selection the acceptance datasets use: RGB, depth and
/// screen-space velocity scaled by the 99th-percentile speed.
pub fn default_selection(pc: &PointCloud) -> Result<StreamSelection> {
    if pc.stream("velocity").is_some() {
        Ok(StreamSelection::rgb_depth_vel2d(velocity_percentile(pc)?))
    } else {
        Ok(StreamSelection { depth: true, ..StreamSelection::rgb_only() })
    }
}

/// Splat style matching the cloud: stretched flow splats when a velocity
/// stream exists, isotropic terrain splats otherwise.
pub fn default_style(pc: &PointCloud) -> SplatStyle {
    if pc.stream("velocity").is_some() {
        SplatStyle::vector_field(300.0)
    } else {
        SplatStyle::Terrain { opacity: 1.0 }
    }
}

/// One loaded training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub features: Tensor<f32>,
    pub target: Tensor<f32>,
}

pub fn load_sample(dir: &Path, manifest: &DatasetManifest, id: usize) -> Result<Sample> {
    let v = manifest.view(id).ok_or_else(|| Error::InvalidArgument(format!("no view {id}")))?;
    let feat = load_planes(&dir.join(&v.features))?;
    if feat.names != manifest.channel_names {
        return Err(Error::StreamMismatch(format!("view {id} features have channels {:?}", feat.names)));
    }
    let gt = load_planes(&dir.join(&v.gt_raw))?;
    Ok(Sample { id, features: feat.data, target: gt.data })
}

pub fn load_samples(dir: &Path, manifest: &DatasetManifest, ids: &[usize]) -> Result<Vec<Sample>> {
    ids.par_iter().map(|&id| load_sample(dir, manifest, id)).collect()
}

fn rel(sub: &str, id: usize, ext: &str) -> String {
    format!("{sub}/{id:04}.{ext}")
}

/// Renders and writes every view. `full` feeds the reference renderer,
/// `working` the rasterizer.
pub fn generate_dataset(
    full: &PointCloud,
    working: &PointCloud,
    views: &[CameraPose],
    settings: &RenderSettings,
    dir: &Path,
    pointcloud: Option<String>,
) -> Result<DatasetManifest> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to render".into()));
    }
    settings.selection.validate(working)?;
    let channel_names = settings.selection.channel_names(Some(working))?;
    let splats = build_splats(full, settings.splat_style)?;
    for sub in ["gt", "feat"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).at(&d)?;
    }
    let entries: Vec<ViewEntry> = views
        .par_iter()
        .enumerate()
        .map(|(id, pose)| -> Result<ViewEntry> {
            let mut pose = *pose;
            pose.intrinsics.width = settings.width;
            pose.intrinsics.height = settings.height;
            let gt = render_gsplat(&splats, &pose)?.image;
            let feat = rasterize(working, &pose, &settings.selection)?;
            let entry = ViewEntry {
                id,
                pose,
                gt_png: rel("gt", id, "png"),
                gt_raw: rel("gt", id, "f32"),
                features: rel("feat", id, "msr"),
            };
            save_png(&gt, &dir.join(&entry.gt_png))?;
            save_planes(&Planes::rgb(gt)?, &dir.join(&entry.gt_raw))?;
            save_planes(&Planes::from(&feat), &dir.join(&entry.features))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest { pointcloud, settings: settings.clone(), channel_names, views: entries };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}
