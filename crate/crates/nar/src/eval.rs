//! Held-out evaluation against the reference renders.

use std::fs;
use std::path::Path;

use nar_core::metrics::{MetricReport, MetricRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::dataset::{load_sample, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::render::Renderer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub neural: MetricReport,
    /// Nearest-point colours straight from the rasterizer, black where no
    /// point landed.
    pub baseline: Option<MetricReport>,
}

/// Scores `views` (default: the checkpoint's validation views when they
/// exist in this dataset, otherwise every view).
pub fn evaluate(state: &ModelState, dataset_dir: &Path, views: Option<&[usize]>) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(dataset_dir)?;
    if manifest.channel_names != state.meta.channel_names {
        return Err(Error::StreamMismatch(format!(
            "checkpoint channels {:?} do not match dataset channels {:?}",
            state.meta.channel_names, manifest.channel_names
        )));
    }
    let ids: Vec<usize> = match views {
        Some(v) => v.to_vec(),
        None => {
            let val = &state.meta.validation_views;
            if !val.is_empty() && val.iter().all(|&id| manifest.view(id).is_some()) {
                val.clone()
            } else {
                manifest.ids()
            }
        }
    };
    let renderer = Renderer::new(state)?;
    let has_rgb = ["r", "g", "b"].iter().all(|c| manifest.channel_names.iter().any(|n| n == c));
    let rows: Vec<(MetricRow, Option<MetricRow>)> = ids
        .par_iter()
        .map(|&id| -> Result<_> {
            let s = load_sample(dataset_dir, &manifest, id)?;
            let out = renderer.infer(&s.features)?;
            let mut r = MetricReport::default();
            r.push(id, &s.target, &out)?;
            let base = if has_rgb {
                let rgb = crate::planes::Planes::new(manifest.channel_names.clone(), s.features)?
                    .rgb_channels()
                    .expect("rgb channels present");
                let mut b = MetricReport::default();
                b.push(id, &s.target, &rgb)?;
                b.rows.pop()
            } else {
                None
            };
            Ok((r.rows.pop().expect("one row"), base))
        })
        .collect::<Result<_>>()?;
    let mut neural = MetricReport::default();
    let mut baseline = has_rgb.then(MetricReport::default);
    for (n, b) in rows {
        neural.rows.push(n);
        if let (Some(rep), Some(b)) = (baseline.as_mut(), b) {
            rep.rows.push(b);
        }
    }
    Ok(EvalReport { neural, baseline })
}

pub fn report_csv(report: &MetricReport) -> String {
    let mut s = String::from("view_id,psnr_db,ssim\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{}\n", r.view_id, r.psnr_db, r.ssim));
    }
    s
}

pub fn write_report(report: &MetricReport, csv: &Path, json: &Path) -> Result<()> {
    fs::write(csv, report_csv(report)).at(csv)?;
    fs::write(json, serde_json::to_vec_pretty(report)?).at(json)
}
