//! `nar` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nar_core::geometry::{grid_viewpoints, hemisphere_viewpoints, morton_reorder, GridParams, HemisphereParams};
use nar_core::{CameraPose, Intrinsics, PointCloud, StreamData};
use serde::Deserialize;

use crate::checkpoint::{inspect_checkpoint, load_checkpoint, save_quantized, MAGIC as CK_MAGIC};
use crate::dataset::{default_selection, default_style, generate_dataset, RenderSettings};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate, write_report};
use crate::narpc::{load_pointcloud, save_pointcloud};
use crate::planes::save_png;
use crate::render::{Renderer, StageTimings};
use crate::synth::{make_synthetic_pc, SynthKind};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "nar", version, about = "Point cloud rendering through a learned image pass")]
pub struct Cli {
    /// Seed for every randomised step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with one table per subcommand; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic point cloud.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Morton-order the points before writing.
        #[arg(long)]
        morton: bool,
    },
    /// Describe a point cloud or checkpoint.
    Info { path: PathBuf },
    /// Keep every `factor`-th point.
    Subsample {
        input: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print camera poses as JSON.
    Viewpoints {
        #[arg(long)]
        pc: PathBuf,
        #[arg(long, value_enum)]
        kind: ViewKind,
        #[command(flatten)]
        views: ViewArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Render a training set.
    Datagen(DatagenArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate every view instead of the checkpoint's validation views.
        #[arg(long)]
        all: bool,
        /// Write `<prefix>.csv` / `<prefix>.json` (and `_baseline` variants).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one frame through the network.
    Render {
        #[command(flatten)]
        frame: FrameArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time repeated frames.
    Bench {
        #[command(flatten)]
        frame: FrameArgs,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Write a half-precision copy of a checkpoint.
    Quantize {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the HTTP/WebSocket render service.
    Serve(crate::server::ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Grid,
    Hemisphere,
}

fn parse_kind(s: &str) -> std::result::Result<SynthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args, Default)]
pub struct ViewArgs {
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub yaw_step: Option<f64>,
    /// Comma-separated pitches in degrees.
    #[arg(long, value_delimiter = ',')]
    pub pitches: Option<Vec<f64>>,
    /// Grid camera height above the box top.
    #[arg(long)]
    pub cam_height: Option<f64>,
    #[arg(long)]
    pub radius_scale: Option<f64>,
}

fn make_views(pc: &PointCloud, kind: ViewKind, a: &ViewArgs, width: u32, height: u32) -> Result<Vec<CameraPose>> {
    let intr = Intrinsics::with_size(width, height);
    let aabb = pc.aabb();
    Ok(match kind {
        ViewKind::Grid => {
            let d = GridParams::default();
            let p = GridParams {
                grid_n: a.grid_n.unwrap_or(d.grid_n),
                yaw_step_deg: a.yaw_step.unwrap_or(d.yaw_step_deg),
                pitches_deg: a.pitches.clone().unwrap_or(d.pitches_deg),
                height: a.cam_height.or(d.height),
            };
            grid_viewpoints(&aabb, &p, intr)?
        }
        ViewKind::Hemisphere => {
            let p = HemisphereParams { radius_scale: a.radius_scale.unwrap_or(0.75), ..HemisphereParams::default() };
            hemisphere_viewpoints(&aabb, &p, intr)?
        }
    })
}

#[derive(Debug, Clone, Args)]
pub struct DatagenArgs {
    /// Full-resolution point cloud.
    #[arg(long)]
    pub pc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub views: Option<ViewKind>,
    #[command(flatten)]
    pub view_args: ViewArgs,
    /// Rasterize a subsampled copy; ground truth still uses every point.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Splat stretch factor for flow data.
    #[arg(long)]
    pub stretch: Option<f64>,
    /// Only RGB channels (no depth or velocity).
    #[arg(long)]
    pub rgb_only: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct DatagenFile {
    views: Option<ViewKind>,
    width: Option<u32>,
    height: Option<u32>,
    subsample: Option<usize>,
    stretch: Option<f64>,
    rgb_only: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Drop the 1×1 descriptor head.
    #[arg(long)]
    pub no_descriptors: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FrameArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pc: PathBuf,
    /// Camera position `x,y,z`; defaults to the first hemisphere view.
    #[arg(long, value_delimiter = ',', num_args = 3, allow_hyphen_values = true)]
    pub position: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 512)]
    pub width: u32,
    #[arg(long, default_value_t = 512)]
    pub height: u32,
    #[arg(long, default_value_t = 1)]
    pub sparsity: usize,
}

impl FrameArgs {
    fn camera(&self, pc: &PointCloud) -> Result<CameraPose> {
        let intr = Intrinsics::with_size(self.width, self.height);
        match &self.position {
            Some(p) => Ok(CameraPose::from_yaw_pitch([p[0], p[1], p[2]], self.yaw, self.pitch, intr)?),
            None => hemisphere_viewpoints(&pc.aabb(), &HemisphereParams::default(), intr)?
                .into_iter()
                .nth(1)
                .ok_or_else(|| Error::InvalidArgument("cannot place a default camera".into())),
        }
    }

    fn load(&self) -> Result<(PointCloud, Renderer, CameraPose)> {
        let pc = load_pointcloud(&self.pc)?.subsample(self.sparsity)?;
        let renderer = Renderer::new(&load_checkpoint(&self.checkpoint)?)?;
        let cam = self.camera(&pc)?;
        Ok((pc, renderer, cam))
    }
}

fn describe_stream(d: &StreamData) -> String {
    match d {
        StreamData::U8 { arity, .. } => format!("u8x{arity}"),
        StreamData::F32 { arity, .. } => format!("f32x{arity}"),
    }
}

fn info(path: &Path, out: &mut impl Write) -> Result<()> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.starts_with(CK_MAGIC) {
        let i = inspect_checkpoint(&bytes)?;
        let state = crate::checkpoint::decode_checkpoint(&bytes)?;
        writeln!(out, "checkpoint: {:?}, step {}", i.precision, i.step)?;
        writeln!(out, "channels: {}", state.meta.channel_names.join(", "))?;
        writeln!(out, "tensors: {}", i.tensors.len())?;
        writeln!(out, "weight payload bytes: {}", i.weight_payload_bytes)?;
        return Ok(());
    }
    let pc = crate::narpc::decode_pointcloud(&bytes)?;
    writeln!(out, "count: {}", pc.len())?;
    let streams: Vec<String> =
        pc.streams().iter().map(|s| format!("{} ({})", s.name, describe_stream(&s.data))).collect();
    writeln!(out, "streams: {}", streams.join(", "))?;
    let b = pc.aabb();
    if !b.is_empty() {
        writeln!(out, "aabb: {:?} .. {:?}", b.min, b.max)?;
    }
    Ok(())
}

fn print_timings_table(out: &mut impl Write, rows: &[StageTimings]) -> Result<()> {
    let m = StageTimings::median(rows);
    writeln!(out, "{:>10} {:>18} {:>10} {:>10} {:>10}", "msr_ms", "transfer_proc_ms", "unet_ms", "sum_ms", "total_ms")?;
    writeln!(
        out,
        "{:>10.3} {:>18.3} {:>10.3} {:>10.3} {:>10.3}",
        m.msr_ms,
        m.transfer_proc_ms,
        m.unet_ms,
        m.msr_ms + m.transfer_proc_ms + m.unet_ms,
        m.total_ms
    )?;
    Ok(())
}

/// Runs one parsed command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<()> {
    let seed = cli.seed;
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Synth { kind, n, output, morton } => {
            let mut pc = make_synthetic_pc(kind, n, seed)?;
            if morton {
                pc = morton_reorder(&pc);
            }
            save_pointcloud(&pc, &output)?;
            writeln!(out, "wrote {} points to {}", pc.len(), output.display())?;
        }
        Command::Info { path } => info(&path, out)?,
        Command::Subsample { input, factor, output } => {
            let pc = load_pointcloud(&input)?.subsample(factor)?;
            save_pointcloud(&pc, &output)?;
            writeln!(out, "wrote {} points to {}", pc.len(), output.display())?;
        }
        Command::Viewpoints { pc, kind, views, output } => {
            let pc = load_pointcloud(&pc)?;
            let poses = make_views(&pc, kind, &views, views.width.unwrap_or(512), views.height.unwrap_or(512))?;
            let json = serde_json::to_string_pretty(&poses)?;
            match output {
                Some(p) => std::fs::write(&p, json).at(&p)?,
                None => writeln!(out, "{json}")?,
            }
            writeln!(std::io::stderr(), "{} poses", poses.len())?;
        }
        Command::Datagen(a) => {
            let file: DatagenFile = crate::config::load_section(cfg, "datagen")?;
            let full = load_pointcloud(&a.pc)?;
            let factor = a.subsample.or(file.subsample).unwrap_or(1);
            let working = full.subsample(factor)?;
            let (w, h) =
                (a.view_args.width.or(file.width).unwrap_or(128), a.view_args.height.or(file.height).unwrap_or(128));
            let kind = a.views.or(file.views).unwrap_or(ViewKind::Hemisphere);
            let views = make_views(&full, kind, &a.view_args, w, h)?;
            let mut selection = default_selection(&full)?;
            if a.rgb_only || file.rgb_only.unwrap_or(false) {
                selection = nar_core::StreamSelection::rgb_only();
            }
            let mut style = default_style(&full);
            if let (nar_core::SplatStyle::VectorField { stretch, .. }, Some(s)) =
                (&mut style, a.stretch.or(file.stretch))
            {
                *stretch = s;
            }
            let settings =
                RenderSettings { width: w, height: h, selection, splat_style: style, subsample: factor, seed };
            let m = generate_dataset(&full, &working, &views, &settings, &a.out, Some(a.pc.display().to_string()))?;
            writeln!(out, "wrote {} views to {}", m.views.len(), a.out.display())?;
        }
        Command::Train(a) => {
            let mut c: TrainConfig = crate::config::load_section(cfg, "train")?;
            c.seed = seed;
            if let Some(v) = a.epochs {
                c.epochs = v;
            }
            if let Some(v) = a.batch {
                c.batch = v;
            }
            if let Some(v) = a.lr {
                c.lr = v;
            }
            if let Some(v) = a.base_channels {
                c.base_channels = v;
            }
            if a.no_descriptors {
                c.descriptor_head = false;
            }
            let report = train(&a.data, &c, &a.out, |r| {
                eprintln!("epoch {:>3}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
            })?;
            writeln!(
                out,
                "best epoch {} (val {:.6}), checkpoint {}",
                report.best_epoch,
                report.best_val,
                report.checkpoint.display()
            )?;
        }
        Command::Eval { checkpoint, data, all, out: prefix } => {
            let state = load_checkpoint(&checkpoint)?;
            let ids = if all { Some(crate::dataset::DatasetManifest::load(&data)?.ids()) } else { None };
            let report = evaluate(&state, &data, ids.as_deref())?;
            writeln!(out, "views: {}", report.neural.count())?;
            writeln!(out, "neural   psnr {:.3} dB  ssim {:.4}", report.neural.mean_psnr(), report.neural.mean_ssim())?;
            if let Some(b) = &report.baseline {
                writeln!(out, "baseline psnr {:.3} dB  ssim {:.4}", b.mean_psnr(), b.mean_ssim())?;
            }
            if let Some(p) = prefix {
                let with = |suffix: &str, ext: &str| PathBuf::from(format!("{}{suffix}.{ext}", p.display()));
                write_report(&report.neural, &with("", "csv"), &with("", "json"))?;
                if let Some(b) = &report.baseline {
                    write_report(b, &with("_baseline", "csv"), &with("_baseline", "json"))?;
                }
            }
        }
        Command::Render { frame, output } => {
            let (pc, renderer, cam) = frame.load()?;
            let (image, t) = renderer.render(&pc, &cam)?;
            save_png(&image, &output)?;
            writeln!(out, "{}", serde_json::to_string(&t)?)?;
        }
        Command::Bench { frame, frames, warmup } => {
            if frames == 0 {
                return Err(Error::InvalidArgument("--frames must be at least 1".into()));
            }
            let (pc, renderer, cam) = frame.load()?;
            for _ in 0..warmup {
                renderer.render(&pc, &cam)?;
            }
            let start = Instant::now();
            let mut rows = Vec::with_capacity(frames);
            for _ in 0..frames {
                rows.push(renderer.render(&pc, &cam)?.1);
            }
            let wall = start.elapsed().as_secs_f64() * 1e3 / frames as f64;
            writeln!(out, "{} points, {}x{}, {frames} frames", pc.len(), frame.width, frame.height)?;
            print_timings_table(out, &rows)?;
            writeln!(out, "mean wall ms per frame: {wall:.3}")?;
        }
        Command::Quantize { input, output } => {
            let state = load_checkpoint(&input)?;
            let saturated = save_quantized(&state, &output)?;
            if saturated > 0 {
                writeln!(std::io::stderr(), "warning: {saturated} weights saturated at the half-precision range")?;
            }
            let a = inspect_checkpoint(&std::fs::read(&input).at(&input)?)?;
            let b = inspect_checkpoint(&std::fs::read(&output).at(&output)?)?;
            writeln!(out, "weight payload {} -> {} bytes", a.weight_payload_bytes, b.weight_payload_bytes)?;
        }
        Command::Serve(a) => crate::server::serve_blocking(a, cfg, seed)?,
    }
    Ok(())
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
