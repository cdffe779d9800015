mod common;

use std::fs;
use std::path::Path;

use common::{small_dataset, small_meta, small_state, vortex};
use nar::checkpoint::{load_checkpoint, save_checkpoint, ModelState};
use nar::dataset::{default_selection, load_samples, DatasetManifest, Sample};
use nar::eval::{evaluate, report_csv};
use nar::planes::{decode_png, encode_planes, load_planes, Planes};
use nar::render::{render_neural, Renderer, StageTimings};
use nar::synth::{make_synthetic_pc, vortex_velocity, SynthKind, Terrain};
use nar::train::{smooth, split_views, train, TrainConfig, Trainer};
use nar::Error;
use nar_core::geometry::{hemisphere_viewpoints, HemisphereParams};
use nar_core::metrics::MetricReport;
use nar_core::{Intrinsics, StreamSelection};

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch: 4, base_channels: 4, max_channels: 16, levels: 3, seed: 5, ..TrainConfig::default() }
}

fn files(dir: &Path, sub: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir.join(sub))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn vortex_samples_carry_the_analytic_field() {
    let pc = vortex(5000, 7);
    assert_eq!(pc.len(), 5000);
    let names: Vec<_> = pc.streams().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["rgb", "velocity"]);
    let vel = pc.stream("velocity").unwrap();
    for (i, &p) in pc.positions().iter().enumerate() {
        let v = vortex_velocity(p);
        assert_eq!([vel.get_f32(i, 0), vel.get_f32(i, 1), vel.get_f32(i, 2)], v);
    }
    assert_eq!(vortex(5000, 7), pc);
    assert_ne!(vortex(5000, 8), pc);
}

#[test]
fn terrain_points_lie_on_the_height_field() {
    let pc = make_synthetic_pc(SynthKind::Terrain, 4000, 3).unwrap();
    let t = Terrain::new(3);
    for p in pc.positions() {
        assert!((p[2] as f64 - t.height(p[0] as f64, p[1] as f64)).abs() < 1e-6);
    }
    assert_eq!(make_synthetic_pc(SynthKind::Terrain, 4000, 3).unwrap(), pc);
}

#[test]
fn storms_and_argument_errors() {
    let pc = make_synthetic_pc(SynthKind::StormTrajectories, 3000, 1).unwrap();
    assert_eq!(pc.len(), 3000);
    assert!(pc.stream("velocity").is_some() && pc.stream("rgb").is_some());
    assert!(make_synthetic_pc(SynthKind::VortexField, 999, 1).is_err());
    assert!("lava".parse::<SynthKind>().is_err());
    assert_eq!("storm_trajectories".parse::<SynthKind>().unwrap(), SynthKind::StormTrajectories);
}

#[test]
fn hemisphere_dataset_has_one_file_triple_per_view() {
    let dir = tempfile::tempdir().unwrap();
    let pc = vortex(2000, 1);
    let views = hemisphere_viewpoints(&pc.aabb(), &HemisphereParams::default(), Intrinsics::with_size(12, 12)).unwrap();
    let settings = nar::dataset::RenderSettings {
        width: 12,
        height: 12,
        selection: default_selection(&pc).unwrap(),
        splat_style: nar::dataset::default_style(&pc),
        subsample: 1,
        seed: 0,
    };
    let m = nar::dataset::generate_dataset(&pc, &pc, &views, &settings, dir.path(), None).unwrap();
    assert_eq!(m.views.len(), 129);
    assert_eq!(files(dir.path(), "gt").len(), 2 * 129);
    assert_eq!(files(dir.path(), "feat").len(), 129);
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn dataset_generation_is_reproducible_and_subsampling_only_touches_features() {
    let pc = vortex(3000, 2);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_dataset(a.path(), &pc, 24, 1, 4);
    small_dataset(b.path(), &pc, 24, 1, 4);
    small_dataset(c.path(), &pc, 24, 4, 4);
    for sub in ["gt", "feat"] {
        assert_eq!(files(a.path(), sub), files(b.path(), sub));
    }
    assert_eq!(fs::read(a.path().join("manifest.json")).unwrap(), fs::read(b.path().join("manifest.json")).unwrap());
    assert_eq!(files(a.path(), "gt"), files(c.path(), "gt"));
    let (fa, fc) = (files(a.path(), "feat"), files(c.path(), "feat"));
    assert!(fa.iter().zip(&fc).all(|(x, y)| x.1 != y.1));
}

#[test]
fn gt_png_and_raw_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path(), &vortex(2000, 3), 16, 1, 2);
    let v = &m.views[1];
    let raw = load_planes(&dir.path().join(&v.gt_raw)).unwrap().data;
    let png = decode_png(&fs::read(dir.path().join(&v.gt_png)).unwrap()).unwrap();
    for (a, b) in raw.data().iter().zip(png.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    let mut rep = MetricReport::default();
    rep.push(0, &raw, &raw).unwrap();
    assert_eq!((rep.mean_psnr(), rep.mean_ssim()), (100.0, 1.0));
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let ids: Vec<usize> = (0..129).collect();
    let (t, v) = split_views(&ids, 0.1, 3);
    assert_eq!((t.len(), v.len()), (116, 13));
    assert_eq!(split_views(&ids, 0.1, 3), (t.clone(), v.clone()));
    let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
    all.sort();
    assert_eq!(all, ids);
    assert_eq!(split_views(&[4, 9], 0.1, 0).1.len(), 1);
}

#[test]
fn smoke_training_writes_checkpoints_and_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let m = small_dataset(data.path(), &vortex(3000, 4), 64, 1, 5);
    assert!(m.views.len() >= 10);
    let cfg = TrainConfig { checkpoint_every: 1, ..tiny_train_config(2) };
    let (o1, o2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut seen = Vec::new();
    let r1 = train(data.path(), &cfg, o1.path(), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, [1, 2]);
    for f in
        ["best.narck", "model.narck", "epoch_0001.narck", "epoch_0002.narck", "loss_curve.csv", "train_config.json"]
    {
        assert!(o1.path().join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(o1.path().join("loss_curve.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lperc,lreco,ltv\n"));
    assert_eq!(csv.lines().count(), 3);

    let r2 = train(data.path(), &cfg, o2.path(), |_| {}).unwrap();
    for (a, b) in r1.curve.iter().zip(&r2.curve) {
        for (x, y) in [(a.train_loss, b.train_loss), (a.val_loss, b.val_loss)] {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
    let model = load_checkpoint(&r1.checkpoint).unwrap();
    assert_eq!(model.meta.validation_views, r1.val_ids);
    assert_eq!(model.step, load_checkpoint(&o1.path().join(format!("epoch_{:04}.narck", r1.best_epoch))).unwrap().step);

    // Evaluation defaults to the held-out views.
    let rep = evaluate(&model, data.path(), None).unwrap();
    assert_eq!(rep.neural.count(), r1.val_ids.len());
    assert_eq!(rep.baseline.as_ref().unwrap().count(), r1.val_ids.len());
    assert_eq!(report_csv(&rep.neural).lines().count(), r1.val_ids.len() + 1);
}

#[test]
fn non_finite_targets_abort_with_last_good_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let m = small_dataset(data.path(), &vortex(2000, 5), 16, 1, 4);
    for v in &m.views {
        let p = data.path().join(&v.gt_raw);
        let mut planes = load_planes(&p).unwrap();
        planes.data.data_mut()[7] = f32::NAN;
        fs::write(&p, encode_planes(&Planes::rgb(planes.data).unwrap()).unwrap()).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    match train(data.path(), &tiny_train_config(2), out.path(), |_| {}) {
        Err(Error::TrainingAborted { epoch, last_good, .. }) => {
            assert_eq!(epoch, 1);
            let s = load_checkpoint(&last_good).unwrap();
            assert!(s.params.all_finite());
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}

fn run_steps(trainer: &Trainer, state: &mut ModelState, samples: &[Sample], steps: std::ops::Range<usize>) {
    for s in steps {
        let batch: Vec<&Sample> = samples.iter().cycle().skip(2 * s).take(2).collect();
        trainer.step(state, &batch).unwrap();
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let pc = vortex(2000, 6);
    let m = small_dataset(data.path(), &pc, 16, 1, 2);
    let samples = load_samples(data.path(), &m, &m.ids()).unwrap();
    let state = ModelState::init(small_meta(m.settings.selection.clone(), &pc, 4, 3)).unwrap();
    let cfg = tiny_train_config(1);
    let trainer = Trainer::new(&state.meta.unet, cfg.loss.clone(), cfg.adam()).unwrap();

    let mut straight = state.clone();
    run_steps(&trainer, &mut straight, &samples, 0..6);

    let mut first = state;
    run_steps(&trainer, &mut first, &samples, 0..3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.narck");
    save_checkpoint(&first, &p).unwrap();
    let mut resumed = load_checkpoint(&p).unwrap();
    assert_eq!(resumed.step, 3);
    run_steps(&trainer, &mut resumed, &samples, 3..6);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn rendering_contract() {
    let pc = vortex(4000, 9);
    let state = small_state(&pc);
    let cam =
        hemisphere_viewpoints(&pc.aabb(), &HemisphereParams::default(), Intrinsics::with_size(50, 30)).unwrap()[5];
    let (img, t) = render_neural(&pc, &cam, &state).unwrap();
    assert_eq!(img.shape(), &[3, 30, 50]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(t.msr_ms > 0.0 && t.transfer_proc_ms > 0.0 && t.unet_ms > 0.0);
    assert!(t.total_ms >= t.msr_ms + t.unet_ms);
    assert_eq!(render_neural(&pc, &cam, &state).unwrap().0, img);

    // An RGB-only model cannot consume a cloud rendered with velocity
    // channels, and a cloud without velocity cannot feed a velocity model.
    let terrain = make_synthetic_pc(SynthKind::Terrain, 2000, 1).unwrap();
    assert!(matches!(render_neural(&terrain, &cam, &state), Err(Error::StreamMismatch(_))));
    let rgb_model = ModelState::init(small_meta(StreamSelection::rgb_only(), &pc, 4, 3)).unwrap();
    let mut wrong = rgb_model.clone();
    wrong.meta.channel_names = vec!["r".into(), "g".into(), "x".into()];
    assert!(matches!(Renderer::new(&wrong).unwrap().render(&pc, &cam), Err(Error::StreamMismatch(_))));
    assert!(render_neural(&pc, &cam, &rgb_model).is_ok());
}

#[test]
fn timing_medians_and_smoothing() {
    let t = |v| StageTimings { msr_ms: v, transfer_proc_ms: 2.0 * v, unet_ms: 3.0 * v, total_ms: 6.0 * v };
    let m = StageTimings::median(&[t(3.0), t(1.0), t(2.0), t(10.0)]);
    assert_eq!(m, t(2.5));
    assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), [1.0, 2.0, 4.0, 6.0]);
}
