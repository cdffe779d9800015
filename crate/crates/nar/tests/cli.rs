use std::path::Path;
use std::process::{Command, Output};

fn nar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nar")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = nar(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_then_info() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--kind", "vortex_field", "--n", "50000", "--seed", "7", "-o", "pc.narpc"], d.path());
    let info = ok(&["info", "pc.narpc"], d.path());
    assert!(info.contains("count: 50000"), "{info}");
    assert!(info.contains("rgb (u8x3)") && info.contains("velocity (f32x3)"), "{info}");
    ok(&["subsample", "pc.narpc", "--factor", "10", "-o", "sub.narpc"], d.path());
    assert!(ok(&["info", "sub.narpc"], d.path()).contains("count: 5000"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    for args in
        [&["frobnicate"][..], &["synth", "--bogus"], &[], &["synth", "--kind", "lava", "--n", "2000", "-o", "x"]]
    {
        let out = nar(args, d.path());
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage") || !out.stderr.is_empty());
    }
    let out = nar(&["frobnicate"], d.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = nar(&["info", "missing.narpc"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.narpc"));
}

#[test]
fn viewpoint_counts() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--kind", "terrain", "--n", "2000", "-o", "t.narpc"], d.path());
    let grid: serde_json::Value =
        serde_json::from_str(&ok(&["viewpoints", "--pc", "t.narpc", "--kind", "grid"], d.path())).unwrap();
    assert_eq!(grid.as_array().unwrap().len(), 2400);
    let hemi: serde_json::Value =
        serde_json::from_str(&ok(&["viewpoints", "--pc", "t.narpc", "--kind", "hemisphere"], d.path())).unwrap();
    assert_eq!(hemi.as_array().unwrap().len(), 129);
    let small: serde_json::Value = serde_json::from_str(&ok(
        &["viewpoints", "--pc", "t.narpc", "--kind", "grid", "--grid-n", "2", "--yaw-step", "90", "--pitches", "10,20"],
        d.path(),
    ))
    .unwrap();
    assert_eq!(small.as_array().unwrap().len(), 2 * 2 * 4 * 2);
}

#[test]
fn datagen_train_eval_render_bench_quantize() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(
        p.join("nar.toml"),
        "[datagen]\nwidth = 32\nheight = 32\n\n[train]\nepochs = 1\nbatch = 8\nbase_channels = 4\nmax_channels = 8\nlevels = 2\n",
    )
    .unwrap();
    ok(&["synth", "--kind", "vortex_field", "--n", "3000", "-o", "pc.narpc"], p);
    ok(&["--config", "nar.toml", "datagen", "--pc", "pc.narpc", "--out", "ds"], p);
    assert!(p.join("ds/manifest.json").is_file());
    let train = ok(&["--config", "nar.toml", "--seed", "3", "train", "--data", "ds", "--out", "run"], p);
    assert!(train.contains("best epoch 1"), "{train}");
    let eval = ok(&["eval", "--checkpoint", "run/model.narck", "--data", "ds", "--out", "metrics"], p);
    assert!(eval.contains("neural") && eval.contains("baseline"), "{eval}");
    for f in ["metrics.csv", "metrics.json", "metrics_baseline.csv", "metrics_baseline.json"] {
        assert!(p.join(f).is_file(), "{f}");
    }

    let t = ok(
        &[
            "render",
            "--checkpoint",
            "run/model.narck",
            "--pc",
            "pc.narpc",
            "--width",
            "40",
            "--height",
            "24",
            "-o",
            "f.png",
        ],
        p,
    );
    let timings: serde_json::Value = serde_json::from_str(t.trim()).unwrap();
    assert!(timings["unet_ms"].as_f64().unwrap() > 0.0);
    let img = nar::planes::decode_png(&std::fs::read(p.join("f.png")).unwrap()).unwrap();
    assert_eq!(img.shape(), &[3, 24, 40]);

    let bench = ok(
        &[
            "bench",
            "--checkpoint",
            "run/model.narck",
            "--pc",
            "pc.narpc",
            "--frames",
            "5",
            "--warmup",
            "1",
            "--width",
            "64",
            "--height",
            "64",
        ],
        p,
    );
    let lines: Vec<&str> = bench.lines().collect();
    let header = lines.iter().position(|l| l.contains("msr_ms")).unwrap();
    assert!(lines[header].contains("transfer_proc_ms") && lines[header].contains("unet_ms"));
    let v: Vec<f64> = lines[header + 1].split_whitespace().map(|x| x.parse().unwrap()).collect();
    assert!((v[3] - (v[0] + v[1] + v[2])).abs() < 1e-2);

    let q = ok(&["quantize", "run/model.narck", "-o", "run/model16.narck"], p);
    let nums: Vec<usize> = q.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    assert_eq!(nums[0], 2 * nums[1]);
    assert!(ok(&["info", "run/model16.narck"], p).contains("F16"));
    ok(
        &[
            "render",
            "--checkpoint",
            "run/model16.narck",
            "--pc",
            "pc.narpc",
            "--width",
            "16",
            "--height",
            "16",
            "-o",
            "g.png",
        ],
        p,
    );
}

#[test]
fn render_with_mismatched_checkpoint_fails() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(
        p.join("nar.toml"),
        "[datagen]\nwidth = 16\nheight = 16\n[train]\nepochs = 1\nbase_channels = 2\nmax_channels = 4\nlevels = 2\n",
    )
    .unwrap();
    ok(&["synth", "--kind", "vortex_field", "--n", "2000", "-o", "v.narpc"], p);
    ok(&["synth", "--kind", "terrain", "--n", "2000", "-o", "t.narpc"], p);
    ok(&["--config", "nar.toml", "datagen", "--pc", "v.narpc", "--out", "ds"], p);
    ok(&["--config", "nar.toml", "train", "--data", "ds", "--out", "run"], p);
    let out = nar(
        &[
            "render",
            "--checkpoint",
            "run/model.narck",
            "--pc",
            "t.narpc",
            "-o",
            "x.png",
            "--width",
            "16",
            "--height",
            "16",
        ],
        p,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stream mismatch"));
    assert!(!p.join("x.png").exists());
}
