use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aosrnet::harness::procedural_scene;
use aosrnet::imaging::{load_image, save_depth, save_image};
use aosrnet::metrics::psnr;

fn aosrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aosrnet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, n: u64, size: usize) -> (PathBuf, PathBuf) {
    let clean = dir.join("clean");
    let depth = dir.join("depth");
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&depth).unwrap();
    for i in 0..n {
        let (c, d) = procedural_scene(40 + i, size, size);
        save_image(&c, clean.join(format!("img{i}.png"))).unwrap();
        save_depth(&d, depth.join(format!("img{i}.png"))).unwrap();
    }
    (clean, depth)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn haze_without_depth_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = corpus(dir.path(), 1, 16);
    let o = aosrnet(&["synth", "--clean", s(&clean), "--out", s(&dir.path().join("o")), "--scene", "haze"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--depth"), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn lowlight_synth_needs_no_depth_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = corpus(dir.path(), 3, 16);
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = aosrnet(&["synth", "--clean", s(&clean), "--out", s(&out), "--scene", "lowlight", "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files = Vec::new();
        for sub in ["degraded", "clean"] {
            for i in 0..3 {
                files.push(std::fs::read(out.join(sub).join(format!("img{i}.png"))).unwrap());
            }
        }
        files.push(std::fs::read(out.join("manifest.json")).unwrap());
        files
    };
    assert_eq!(run("a"), run("b"));
    let manifest = aosrnet::harness::DatasetManifest::load(dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 3);
}

#[test]
fn haze_synth_with_depth_degrades_images() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, depth) = corpus(dir.path(), 2, 16);
    let out = dir.path().join("o");
    let o = aosrnet(&["synth", "--clean", s(&clean), "--depth", s(&depth), "--out", s(&out), "--scene", "haze"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = load_image(out.join("degraded/img0.png")).unwrap();
    let c = load_image(out.join("clean/img0.png")).unwrap();
    assert!(psnr(&d, &c).unwrap() < 40.0);
}

#[test]
fn unknown_flag_and_bad_values_exit_2() {
    assert_eq!(aosrnet(&["restore", "--bogus"]).status.code(), Some(2));
    assert_eq!(aosrnet(&["synth", "--clean", "a", "--out", "b", "--scene", "fog"]).status.code(), Some(2));
    assert_eq!(aosrnet(&["ablate", "--kind", "both", "--config", "c", "--manifest", "m"]).status.code(), Some(2));
    assert_eq!(aosrnet(&[]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = aosrnet(&["restore", "--ckpt", s(&dir.path().join("none")), "--in", ".", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn help_and_version_on_every_command() {
    for cmd in ["synth", "manifest", "train", "restore", "eval", "sweep", "ablate"] {
        let h = aosrnet(&[cmd, "--help"]);
        assert!(h.status.success(), "{cmd}");
        let v = aosrnet(&[cmd, "--version"]);
        assert!(v.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
    }
}

#[test]
fn eval_on_identical_dirs_hits_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = corpus(dir.path(), 2, 24);
    let report = dir.path().join("r/report.csv");
    let o = aosrnet(&["eval", "--restored", s(&clean), "--truth", s(&clean), "--report", s(&report), "--no-niqe"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let pi = headers.iter().position(|h| h == "psnr").unwrap();
    let si = headers.iter().position(|h| h == "ssim").unwrap();
    let recs: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    assert!(recs.len() >= 2);
    for r in recs.iter().filter(|r| r[0].starts_with("img")) {
        assert_eq!(r[pi].parse::<f64>().unwrap(), 99.0);
        assert_eq!(r[si].parse::<f64>().unwrap(), 1.0);
    }
    assert!(report.with_extension("json").is_file());
}

#[test]
fn eval_rejects_unpaired_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, depth) = corpus(dir.path(), 2, 16);
    std::fs::remove_file(depth.join("img1.png")).unwrap();
    let o = aosrnet(&["eval", "--restored", s(&depth), "--truth", s(&clean), "--report", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("img1.png"));
}

#[test]
fn sweep_writes_one_row_per_point_and_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, depth) = corpus(dir.path(), 2, 24);
    let eval = dir.path().join("eval");
    for scene in ["haze", "sand", "lowlight"] {
        let o = aosrnet(&[
            "synth",
            "--clean",
            s(&clean),
            "--depth",
            s(&depth),
            "--out",
            s(&eval.join(scene)),
            "--scene",
            scene,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "0 0\n0.1 0.1\n").unwrap();
    let o = aosrnet(&["sweep", "--grid", s(&grid), "--eval", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(eval.join("ols_sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

/// Synthesize, train, restore and score four low-light images end to end.
#[test]
fn desk_pipeline_improves_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = corpus(dir.path(), 4, 32);
    let data = dir.path().join("data");
    let o = aosrnet(&["synth", "--clean", s(&clean), "--out", s(&data), "--scene", "lowlight", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "epochs = 300\nlr_drop_epochs = []\nbatch_size = 4\ncrop_size = 32\n\n[network]\nbase_channels = 8\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = aosrnet(&["train", "--config", s(&config), "--manifest", s(&data.join("manifest.json")), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let restored = dir.path().join("restored");
    let o = aosrnet(&[
        "restore",
        "--ckpt",
        s(&run.join("checkpoint.safetensors")),
        "--in",
        s(&data.join("degraded")),
        "--out",
        s(&restored),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = std::fs::read_dir(&restored).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["img0.png", "img1.png", "img2.png", "img3.png"]);
    let mean = |dir: &Path| {
        let report = dir.with_extension("csv");
        let o = aosrnet(&[
            "eval",
            "--restored",
            s(dir),
            "--truth",
            s(&data.join("clean")),
            "--report",
            s(&report),
            "--no-niqe",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
        json["aggregates"]["psnr"]["mean"].as_f64().unwrap()
    };
    let before = mean(&data.join("degraded"));
    let after = mean(&restored);
    assert!(after - before >= 3.0, "degraded {before:.2} dB, restored {after:.2} dB");
}
