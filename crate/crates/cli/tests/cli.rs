use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eliot_cli::RunConfig;
use eliot_core::cloud_io::{save_kitti_bin, synth_scene, SceneSpec};
use eliot_core::eval::load_kitti_poses;
use eliot_core::net::synth_pairs;

fn eliot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eliot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eliot(args);
    assert!(
        out.status.success(),
        "eliot {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PAIRS: &str = "preset = \"tiny\"\nsynth.pairs = 2\n";

fn train_config(dir: &Path, data: &Path) -> PathBuf {
    write(
        dir,
        "train.toml",
        &format!(
            "preset = \"tiny\"\nprecision = \"f64\"\ndata.root = \"{}\"\ntrain.epochs = 2\ntrain.batch_size = 2\ntrain.checkpoint_every = 1\n",
            data.display()
        ),
    )
}

#[test]
fn synth_pairs_are_reproducible_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", PAIRS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    let scans: Vec<_> = std::fs::read_dir(a.join("velodyne")).unwrap().collect();
    assert_eq!(scans.len(), 4);
    for name in [
        "velodyne/000000.bin",
        "velodyne/000003.bin",
        "labels.txt",
        "manifest.toml",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }

    let mut rc = RunConfig::from_toml(PAIRS).unwrap();
    rc.apply_seed(3);
    let sy = &rc.synth;
    let expected = synth_pairs(
        sy.pairs,
        &sy.scene,
        sy.max_translation,
        sy.max_rotation_deg.to_radians(),
        3,
    )
    .unwrap();
    let labels = load_kitti_poses(a.join("labels.txt")).unwrap();
    for (l, e) in labels.poses().iter().zip(&expected) {
        assert!((l.matrix() - e.label.matrix()).abs().max() <= 1e-9);
    }
}

#[test]
fn occupied_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", PAIRS);
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    write(&out, "keep.txt", "x");
    let r = eliot(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    ok(&["synth", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert!(out.join("keep.txt").exists() && out.join("labels.txt").exists());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "icp.max_iteration = 3\n");
    let out = dir.path().join("o");
    assert_eq!(
        eliot(&["synth", "--config", s(&bad), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    let unlearned = write(dir.path(), "u.toml", "data.root = \"/nonexistent\"\n");
    let r = eliot(&[
        "odom",
        "--config",
        s(&unlearned),
        "--method",
        "eliot",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2), "missing checkpoint");
    let r = eliot(&[
        "train",
        "--config",
        s(&unlearned),
        "--method",
        "icp-po2po",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2), "training an ICP method");
    assert_eq!(
        eliot(&["odom", "--method", "icp", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_logs_every_step_and_resumes_to_identical_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scfg = write(dir.path(), "s.toml", PAIRS);
    ok(&["synth", "--config", s(&scfg), "--out", s(&data)]);
    let cfg = train_config(dir.path(), &data);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);

    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "2 epochs of one batch");
    for (i, r) in rows.iter().enumerate() {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert!(cols[3].parse::<f64>().unwrap().is_finite());
    }
    assert!(run.join("ckpt_epoch_0001.toml").exists());

    let again = dir.path().join("again");
    let model = run.join("model.toml");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&again),
        "--checkpoint",
        s(&model),
    ]);
    for name in ["model.toml", "model.bin"] {
        assert_eq!(
            std::fs::read(run.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }

    // The trained network runs odometry over a pair set's sequence layout.
    let seq = dir.path().join("seq");
    let vel = seq.join("sequences").join("00").join("velodyne");
    std::fs::create_dir_all(&vel).unwrap();
    for i in 0..3 {
        std::fs::copy(
            data.join("velodyne").join(format!("{i:06}.bin")),
            vel.join(format!("{i:06}.bin")),
        )
        .unwrap();
    }
    let ocfg = write(
        dir.path(),
        "o.toml",
        &format!("preset = \"tiny\"\nprecision = \"f64\"\ndata.root = \"{}\"\ndata.eval_sequences = [\"00\"]\n", seq.display()),
    );
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    ok(&[
        "odom",
        "--config",
        s(&ocfg),
        "--checkpoint",
        s(&model),
        "--out",
        s(&o1),
    ]);
    ok(&[
        "odom",
        "--config",
        s(&ocfg),
        "--checkpoint",
        s(&model),
        "--out",
        s(&o2),
    ]);
    assert_eq!(
        std::fs::read(o1.join("00.txt")).unwrap(),
        std::fs::read(o2.join("00.txt")).unwrap()
    );
    assert_eq!(load_kitti_poses(o1.join("00.txt")).unwrap().len(), 3);

    let r = eliot(&[
        "odom",
        "--config",
        s(&ocfg),
        "--method",
        "eliot-knn",
        "--checkpoint",
        s(&model),
        "--out",
        s(&dir.path().join("o3")),
    ]);
    assert_eq!(r.status.code(), Some(2), "flow embedding mismatch");

    let attn_out = [dir.path().join("a1"), dir.path().join("a2")];
    let (src, dst) = (
        data.join("velodyne/000000.bin"),
        data.join("velodyne/000001.bin"),
    );
    for o in &attn_out {
        ok(&[
            "attn",
            "--config",
            s(&ocfg),
            "--checkpoint",
            s(&model),
            "--pair",
            s(&src),
            s(&dst),
            "--out",
            s(o),
        ]);
    }
    let text = std::fs::read_to_string(attn_out[0].join("attention.csv")).unwrap();
    assert_eq!(
        text,
        std::fs::read_to_string(attn_out[1].join("attention.csv")).unwrap()
    );
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let rc = RunConfig::from_toml("preset = \"tiny\"").unwrap();
    assert_eq!(rows.len(), rc.net.dec.layers * rc.net.dec.queries);
    for r in &rows {
        assert!((r[2..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r[2..].iter().all(|w| *w >= 0.0));
    }
    let kp = std::fs::read_to_string(attn_out[0].join("keypoints.csv")).unwrap();
    assert_eq!(kp.lines().count(), 1 + 2 * rc.net.n_key);
}

#[test]
fn odom_on_identical_frames_is_identity_and_eval_of_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let vel = root.join("sequences").join("00").join("velodyne");
    std::fs::create_dir_all(&vel).unwrap();
    let cloud = synth_scene(&SceneSpec::default()).unwrap();
    let frames = 5;
    for i in 0..frames {
        save_kitti_bin(&cloud, vel.join(format!("{i:06}.bin"))).unwrap();
    }
    let cfg = write(
        dir.path(),
        "c.toml",
        &format!(
            "data.root = \"{}\"\ndata.eval_sequences = [\"00\"]\n",
            root.display()
        ),
    );
    let out = dir.path().join("odom");
    ok(&[
        "odom",
        "--config",
        s(&cfg),
        "--method",
        "icp-po2po",
        "--out",
        s(&out),
    ]);
    let traj = load_kitti_poses(out.join("00.txt")).unwrap();
    assert_eq!(traj.len(), frames);
    assert_eq!(
        std::fs::read_to_string(out.join("00.txt"))
            .unwrap()
            .lines()
            .count(),
        frames
    );
    for p in traj.poses() {
        assert!((p.matrix() - nalgebra::Matrix4::identity()).abs().max() <= 1e-6);
    }
    let timing = std::fs::read_to_string(out.join("00_timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), frames);

    let seq = dir.path().join("seq");
    ok(&[
        "synth",
        "--config",
        s(&write(dir.path(), "q.toml", "synth.mode = \"sequence\"\n")),
        "--out",
        s(&seq),
    ]);
    let gt = seq.join("poses").join("00.txt");
    let ev = dir.path().join("ev");
    let stdout = ok(&["eval", "--gt", s(&gt), "--pred", s(&gt), "--out", s(&ev)]);
    assert!(stdout.contains("t_rel = 0.000000 %"), "{stdout}");
    assert!(stdout.contains("r_rel = 0.000000 deg/100m"), "{stdout}");
    let report: toml::Table = std::fs::read_to_string(ev.join("report.txt"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(report["t_rel"].as_float(), Some(0.0));
    for name in [
        "trajectory.svg",
        "trajectory_gt.csv",
        "error_vs_length.csv",
        "error_vs_speed.csv",
        "manifest.toml",
    ] {
        assert!(ev.join(name).exists(), "{name}");
    }
    roxmltree::Document::parse(&std::fs::read_to_string(ev.join("trajectory.svg")).unwrap())
        .unwrap();

    let r = eliot(&["eval", "--gt", s(&gt), "--pred", s(&out.join("00.txt"))]);
    assert_eq!(r.status.code(), Some(1), "length mismatch");
    assert!(String::from_utf8_lossy(&r.stderr).contains("frames"));
}
