use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use eliot_core::cloud_io::{load_kitti_bin, save_kitti_bin, synth_sequence, PointCloud};
use eliot_core::diff::{load_checkpoint, Real};
use eliot_core::eval::{
    accumulate, apply_calibration, evaluate, format_kitti_poses, load_kitti_poses,
    load_velo_to_cam, EvalReport, Trajectory,
};
use eliot_core::icp::register;
use eliot_core::net::{
    prepare_pair, synth_pairs, Eliot, NetConfig, Prediction, TrainSample, Trainer,
};
use eliot_core::plots::emit_plots;
use eliot_core::rigid::PoseMatrix;

use crate::config::{Precision, RunConfig, SynthMode};
use crate::dataset::{
    calib_path, data_root, frame_name, labels_path, load_scans, poses_path, preprocess, scan_files,
    training_samples, velodyne_dir,
};
use crate::manifest::{Manifest, OutDir};

fn write_file(path: PathBuf, bytes: impl AsRef<[u8]>, manifest: &mut Manifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| eliot_core::Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| eliot_core::Error::io(&path, e))?;
    manifest.outputs.push(path);
    Ok(())
}

fn save_scan(cloud: &PointCloud, path: PathBuf, manifest: &mut Manifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| eliot_core::Error::io(dir, e))?;
    }
    save_kitti_bin(cloud, &path)?;
    manifest.outputs.push(path);
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let out = OutDir::claim(out, force)?;
    let mut m = Manifest::new("synth");
    let s = &cfg.synth;
    match s.mode {
        SynthMode::Pairs => {
            if s.pairs == 0 {
                anyhow::bail!(crate::usage("`synth.pairs` must be at least 1"));
            }
            let samples = synth_pairs(
                s.pairs,
                &s.scene,
                s.max_translation,
                s.max_rotation_deg.to_radians(),
                cfg.seed,
            )?;
            for (i, sample) in samples.iter().enumerate() {
                save_scan(
                    &sample.p,
                    out.join("velodyne").join(frame_name(2 * i)),
                    &mut m,
                )?;
                save_scan(
                    &sample.q,
                    out.join("velodyne").join(frame_name(2 * i + 1)),
                    &mut m,
                )?;
            }
            let labels = Trajectory::new(samples.iter().map(|s| s.label).collect())?;
            write_file(labels_path(out.path()), format_kitti_poses(&labels), &mut m)?;
            println!("wrote {} pairs to {}", samples.len(), out.path().display());
        }
        SynthMode::Sequence => {
            let (clouds, poses) = synth_sequence(&s.sequence)?;
            let id = &s.sequence_id;
            for (t, c) in clouds.iter().enumerate() {
                save_scan(c, velodyne_dir(out.path(), id).join(frame_name(t)), &mut m)?;
            }
            write_file(
                poses_path(out.path(), id),
                format_kitti_poses(&Trajectory::new(poses)?),
                &mut m,
            )?;
            println!(
                "wrote sequence {id} with {} frames to {}",
                clouds.len(),
                out.path().display()
            );
        }
    }
    m.write(&out, Some(cfg))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, force: bool, resume: Option<&Path>) -> Result<()> {
    if !cfg.method.is_learned() {
        anyhow::bail!(crate::usage(format!(
            "method `{}` has nothing to train",
            cfg.method.name()
        )));
    }
    let samples = training_samples(&cfg.data)?;
    let out = OutDir::claim(out, force)?;
    let mut m = Manifest::new("train");
    m.input("data", data_root(&cfg.data)?);
    if let Some(r) = resume {
        m.input("resume", r);
    }
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, &samples, &out, resume, &mut m)?,
        Precision::F64 => train_as::<f64>(cfg, &samples, &out, resume, &mut m)?,
    }
    m.write(&out, Some(cfg))?;
    Ok(())
}

fn train_as<T: Real>(
    cfg: &RunConfig,
    samples: &[TrainSample],
    out: &OutDir,
    resume: Option<&Path>,
    m: &mut Manifest,
) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => Trainer::<T>::resume(cfg.net.clone(), cfg.train.clone(), path)?,
        None => Trainer::<T>::new(cfg.net.clone(), cfg.train.clone())?,
    };
    let extra = BTreeMap::from([
        ("method".to_string(), cfg.method.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    let mut log = String::from("step,epoch,lr,total,real,dual\n");
    let mut last = None;
    while trainer.epoch < cfg.train.epochs {
        let epoch = trainer.epoch;
        let lr = cfg.train.lr_at(epoch);
        for s in trainer.run_epoch(samples)? {
            writeln!(
                log,
                "{},{},{:?},{:?},{:?},{:?}",
                s.step, s.epoch, lr, s.total, s.real, s.dual
            )
            .unwrap();
            last = Some(s);
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.train.epochs {
            let path = out.join(format!("ckpt_epoch_{:04}.toml", epoch + 1));
            trainer.save(&path, &extra)?;
            m.outputs.push(path.with_extension("bin"));
            m.outputs.push(path);
        }
    }
    write_file(out.join("loss.csv"), log, m)?;
    let model = out.join("model.toml");
    trainer.save(&model, &extra)?;
    m.outputs.push(model.with_extension("bin"));
    m.outputs.push(model.clone());
    if let Some(s) = last {
        m.notes
            .insert("final_loss".into(), format!("{:?}", s.total));
        println!(
            "trained {} steps, final loss {:.6}; checkpoint {}",
            trainer.step,
            s.total,
            model.display()
        );
    }
    Ok(())
}

/// A restored network in either precision.
pub enum Model {
    F32(Eliot<f32>),
    F64(Eliot<f64>),
}

impl Model {
    pub fn config(&self) -> &NetConfig {
        match self {
            Model::F32(e) => &e.cfg,
            Model::F64(e) => &e.cfg,
        }
    }

    pub fn predict(&self, p: &PointCloud, q: &PointCloud) -> eliot_core::Result<Prediction> {
        match self {
            Model::F32(e) => e.predict(p, q),
            Model::F64(e) => e.predict(p, q),
        }
    }
}

fn restore<T: Real>(cfg: &RunConfig, path: &Path) -> Result<Eliot<T>> {
    let ck = load_checkpoint::<T>(path)?;
    let net: NetConfig = match ck.meta.get("net_config") {
        Some(text) => toml::from_str(text)
            .map_err(|e| eliot_core::Error::Config(format!("checkpoint network config: {e}")))?,
        None => cfg.net.clone(),
    };
    if let Some(flow) = cfg.method.flow() {
        if flow != net.flow.method {
            anyhow::bail!(eliot_core::Error::Config(format!(
                "checkpoint {} uses flow embedding {:?}, method `{}` needs {:?}",
                path.display(),
                net.flow.method,
                cfg.method.name(),
                flow
            )));
        }
    }
    Ok(Eliot::from_params(net, ck.params)?)
}

pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint.ok_or_else(|| {
        crate::usage(format!("method `{}` needs --checkpoint", cfg.method.name()))
    })?;
    Ok(match cfg.precision {
        Precision::F32 => Model::F32(restore(cfg, path)?),
        Precision::F64 => Model::F64(restore(cfg, path)?),
    })
}

/// Per-pair estimate and its bookkeeping row.
struct PairEstimate {
    transform: PoseMatrix,
    seconds: f64,
    iterations: usize,
    converged: bool,
}

fn estimate_sequence(
    cfg: &RunConfig,
    model: Option<&Model>,
    scans: &[PointCloud],
) -> Result<Vec<PairEstimate>> {
    let params = cfg.icp.params();
    let mut out: Vec<PairEstimate> = Vec::with_capacity(scans.len().saturating_sub(1));
    for t in 0..scans.len().saturating_sub(1) {
        let start = Instant::now();
        let est = match (cfg.method.icp(), model) {
            (Some(icp), _) => {
                let init = match out.last() {
                    Some(prev) if cfg.icp.warm_start => prev.transform,
                    _ => PoseMatrix::identity(),
                };
                let r = register(icp, &scans[t + 1], &scans[t], &init, &params)
                    .with_context(|| format!("registering frame {} onto frame {t}", t + 1))?;
                (r.transform, r.iterations, r.converged)
            }
            (None, Some(model)) => (model.predict(&scans[t], &scans[t + 1])?.pose, 1, true),
            (None, None) => unreachable!("learned methods load a model first"),
        };
        out.push(PairEstimate {
            transform: est.0,
            seconds: start.elapsed().as_secs_f64(),
            iterations: est.1,
            converged: est.2,
        });
    }
    Ok(out)
}

pub fn odom(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    checkpoint: Option<&Path>,
    calib: Option<&Path>,
) -> Result<()> {
    let model = if cfg.method.is_learned() {
        Some(load_model(cfg, checkpoint)?)
    } else {
        None
    };
    let root = data_root(&cfg.data)?.to_path_buf();
    let out = OutDir::claim(out, force)?;
    let mut m = Manifest::new("odom");
    m.input("data", &root);
    if let Some(c) = checkpoint {
        m.input("checkpoint", c);
    }
    if let Some(c) = calib {
        m.input("calib", c);
    }
    for seq in &cfg.data.eval_sequences {
        let scans = load_scans(&scan_files(&velodyne_dir(&root, seq))?, &cfg.data)
            .with_context(|| format!("sequence {seq}"))?;
        let est = estimate_sequence(cfg, model.as_ref(), &scans)
            .with_context(|| format!("sequence {seq}"))?;
        let rel: Vec<PoseMatrix> = est.iter().map(|e| e.transform).collect();
        let mut traj = accumulate(&rel)?;
        let tr = match calib {
            Some(c) => Some(load_velo_to_cam(c)?),
            None if cfg.data.use_calib => Some(load_velo_to_cam(calib_path(&root, seq))?),
            None => None,
        };
        if let Some(tr) = tr {
            traj = apply_calibration(&traj, &tr)?;
        }
        write_file(
            out.join(format!("{seq}.txt")),
            format_kitti_poses(&traj),
            &mut m,
        )?;
        let mut timing =
            String::from("pair,source_frame,target_frame,seconds,iterations,converged\n");
        for (t, e) in est.iter().enumerate() {
            writeln!(
                timing,
                "{t},{},{t},{:.6},{},{}",
                t + 1,
                e.seconds,
                e.iterations,
                e.converged
            )
            .unwrap();
        }
        write_file(out.join(format!("{seq}_timing.csv")), timing, &mut m)?;
        let unconverged = est.iter().filter(|e| !e.converged).count();
        if unconverged > 0 {
            m.notes
                .insert(format!("{seq}.unconverged_pairs"), unconverged.to_string());
        }
        println!(
            "sequence {seq}: {} frames, method {}",
            traj.len(),
            cfg.method.name()
        );
    }
    m.write(&out, Some(cfg))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"))
}

pub fn eval(
    cfg: &RunConfig,
    gt: &Path,
    pred: &Path,
    calib: Option<&Path>,
    out: Option<&Path>,
    force: bool,
) -> Result<EvalReport> {
    let g = load_kitti_poses(gt)?.with_frame_period(cfg.data.frame_period)?;
    let mut p = load_kitti_poses(pred)?.with_frame_period(cfg.data.frame_period)?;
    if let Some(c) = calib {
        p = apply_calibration(&p, &load_velo_to_cam(c)?)?;
    }
    let report = evaluate(&g, &p)?;
    if let Some(out) = out {
        let out = OutDir::claim(out, force)?;
        let mut m = Manifest::new("eval");
        m.input("gt", gt);
        m.input("pred", pred);
        if let Some(c) = calib {
            m.input("calib", c);
        }
        write_file(out.join("report.txt"), report.to_text(), &mut m)?;
        let files = emit_plots(Some(&g), &p, &report, out.path())?;
        m.outputs.extend(
            [
                Some(files.pred_csv),
                files.gt_csv,
                Some(files.svg),
                Some(files.length_csv),
                Some(files.speed_csv),
            ]
            .into_iter()
            .flatten(),
        );
        m.write(&out, Some(cfg))?;
    }
    println!("t_rel = {} %", fmt_opt(report.t_rel));
    println!("r_rel = {} deg/100m", fmt_opt(report.r_rel));
    println!("subsequences = {}", report.subsequences);
    Ok(report)
}

pub fn attn(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    checkpoint: Option<&Path>,
    source: &Path,
    target: &Path,
) -> Result<()> {
    if !cfg.method.is_learned() {
        anyhow::bail!(crate::usage(format!(
            "attention maps need a learned method, not `{}`",
            cfg.method.name()
        )));
    }
    let model = load_model(cfg, checkpoint)?;
    let p = preprocess(load_kitti_bin(source)?, &cfg.data)?;
    let q = preprocess(load_kitti_bin(target)?, &cfg.data)?;
    let pair = prepare_pair(&p, &q, model.config())?;
    let pred = model.predict(&p, &q)?;
    let out = OutDir::claim(out, force)?;
    let mut m = Manifest::new("attn");
    m.input("checkpoint", checkpoint.expect("load_model checked"));
    m.input("source", source);
    m.input("target", target);

    let mut kp = String::from("cloud,index,x,y,z\n");
    for (name, pts) in [("source", &pair.p.keypoints), ("target", &pair.q.keypoints)] {
        for (i, v) in pts.iter().enumerate() {
            writeln!(kp, "{name},{i},{:?},{:?},{:?}", v.x, v.y, v.z).unwrap();
        }
    }
    write_file(out.join("keypoints.csv"), kp, &mut m)?;

    let keys = pred.attention.first().map_or(0, |a| a.keys);
    let mut csv = String::from("layer,query");
    for k in 0..keys {
        write!(csv, ",w{k}").unwrap();
    }
    csv.push('\n');
    for map in &pred.attention {
        for qi in 0..map.queries {
            write!(csv, "{},{qi}", map.layer).unwrap();
            for w in map.row(qi) {
                write!(csv, ",{w:?}").unwrap();
            }
            csv.push('\n');
        }
    }
    write_file(out.join("attention.csv"), csv, &mut m)?;
    m.notes.insert(
        "queries".into(),
        "decoder queries built from target keypoints".into(),
    );
    m.notes
        .insert("keys".into(), "encoder tokens at source keypoints".into());
    m.write(&out, Some(cfg))?;
    println!(
        "wrote {} cross-attention maps of {} queries to {}",
        pred.attention.len(),
        pred.attention.first().map_or(0, |a| a.queries),
        out.path().display()
    );
    Ok(())
}
