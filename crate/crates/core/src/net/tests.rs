use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;

use super::head::pose_head;
use super::*;
use crate::cloud_io::{synth_scene, PointCloud, SceneSpec};
use crate::diff::{gradient_check, Graph, Mode, ParamStore, Tensor};
use crate::geometry::knn;
use crate::rigid::DualQuaternion;
use crate::rng;

fn small_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        plane_points: 60,
        boxes: 1,
        box_points: 40,
        scatter_points: 20,
        seed,
        ..Default::default()
    }
}

fn random_cloud(n: usize, seed: u64, spread: f64) -> PointCloud {
    let mut r = rng::seeded(seed);
    let pos = (0..n)
        .map(|_| {
            Vector3::new(
                r.random_range(-spread..spread),
                r.random_range(-spread..spread),
                r.random_range(-spread..spread),
            )
        })
        .collect();
    let feats = (0..n).map(|_| r.random::<f64>()).collect();
    PointCloud::new(pos, feats, 1).unwrap()
}

#[test]
fn positional_encoding_examples() {
    let v = positional_encode(&Vector3::zeros(), 1, false, 1.0).unwrap();
    assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let v = positional_encode(&Vector3::new(PI / 2.0, 0.0, 0.0), 1, false, 1.0).unwrap();
    assert_eq!(&v[..2], &[PI / 2.0, 1.0]);
    assert!(v[2].abs() < 1e-15);
    assert_eq!(
        positional_encode(&Vector3::new(1.0, 2.0, 3.0), 10, true, 5.0)
            .unwrap()
            .len(),
        63
    );
    // Normalization maps the bound to π.
    let v = positional_encode(&Vector3::new(8.0, -4.0, 0.0), 2, true, 16.0).unwrap();
    assert!((v[0] - PI / 2.0).abs() < 1e-15 && (v[5] + PI / 4.0).abs() < 1e-15);
    assert!((v[3] - (PI).sin()).abs() < 1e-15);
    assert!(positional_encode(&Vector3::zeros(), 0, false, 1.0).is_err());
    assert!(positional_encode(&Vector3::zeros(), 3, true, 0.0).is_err());
}

#[test]
fn encoding_width_law() {
    for bands in [1, 4, 10, 64] {
        for method in [PeMethod::Fourier, PeMethod::Gauss] {
            let mut cfg = NetConfig::tiny();
            cfg.pe.bands = bands;
            cfg.pe.method = method;
            let store: ParamStore<f64> = init_network(&cfg, 1).unwrap();
            let kp = vec![vec![Vector3::new(0.5, -1.0, 2.0); 3]];
            let t = encoding::encode_keypoints(&kp, &cfg, &store).unwrap();
            assert_eq!(t.shape(), &[3, 3 * (2 * bands + 1)]);
            assert_eq!(cfg.pe_width(), 3 * (2 * bands + 1));
        }
    }
}

#[test]
fn config_validation() {
    assert!(NetConfig::table_one().validate().is_ok());
    assert!(NetConfig::tiny().validate().is_ok());
    let mut c = NetConfig::tiny();
    c.enc.heads = 3;
    assert!(matches!(c.validate(), Err(crate::Error::Config(m)) if m.contains("heads")));
    let mut c = NetConfig::tiny();
    c.sa.radii = vec![2.0, 1.0];
    assert!(c.validate().is_err());
    let mut c = NetConfig::tiny();
    c.dec.queries = 10;
    assert!(c.validate().is_err());
    let mut c = NetConfig::tiny();
    c.head.mlp_fc = vec![64, 32, 7];
    assert!(c.validate().is_err());
    let text = toml::to_string(&NetConfig::table_one()).unwrap();
    let back: NetConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, NetConfig::table_one());
}

#[test]
fn set_abstraction_of_identical_points() {
    let cfg = NetConfig::tiny();
    let cloud = PointCloud::new(vec![Vector3::zeros(); 80], vec![0.3; 80], 1).unwrap();
    let store: ParamStore<f64> = init_network(&cfg, 2).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let fs = set_abstraction(&cloud, &cfg, &store, mode).unwrap();
        assert_eq!(fs.len(), cfg.n_key);
        assert!(fs.keypoints.iter().all(|k| *k == Vector3::zeros()));
        for i in 1..fs.len() {
            assert_eq!(fs.row(i), fs.row(0));
        }
    }
}

#[test]
fn set_abstraction_rejects_small_clouds() {
    let cfg = NetConfig::tiny();
    let store: ParamStore<f32> = init_network(&cfg, 0).unwrap();
    let cloud = random_cloud(cfg.n_key - 1, 1, 3.0);
    assert!(matches!(
        set_abstraction(&cloud, &cfg, &store, Mode::Eval),
        Err(crate::Error::InvalidArgument(_))
    ));
}

#[test]
fn table_one_shapes() {
    let cfg = NetConfig::table_one();
    assert_eq!(cfg.feature_width(), 64);
    assert_eq!(cfg.token_width(), 256);
    assert_eq!(cfg.pe_width(), 387);
    let store: ParamStore<f32> = init_network(&cfg, 0).unwrap();
    let cloud = random_cloud(1024, 3, 6.0);
    let fs = set_abstraction(&cloud, &cfg, &store, Mode::Eval).unwrap();
    assert_eq!(fs.keypoints.len(), 1024);
    assert_eq!((fs.features.len() / fs.width, fs.width), (1024, 64));
    let tokens = irfe_tokens(&fs, &fs, &cfg, &store).unwrap();
    assert_eq!(tokens.len(), 1024 * 256);
}

#[test]
fn set_abstraction_permutation_replay() {
    let mut cfg = NetConfig::tiny();
    cfg.sa.max_samples = vec![64, 64];
    cfg.sa.radii = vec![0.4, 0.8];
    let cloud = random_cloud(200, 4, 5.0);
    let store: ParamStore<f64> = init_network(&cfg, 5).unwrap();
    let base_prep = prepare_cloud(&cloud, &cfg).unwrap();
    let sel = crate::geometry::fps(cloud.positions(), cfg.n_key, 0)
        .unwrap()
        .indices;
    let mut free: Vec<usize> = (0..cloud.len()).filter(|i| !sel.contains(i)).collect();
    let targets = free.clone();
    let mut r = rng::seeded(9);
    rand::seq::SliceRandom::shuffle(free.as_mut_slice(), &mut r);
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    for (slot, src) in targets.iter().zip(&free) {
        order[*slot] = *src;
    }
    let permuted = cloud.select(&order);
    let prep = prepare_cloud(&permuted, &cfg).unwrap();
    assert_eq!(prep.keypoints, base_prep.keypoints);
    let a = set_abstraction(&cloud, &cfg, &store, Mode::Eval).unwrap();
    let b = set_abstraction(&permuted, &cfg, &store, Mode::Eval).unwrap();
    // Every ball must be under-full for the replay to be exact.
    for (r, &radius) in cfg.sa.radii.iter().enumerate() {
        let t = crate::geometry::ball_query(&a.keypoints, cloud.positions(), radius, 200).unwrap();
        assert!((0..t.rows()).all(|i| t.count(i) < cfg.sa.max_samples[r]));
    }
    for (x, y) in a.features.iter().zip(&b.features) {
        assert!((x - y).abs() <= 1e-6);
    }
}

fn feature_sets(cfg: &NetConfig, store: &ParamStore<f64>) -> (FeatureSet, FeatureSet) {
    let p = synth_scene(&small_scene(1)).unwrap();
    let q = synth_scene(&small_scene(2)).unwrap();
    (
        set_abstraction(&p, cfg, store, Mode::Eval).unwrap(),
        set_abstraction(&q, cfg, store, Mode::Eval).unwrap(),
    )
}

#[test]
fn irfe_examples() {
    let cfg = NetConfig::tiny();
    let c = cfg.feature_width();
    let mut store: ParamStore<f64> = init_network(&cfg, 6).unwrap();
    let (fp, fq) = feature_sets(&cfg, &store);
    let t = irfe_tokens(&fp, &fq, &cfg, &store).unwrap();
    assert_eq!(t.len(), cfg.n_key * 4 * c);

    for name in ["irfe.proj_p.weight", "irfe.proj_q.weight"] {
        store
            .get_mut(name)
            .unwrap()
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let t = irfe_tokens(&fp, &fq, &cfg, &store).unwrap();
    for i in 0..cfg.n_key {
        let row = &t[i * 4 * c..(i + 1) * 4 * c];
        assert!(row[..2 * c].iter().all(|&v| v == 0.0));
        assert_eq!(&row[2 * c..3 * c], fp.row(i));
        assert_eq!(&row[3 * c..], fq.row(i));
    }

    let mut shared: ParamStore<f64> = init_network(&cfg, 7).unwrap();
    for part in ["weight", "bias"] {
        let v = shared
            .get(&format!("irfe.proj_p.{part}"))
            .unwrap()
            .values
            .clone();
        shared
            .get_mut(&format!("irfe.proj_q.{part}"))
            .unwrap()
            .values = v;
    }
    let t = irfe_tokens(&fp, &fp, &cfg, &shared).unwrap();
    for i in 0..cfg.n_key {
        let row = &t[i * 4 * c..(i + 1) * 4 * c];
        assert_eq!(&row[..c], &row[c..2 * c]);
    }

    let short = FeatureSet {
        keypoints: fq.keypoints[..10].to_vec(),
        features: fq.features[..10 * c].to_vec(),
        width: c,
    };
    assert!(matches!(
        irfe_tokens(&fp, &short, &cfg, &store),
        Err(crate::Error::InvalidArgument(_))
    ));
}

#[test]
fn knn_flow_examples() {
    let mut cfg = NetConfig::tiny();
    cfg.flow.method = FlowMethod::Knn;
    let c = cfg.feature_width();
    let store: ParamStore<f64> = init_network(&cfg, 8).unwrap();
    let (fp, fq) = feature_sets(&cfg, &store);

    let (_, disp) = knn_groups(&fp.keypoints, &fp.keypoints, 1).unwrap();
    assert!(disp.iter().all(|&d| d == 0.0));

    let (table, _) = knn_groups(&fp.keypoints, &fq.keypoints, cfg.flow.n_group).unwrap();
    for (i, x) in fp.keypoints.iter().enumerate() {
        let mut idx: Vec<usize> = (0..fq.len()).collect();
        idx.sort_by(|&a, &b| {
            (fq.keypoints[a] - x)
                .norm_squared()
                .total_cmp(&(fq.keypoints[b] - x).norm_squared())
                .then(a.cmp(&b))
        });
        assert_eq!(table.row(i), &idx[..cfg.flow.n_group]);
    }
    assert_eq!(
        table,
        knn(&fp.keypoints, &fq.keypoints, cfg.flow.n_group).unwrap()
    );

    let t = knn_flow_embed(&fp, &fq, &cfg, &store, Mode::Eval).unwrap();
    assert_eq!(t.len(), cfg.n_key * 4 * c);
}

fn prepared_pairs(cfg: &NetConfig, n: usize) -> Vec<PreparedPair> {
    let samples = synth_pairs(n, &small_scene(0), 0.3, 0.1, 11).unwrap();
    samples
        .iter()
        .map(|s| prepare_pair(&s.p, &s.q, cfg).unwrap())
        .collect()
}

#[test]
fn flow_methods_are_interchangeable() {
    let pairs = prepared_pairs(&NetConfig::tiny(), 2);
    let refs: Vec<_> = pairs.iter().collect();
    let mut shapes = Vec::new();
    for method in [FlowMethod::Irfe, FlowMethod::Knn] {
        let mut cfg = NetConfig::tiny();
        cfg.flow.method = method;
        let store: ParamStore<f32> = init_network(&cfg, 0).unwrap();
        let mut g = Graph::new(Mode::Train);
        let out = forward_batch(&mut g, &store, &cfg, &refs).unwrap();
        shapes.push((
            g.shape(out.tokens).to_vec(),
            g.shape(out.decoded).to_vec(),
            g.shape(out.raw).to_vec(),
        ));
    }
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0].0, vec![2 * 64, 128]);
    assert_eq!(shapes[0].2, vec![2, 8]);
}

#[test]
fn eval_forward_is_deterministic_and_unit() {
    for method in [FlowMethod::Irfe, FlowMethod::Knn] {
        let mut cfg = NetConfig::tiny();
        cfg.flow.method = method;
        cfg.enc.dropout = 0.1;
        cfg.dec.dropout = 0.1;
        let model = Eliot::<f32>::new(cfg, 4).unwrap();
        let p = synth_scene(&small_scene(3)).unwrap();
        let q = synth_scene(&small_scene(4)).unwrap();
        let a = model.predict(&p, &q).unwrap();
        let b = model.predict(&p, &q).unwrap();
        assert_eq!(a.raw.map(f64::to_bits), b.raw.map(f64::to_bits));
        assert_eq!(a.attention, b.attention);
        assert!(a.dq.is_unit());
        assert!(a.pose.orthonormality_residual() < 1e-9);
        assert_eq!(a.attention.len(), 2);
        for m in &a.attention {
            for qi in 0..m.queries {
                let row = m.row(qi);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identical_tokens_give_identical_decoder_rows() {
    let cfg = NetConfig::tiny();
    let store: ParamStore<f64> = init_network(&cfg, 12).unwrap();
    let cloud = PointCloud::new(vec![Vector3::new(1.0, 2.0, 0.5); 70], vec![0.4; 70], 1).unwrap();
    let pair = prepare_pair(&cloud, &cloud, &cfg).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let out = forward_batch(&mut g, &store, &cfg, &[&pair]).unwrap();
    let d = g.value(out.decoded);
    for i in 1..cfg.n_key {
        assert_eq!(d.row(i), d.row(0));
    }
}

#[test]
fn head_examples() {
    let cfg = NetConfig::tiny();
    let mut store: ParamStore<f64> = init_network(&cfg, 13).unwrap();
    let mut r = rng::seeded(3);
    let k = cfg.n_key;
    let data: Vec<f64> = (0..k * cfg.dec.dim)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let run = |store: &ParamStore<f64>, rows: &[f64]| {
        let mut g = Graph::new(Mode::Eval);
        let x = g
            .constant(
                Tensor::new(vec![rows.len() / cfg.dec.dim, cfg.dec.dim], rows.to_vec()).unwrap(),
            )
            .unwrap();
        let v = pose_head(&mut g, store, &cfg, x, 1).unwrap();
        g.value(v).to_f64()
    };
    let base = run(&store, &data);
    assert_eq!(base.len(), 8);
    let mut dup = data.clone();
    dup.extend_from_slice(&data[5 * cfg.dec.dim..6 * cfg.dec.dim]);
    assert_eq!(run(&store, &dup), base);

    let last = format!("head.fc{}", cfg.head.mlp_fc.len() - 2);
    store
        .get_mut(&format!("{last}.weight"))
        .unwrap()
        .values
        .iter_mut()
        .for_each(|v| *v = 0.0);
    assert_eq!(
        run(&store, &data),
        DualQuaternion::IDENTITY.to_array().to_vec()
    );
    let model = Eliot {
        cfg: cfg.clone(),
        params: store,
    };
    let p = synth_scene(&small_scene(5)).unwrap();
    let pred = model.predict(&p, &p).unwrap();
    assert!(
        (pred.pose.matrix() - nalgebra::Matrix4::identity())
            .abs()
            .max()
            < 1e-15
    );
}

#[test]
fn init_is_seeded() {
    let cfg = NetConfig::tiny();
    let a: ParamStore<f32> = init_network(&cfg, 1).unwrap();
    let b: ParamStore<f32> = init_network(&cfg, 1).unwrap();
    let c: ParamStore<f32> = init_network(&cfg, 2).unwrap();
    assert_eq!(a.arrays(), b.arrays());
    assert_ne!(a.arrays(), c.arrays());
}

/// Gradient-check configuration: the tiny network with most entries subsampled.
pub(crate) fn end_to_end_gradient_errors(method: FlowMethod) -> Vec<(String, f64)> {
    let mut cfg = NetConfig::tiny();
    cfg.flow.method = method;
    let store: ParamStore<f64> = init_network(&cfg, 21).unwrap();
    let samples = synth_pairs(2, &small_scene(0), 0.3, 0.2, 5).unwrap();
    let pairs: Vec<_> = samples
        .iter()
        .map(|s| prepare_pair(&s.p, &s.q, &cfg).unwrap())
        .collect();
    let labels: Vec<_> = samples
        .iter()
        .map(|s| s.label.to_dual_quaternion())
        .collect();
    let report = gradient_check(&store, Mode::Train, 1e-5, 3, |g, s| {
        let refs: Vec<_> = pairs.iter().collect();
        let out = forward_batch(g, s, &cfg, &refs)?;
        Ok(loss_on_graph(g, out.raw, &labels, cfg.lambda_dual)?.total)
    })
    .unwrap();
    report.into_iter().map(|r| (r.name, r.rel_error)).collect()
}

#[test]
fn end_to_end_gradient_check() {
    let errs = end_to_end_gradient_errors(FlowMethod::Irfe);
    let worst = errs
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!(
        worst.1 < 1e-3,
        "worst array {} with relative error {}",
        worst.0,
        worst.1
    );
}

#[test]
fn checkpoint_reload_reproduces_eval_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::tiny();
    let samples = synth_pairs(2, &small_scene(0), 0.3, 0.1, 2).unwrap();
    let mut t = Trainer::<f32>::new(
        cfg.clone(),
        TrainConfig {
            batch_size: 2,
            lr: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    t.run_epoch(&samples).unwrap();
    let path = dir.path().join("m.toml");
    t.save(&path, &Default::default()).unwrap();
    let back = Trainer::<f32>::resume(cfg.clone(), t.train.clone(), &path).unwrap();
    let a = t.model().predict(&samples[0].p, &samples[0].q).unwrap();
    let b = back.model().predict(&samples[0].p, &samples[0].q).unwrap();
    assert_eq!(a.raw.map(f64::to_bits), b.raw.map(f64::to_bits));
    assert_eq!((back.step, back.epoch), (1, 1));

    let mut other = cfg;
    other.enc.dim = 16;
    other.dec.dim = 16;
    other.head.mlp_pn = vec![16, 64];
    assert!(matches!(
        Trainer::<f32>::resume(other, t.train.clone(), &path),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn resume_in_64_bit_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::tiny();
    let samples = synth_pairs(4, &small_scene(0), 0.3, 0.1, 3).unwrap();
    let train = TrainConfig {
        batch_size: 2,
        lr: 1e-3,
        augment_translation: 0.1,
        augment_rotation: 0.05,
        ..Default::default()
    };
    let mut a = Trainer::<f64>::new(cfg.clone(), train.clone()).unwrap();
    a.run_epoch(&samples).unwrap();
    let path = dir.path().join("r.toml");
    a.save(&path, &Default::default()).unwrap();
    let next_a = a.run_epoch(&samples).unwrap();
    let mut b = Trainer::<f64>::resume(cfg, train, &path).unwrap();
    let next_b = b.run_epoch(&samples).unwrap();
    assert_eq!(next_a, next_b);
}

#[test]
fn epoch_order_is_seeded_permutation() {
    let t = Trainer::<f32>::new(NetConfig::tiny(), TrainConfig::default()).unwrap();
    let a = t.epoch_order(10, 3);
    assert_eq!(a, t.epoch_order(10, 3));
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..10).collect::<Vec<_>>());
    let cos = TrainConfig {
        epochs: 11,
        lr: 1e-3,
        lr_min: 1e-5,
        lr_schedule: LrSchedule::Cosine,
        ..Default::default()
    };
    assert!((cos.lr_at(0) - 1e-3).abs() < 1e-15 && (cos.lr_at(10) - 1e-5).abs() < 1e-15);
    assert!((cos.lr_at(5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
}
