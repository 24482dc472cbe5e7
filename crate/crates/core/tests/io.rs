mod common;

use std::path::Path;

use lingsplat::io::{self, LocalizationRecord, Manifest, Tensor, TensorData};
use lingsplat::localization::{LocalizationResult, QueryEmbedding};
use lingsplat::quantizer::Codebook;
use lingsplat::scene::Camera;
use lingsplat::semantics::Decoder;
use lingsplat::synthetic;
use lingsplat::Error;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const P: &str = "mem";

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(0usize..4, 0..=4), 0u8..3).prop_flat_map(|(dims, code)| {
        let n: usize = dims.iter().product();
        let labels = dims.iter().enumerate().map(|(i, _)| format!("ax{i}")).collect::<Vec<_>>();
        let data = match code {
            0 => prop::collection::vec(-1e6f32..1e6, n).prop_map(TensorData::F32).boxed(),
            1 => prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32).boxed(),
            _ => prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
        };
        data.prop_map(move |d| Tensor::new(dims.clone(), labels.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn tensor_round_trip(t in tensor_strategy()) {
        let bytes = t.to_bytes();
        prop_assert_eq!(Tensor::from_bytes(&bytes, Path::new(P)).unwrap(), t);
    }

    #[test]
    fn tensor_truncation_is_rejected(t in tensor_strategy(), cut in 1usize..64) {
        let bytes = t.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Tensor::from_bytes(&bytes[..keep], Path::new(P)).is_err());
    }

    #[test]
    fn scene_round_trip(seed in any::<u64>(), n in 0usize..12, fdim in 1usize..5, frames in 1usize..4, bases in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = common::random_scene(&mut rng, n, fdim, frames, bases);
        scene.codebook_ref = "codebook.lgcb".into();
        let bytes = io::scene_to_bytes(&scene).unwrap();
        prop_assert_eq!(io::scene_from_bytes(&bytes, Path::new(P)).unwrap(), scene);
    }

    #[test]
    fn cameras_round_trip(fx in 10.0f64..500.0, cx in 0.0f64..64.0, axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.0f64..3.0, tr in prop::array::uniform3(-5.0f64..5.0), w in 1usize..200, h in 1usize..200) {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::new(axis[0] + 2.0, axis[1], axis[2])), angle);
        let cams = vec![Camera::new(fx, fx * 1.1, cx, cx / 2.0, w, h).with_pose(*r.matrix(), tr), Camera::new(fx, fx, 1.0, 2.0, w, h)];
        let text = io::cameras_to_string(&cams);
        prop_assert_eq!(io::cameras_from_str(&text, Path::new(P)).unwrap(), cams);
    }

    #[test]
    fn query_round_trip(v in prop::collection::vec(-1.0f64..1.0, 1..32), label in "[a-z_]{0,12}") {
        prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
        let q = QueryEmbedding::new(label, v).unwrap();
        let back = io::query_from_bytes(&io::query_to_bytes(&q).unwrap(), Path::new(P)).unwrap();
        prop_assert_eq!(&back.label, &q.label);
        for (a, b) in back.vector.iter().zip(&q.vector) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

fn sample_scene() -> lingsplat::scene::GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    common::random_scene(&mut rng, 7, 3, 2, 2)
}

#[test]
fn containers_reject_bad_magic() {
    let mut bytes = io::scene_to_bytes(&sample_scene()).unwrap();
    bytes[0] = b'X';
    assert!(matches!(io::scene_from_bytes(&bytes, Path::new(P)), Err(Error::Format { .. })));
    let dec = io::decoder_to_bytes(&Decoder::random(3, 4, 2, 1)).unwrap();
    assert!(io::scene_from_bytes(&dec, Path::new(P)).is_err());
    let mut t = Tensor::f32(&[2], &["x"], vec![1.0, 2.0]).unwrap().to_bytes();
    t[3] = b'0';
    assert!(Tensor::from_bytes(&t, Path::new(P)).is_err());
    let q = QueryEmbedding::new("q", vec![1.0]).unwrap();
    let mut qb = io::query_to_bytes(&q).unwrap();
    qb[0] = 0;
    assert!(io::query_from_bytes(&qb, Path::new(P)).is_err());
}

#[test]
fn containers_reject_trailing_bytes() {
    let mut t = Tensor::i32(&[2, 2], &["y", "x"], vec![1, 2, 3, 4]).unwrap().to_bytes();
    t.push(0);
    assert!(Tensor::from_bytes(&t, Path::new(P)).is_err());
    let mut s = io::scene_to_bytes(&sample_scene()).unwrap();
    s.extend_from_slice(&0f32.to_le_bytes());
    assert!(io::scene_from_bytes(&s, Path::new(P)).is_err());
    let book = Codebook::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut b = io::codebook_to_bytes(&book).unwrap();
    b.extend_from_slice(&[0, 0, 0, 0]);
    assert!(io::codebook_from_bytes(&b, Path::new(P)).is_err());
    let mut qb = io::query_to_bytes(&QueryEmbedding::new("q", vec![1.0, 2.0]).unwrap()).unwrap();
    qb.push(7);
    assert!(io::query_from_bytes(&qb, Path::new(P)).is_err());
}

#[test]
fn containers_reject_truncation() {
    let s = io::scene_to_bytes(&sample_scene()).unwrap();
    for cut in [1, 4, s.len() / 2, s.len() - 1] {
        assert!(io::scene_from_bytes(&s[..s.len() - cut], Path::new(P)).is_err(), "cut {cut}");
    }
    let d = io::decoder_to_bytes(&Decoder::random(3, 4, 2, 1)).unwrap();
    assert!(io::decoder_from_bytes(&d[..d.len() - 4], Path::new(P)).is_err());
}

#[test]
fn containers_reject_other_schema_versions() {
    let s = io::scene_to_bytes(&sample_scene()).unwrap();
    let mut v = s.clone();
    v[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(io::scene_from_bytes(&v, Path::new(P)), Err(Error::SchemaVersion { found: 2, expected: 1 })));
    let key = b"\"schema_version\":1";
    let at = s.windows(key.len()).position(|w| w == key).unwrap();
    let mut v = s.clone();
    v[at + 17] = b'9';
    assert!(matches!(io::scene_from_bytes(&v, Path::new(P)), Err(Error::SchemaVersion { found: 9, .. })));
    let cams = io::cameras_to_string(&[common::camera(8)]).replace("lingsplat-cameras 1", "lingsplat-cameras 2");
    assert!(matches!(io::cameras_from_str(&cams, Path::new(P)), Err(Error::SchemaVersion { found: 2, .. })));
}

#[test]
fn camera_file_rejects_invalid_extrinsics() {
    let mut cam = common::camera(8);
    cam.world_to_camera[0][0] = 2.0;
    let text = io::cameras_to_string(&[cam]);
    assert!(io::cameras_from_str(&text, Path::new(P)).is_err());
}

#[test]
fn synthetic_manifest_loads_and_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic::generate(&common::small_spec(4)).unwrap();
    let path = io::write_synthetic(&ds, dir.path(), serde_json::Value::Null).unwrap();
    let loaded = io::Dataset::load(&path).unwrap();
    assert_eq!(loaded.cameras, ds.world.cameras);
    assert_eq!(loaded.supervision.frames.len(), 3);
    assert_eq!(loaded.reference_scene.as_ref().unwrap(), &ds.world.scene);
    assert_eq!(loaded.queries.len(), ds.world.spec.clusters);

    let mut m = Manifest::load(&path).unwrap();
    m.width += 1;
    m.save(&path).unwrap();
    assert!(io::Dataset::load(&path).is_err());

    let mut v: serde_json::Value = io::read_json(&path).unwrap();
    v["schema_version"] = 5.into();
    io::write_json(&path, &v).unwrap();
    assert!(matches!(Manifest::load(&path), Err(Error::SchemaVersion { found: 5, .. })));
}

#[test]
fn localization_record_round_trip_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loc.json");
    let result = LocalizationResult {
        label: "cluster_0".into(),
        tau: 0.9,
        scores: vec![0.95, 0.1, 0.99],
        selected: vec![0, 2],
        log: Vec::new(),
    };
    let rec = LocalizationRecord::new(&result, 5, 2, serde_json::json!({"tau": 0.9}));
    io::write_json(&path, &rec).unwrap();
    assert_eq!(LocalizationRecord::load(&path).unwrap(), rec);

    let mut bad = rec.clone();
    bad.count = 3;
    io::write_json(&path, &bad).unwrap();
    assert!(LocalizationRecord::load(&path).is_err());
    let mut v = serde_json::to_value(&rec).unwrap();
    v["schema_version"] = 0.into();
    io::write_json(&path, &v).unwrap();
    assert!(matches!(LocalizationRecord::load(&path), Err(Error::SchemaVersion { .. })));
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sample_scene();
    io::write_scene(&dir.path().join("a/scene.lgsc"), &scene).unwrap();
    assert_eq!(io::read_scene(&dir.path().join("a/scene.lgsc")).unwrap(), scene);
    let frames = vec![vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.2], vec![1.0; 6]];
    io::write_png_dir(&dir.path().join("png"), &frames, 2, 1).unwrap();
    let (w, h, back) = io::read_video(&dir.path().join("png")).unwrap();
    assert_eq!((w, h), (2, 1));
    for (a, b) in back.iter().flatten().zip(frames.iter().flatten()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    io::write_frame_tensor(&dir.path().join("v.lgt"), &frames, 2, 1, 3).unwrap();
    let (_, _, back) = io::read_video(&dir.path().join("v.lgt")).unwrap();
    for (a, b) in back.iter().flatten().zip(frames.iter().flatten()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}
