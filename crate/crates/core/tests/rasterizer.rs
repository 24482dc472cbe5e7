mod common;

use lingsplat::raster::{self, Channels, RenderConfig, RenderOutput, SplatParams};
use lingsplat::scene::GaussianScene;
use lingsplat::synthetic;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_compositing(scene: &GaussianScene, out: &RenderOutput, params: &SplatParams) -> Result<(), TestCaseError> {
    let d = params.feature_dim;
    for p in 0..out.pixel_count() {
        let list = out.contributors_at(p);
        let total: f64 = list.iter().map(|c| c.weight).sum();
        prop_assert!((total - out.alpha[p]).abs() < 1e-6, "pixel {p}: {total} vs {}", out.alpha[p]);
        prop_assert!(out.alpha[p] <= 1.0 && out.alpha[p] >= 0.0);
        let mut color = [0.0f64; 3];
        let mut feature = vec![0.0f64; d];
        for c in list {
            let i = c.gaussian as usize;
            prop_assert!(i < scene.len());
            for k in 0..3 {
                color[k] += c.weight * params.colors[i][k];
            }
            for (f, v) in feature.iter_mut().zip(params.feature(i)) {
                *f += c.weight * v;
            }
        }
        prop_assert_eq!(&out.color[p * 3..p * 3 + 3], &color[..]);
        prop_assert_eq!(out.feature_at(p), &feature[..]);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn weights_sum_to_alpha_and_reproduce_channels(seed in any::<u64>(), n in 1usize..40, t in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, n, 3, 3, 2);
        let cam = common::camera(40);
        let cfg = RenderConfig::default();
        let out = raster::render(&scene, t, &cam, Channels::Both, &cfg).unwrap();
        prop_assert!(!out.contributors.is_empty());
        let posed = lingsplat::motion::pose_at(&scene, t).unwrap();
        check_compositing(&scene, &out, &SplatParams::from_posed(&scene, &posed))?;
    }

    #[test]
    fn frame_zero_equals_canonical_render(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, n, 2, 3, 3);
        let cam = common::camera(32);
        let cfg = RenderConfig::default();
        let posed = raster::render(&scene, 0, &cam, Channels::Both, &cfg).unwrap();
        let canon = raster::render_params(&SplatParams::canonical(&scene), &cam, &cfg, Channels::Both, None).unwrap();
        for (a, b) in posed.color.iter().zip(&canon.color).chain(posed.feature.iter().zip(&canon.feature)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn subset_render_composites_only_members(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, n, 2, 2, 2);
        let subset: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let out = raster::render_subset(&scene, 1, &common::camera(32), Channels::Color, &RenderConfig::default(), &subset).unwrap();
        prop_assert!(out.contributors.iter().all(|c| c.gaussian % 2 == 0));
    }
}

#[test]
fn synthetic_world_respects_compositing() {
    let world = synthetic::world(&common::small_spec(2)).unwrap();
    let cfg = RenderConfig::default();
    for (t, cam) in world.cameras.iter().enumerate() {
        let out = raster::render(&world.scene, t, cam, Channels::Both, &cfg).unwrap();
        let posed = lingsplat::motion::pose_at(&world.scene, t).unwrap();
        check_compositing(&world.scene, &out, &SplatParams::from_posed(&world.scene, &posed)).unwrap();
        assert!(out.alpha.iter().any(|&a| a > 0.9));
    }
}

#[test]
fn render_rejects_frames_out_of_range() {
    let world = synthetic::world(&common::small_spec(2)).unwrap();
    let err = raster::render(&world.scene, 3, &world.cameras[0], Channels::Color, &RenderConfig::default()).unwrap_err();
    assert!(matches!(err, lingsplat::Error::FrameOutOfRange { t: 3, frames: 3 }));
}
