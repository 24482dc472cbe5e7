mod common;

use lingsplat::raster::{self, Channels, RenderConfig};
use lingsplat::scene::GaussianScene;
use lingsplat::synthetic;
use lingsplat::training::{edit, EditConfig, EditMode};

fn touches(list: &[lingsplat::raster::Contributor], member: &[bool]) -> bool {
    list.iter().any(|c| member[c.gaussian as usize])
}

fn check_freeze(before: &GaussianScene, after: &GaussianScene, selected: &[usize], cams: &[lingsplat::scene::Camera]) {
    let mut member = vec![false; before.len()];
    for &i in selected {
        member[i] = true;
    }
    assert_eq!(before.motion, after.motion);
    assert_eq!(before.len(), after.len());
    for i in 0..before.len() {
        if !member[i] {
            assert_eq!(before.gaussians[i], after.gaussians[i], "Gaussian {i} changed");
        }
    }
    let cfg = RenderConfig::default();
    let mut checked = 0;
    for (t, cam) in cams.iter().enumerate() {
        let a = raster::render(before, t, cam, Channels::Both, &cfg).unwrap();
        let b = raster::render(after, t, cam, Channels::Both, &cfg).unwrap();
        for p in 0..a.pixel_count() {
            if touches(a.contributors_at(p), &member) || touches(b.contributors_at(p), &member) {
                continue;
            }
            checked += 1;
            for k in 0..3 {
                assert!((a.color[p * 3 + k] - b.color[p * 3 + k]).abs() < 1e-6);
            }
            assert!((a.alpha[p] - b.alpha[p]).abs() < 1e-6);
        }
    }
    assert!(checked > 0);
}

#[test]
fn edit_freezes_everything_outside_the_set() {
    let world = synthetic::world(&common::small_spec(5)).unwrap();
    let selected = world.members(1);
    let targets = synthetic::recolor_reference(&world, 1, [0.1, 0.9, 0.2], &world.cameras).unwrap();
    for mode in [EditMode::Full, EditMode::ColorOnly] {
        let cfg = EditConfig {
            epochs: 15,
            mode,
            ..Default::default()
        };
        let (edited, report) = edit(&world.scene, &selected, &targets, &world.cameras, &cfg).unwrap();
        assert_eq!(report.losses.len(), 15);
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        check_freeze(&world.scene, &edited, &selected, &world.cameras);
        if mode == EditMode::ColorOnly {
            for &i in &selected {
                let (a, b) = (&world.scene.gaussians[i], &edited.gaussians[i]);
                assert_eq!((a.center, a.rotation, a.log_scale, a.opacity_logit, &a.feature), (b.center, b.rotation, b.log_scale, b.opacity_logit, &b.feature));
            }
        }
    }
}

#[test]
fn empty_selection_is_a_no_op() {
    let world = synthetic::world(&common::small_spec(6)).unwrap();
    let targets = synthetic::recolor_reference(&world, 0, [1.0, 0.0, 0.0], &world.cameras).unwrap();
    let (edited, _) = edit(&world.scene, &[], &targets, &world.cameras, &EditConfig::default()).unwrap();
    assert_eq!(edited, world.scene);
}

#[test]
fn edit_rejects_mismatched_targets() {
    let world = synthetic::world(&common::small_spec(6)).unwrap();
    let targets = vec![vec![0.0; 5]; world.cameras.len()];
    assert!(edit(&world.scene, &[0], &targets, &world.cameras, &EditConfig::default()).is_err());
    assert!(edit(&world.scene, &[world.scene.len()], &[], &[], &EditConfig::default()).is_err());
}
