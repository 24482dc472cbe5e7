mod common;

use lingsplat::quantizer::{self, QuantizerConfig};
use lingsplat::semantics::Decoder;
use lingsplat::synthetic;
use lingsplat::training::{self, densify_and_prune, DensifyConfig, TrainConfig};

fn setup(seed: u64) -> (synthetic::SyntheticDataset, lingsplat::quantizer::Codebook, training::SupervisionStack) {
    let ds = synthetic::generate(&common::small_spec(seed)).unwrap();
    let qcfg = QuantizerConfig {
        entries: ds.world.spec.labels(),
        seed,
        ..Default::default()
    };
    let (book, idx, _) = quantizer::learn_codebook(&ds.features, &qcfg).unwrap();
    let mut sup = ds.supervision.clone();
    for (t, f) in sup.frames.iter_mut().enumerate() {
        f.index = Some(idx.frame(t).to_vec());
    }
    (ds, book, sup)
}

#[test]
fn short_training_lowers_the_loss_and_is_repeatable() {
    let (ds, book, sup) = setup(3);
    let dec = Decoder::random(ds.init_scene.feature_dim, 16, book.entries, 1);
    let cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let a = training::train(&ds.init_scene, &dec, &book, &sup, &cfg).unwrap();
    assert_eq!(a.epochs.len(), 30);
    let (first, last) = (&a.epochs[0].loss, &a.epochs[29].loss);
    assert!(last.total < first.total, "{first:?} -> {last:?}");
    assert_eq!(a.lineage.len(), a.scene.len());
    assert!(lingsplat::scene::validate(&a.scene).is_empty());
    let b = training::train(&ds.init_scene, &dec, &book, &sup, &cfg).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.decoder, b.decoder);
}

#[test]
fn training_rejects_mismatched_decoder() {
    let (ds, book, sup) = setup(4);
    let dec = Decoder::random(ds.init_scene.feature_dim + 1, 16, book.entries, 1);
    assert!(training::train(&ds.init_scene, &dec, &book, &sup, &TrainConfig::default()).is_err());
}

#[test]
fn prune_drops_transparent_gaussians_only() {
    let world = synthetic::world(&common::small_spec(2)).unwrap();
    let mut scene = world.scene.clone();
    scene.gaussians[0].opacity_logit = -12.0;
    let before = scene.len();
    let stats = densify_and_prune(&mut scene, &DensifyConfig::default());
    assert_eq!(stats.pruned, 1);
    assert_eq!((stats.cloned, stats.split), (0, 0));
    assert_eq!(scene.len(), before - 1);
    assert_eq!(scene.gaussians[..], world.scene.gaussians[1..]);
}
