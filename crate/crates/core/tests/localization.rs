mod common;

use std::sync::OnceLock;

use lingsplat::ablation::{self, PlantedFixture, PlantedSpec, Variant};
use lingsplat::localization::{self, QueryEmbedding, RefineConfig, Semantics};
use lingsplat::quantizer::Codebook;
use lingsplat::scene::GaussianScene;
use lingsplat::semantics::Mlp;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn localize_matches_brute_force(seed in any::<u64>(), n in 1usize..60, fdim in 1usize..6, entries in 1usize..8, dim in 2usize..10, pick in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, n, fdim, 2, 2);
        let (mlp, book) = common::random_semantics(&mut rng, fdim, entries, dim);
        let qv: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = QueryEmbedding::new("q", qv.clone()).unwrap();
        let oracle = common::oracle_scores(&scene, &mlp, &book, &qv);
        let mut sorted = oracle.clone();
        sorted.sort_by(f64::total_cmp);
        // Threshold in a clear gap between scores, so rounding cannot flip a member.
        let gaps: Vec<usize> = (0..n.saturating_sub(1)).filter(|&k| sorted[k + 1] - sorted[k] > 1e-9).collect();
        let tau = match gaps.len() {
            0 => sorted[0] - 1e-3,
            g => {
                let k = gaps[((pick * g as f64) as usize).min(g - 1)];
                0.5 * (sorted[k] + sorted[k + 1])
            }
        };
        let sem = Semantics { decoder: &mlp, codebook: &book };
        let got = localization::localize(&scene, sem, &q, tau).unwrap();
        for (a, b) in got.scores.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let expected: Vec<usize> = (0..n).filter(|&i| oracle[i] > tau).collect();
        prop_assert_eq!(got.selected, expected);
    }

    #[test]
    fn selection_ignores_query_scale(seed in any::<u64>(), scale in 1e-3f64..1e3, tau in -0.5f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, 30, 3, 2, 2);
        let (mlp, book) = common::random_semantics(&mut rng, 3, 4, 5);
        let qv: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sem = Semantics { decoder: &mlp, codebook: &book };
        let a = localization::localize(&scene, sem, &QueryEmbedding::new("q", qv.clone()).unwrap(), tau).unwrap();
        let scaled: Vec<f64> = qv.iter().map(|v| v * scale).collect();
        let b = localization::localize(&scene, sem, &QueryEmbedding::new("q", scaled).unwrap(), tau).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_extremes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = common::random_scene(&mut rng, 25, 3, 2, 2);
        let (mlp, book) = common::random_semantics(&mut rng, 3, 4, 5);
        let q = QueryEmbedding::new("q", (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sem = Semantics { decoder: &mlp, codebook: &book };
        prop_assert!(localization::localize(&scene, sem, &q, 1.0).unwrap().selected.is_empty());
        let all = localization::localize(&scene, sem, &q, -1.0).unwrap();
        let expected: Vec<usize> = (0..25).filter(|&i| all.scores[i] > -1.0).collect();
        prop_assert_eq!(all.selected, expected);
        prop_assert!(all.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    }
}

fn fixture() -> &'static PlantedFixture {
    static FIX: OnceLock<PlantedFixture> = OnceLock::new();
    FIX.get_or_init(|| ablation::planted_fixture(&PlantedSpec::default()).unwrap())
}

fn semantics(fix: &PlantedFixture) -> (Mlp, &Codebook) {
    (Mlp::from(&fix.decoder), &fix.codebook)
}

fn same_except_features(a: &GaussianScene, b: &GaussianScene) -> bool {
    a.motion == b.motion
        && a.gaussians.len() == b.gaussians.len()
        && a.gaussians.iter().zip(&b.gaussians).all(|(x, y)| {
            let mut y = y.clone();
            y.feature.clone_from(&x.feature);
            *x == y
        })
}

fn f1(selected: &[usize], truth: &[usize]) -> f64 {
    let tp = selected.iter().filter(|i| truth.contains(i)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / selected.len() as f64, tp / truth.len() as f64);
    2.0 * p * r / (p + r)
}

#[test]
fn refinement_touches_only_its_own_features() {
    let fix = fixture();
    let (mlp, book) = semantics(fix);
    let sem = Semantics { decoder: &mlp, codebook: book };
    let cfg = RefineConfig::default();
    let before = localization::localize(&fix.scene, sem, &fix.query, cfg.tau).unwrap().selected;

    let mut scene = fix.scene.clone();
    let log = localization::refine_recall(&mut scene, sem, &fix.query, fix.views(), &cfg).unwrap();
    assert!(same_except_features(&scene, &fix.scene));
    for &i in &before {
        assert_eq!(scene.gaussians[i].feature, fix.scene.gaussians[i].feature, "recall moved selected {i}");
    }
    assert!(log.set_sizes.windows(2).all(|w| w[0] <= w[1]), "{:?}", log.set_sizes);

    let mid = localization::localize(&scene, sem, &fix.query, cfg.tau).unwrap().selected;
    let snapshot = scene.clone();
    localization::refine_precision(&mut scene, sem, &fix.query, fix.views(), &cfg).unwrap();
    assert!(same_except_features(&scene, &fix.scene));
    for i in 0..scene.len() {
        if !mid.contains(&i) {
            assert_eq!(scene.gaussians[i].feature, snapshot.gaussians[i].feature, "precision moved unselected {i}");
        }
    }
}

#[test]
fn zero_epochs_leave_the_scene_alone() {
    let fix = fixture();
    let (mlp, book) = semantics(fix);
    let sem = Semantics { decoder: &mlp, codebook: book };
    let cfg = RefineConfig {
        recall_epochs: 0,
        precision_epochs: 0,
        ..Default::default()
    };
    let mut scene = fix.scene.clone();
    let refined = localization::localize_refined(&mut scene, sem, &fix.query, fix.views(), &cfg).unwrap();
    assert_eq!(scene, fix.scene);
    let plain = localization::localize(&fix.scene, sem, &fix.query, cfg.tau).unwrap();
    assert_eq!(refined.selected, plain.selected);
}

#[test]
fn recall_recovers_planted_false_negatives() {
    let fix = fixture();
    assert!(!fix.planted_fn.is_empty());
    let sel = ablation::localize_variant(fix, Variant::NoPrecision, &RefineConfig::default()).unwrap();
    let found = fix.planted_fn.iter().filter(|i| sel.contains(i)).count();
    assert!(found as f64 >= 0.95 * fix.planted_fn.len() as f64, "{found}/{}", fix.planted_fn.len());
}

#[test]
fn precision_removes_planted_false_positives() {
    let fix = fixture();
    assert!(!fix.planted_fp.is_empty());
    let sel = ablation::localize_variant(fix, Variant::NoRecall, &RefineConfig::default()).unwrap();
    let left = fix.planted_fp.iter().filter(|i| sel.contains(i)).count();
    let removed = fix.planted_fp.len() - left;
    assert!(removed as f64 >= 0.95 * fix.planted_fp.len() as f64, "{removed}/{}", fix.planted_fp.len());
}

#[test]
fn full_refinement_beats_plain_localization() {
    let fix = fixture();
    let cfg = RefineConfig::default();
    let full = ablation::localize_variant(fix, Variant::Full, &cfg).unwrap();
    let plain = ablation::localize_variant(fix, Variant::NoRefinement, &cfg).unwrap();
    assert!(f1(&full, &fix.members) > f1(&plain, &fix.members));
}

#[test]
fn clean_scene_localizes_its_members() {
    let fix = ablation::planted_fixture(&PlantedSpec {
        fraction: 0.0,
        ..Default::default()
    })
    .unwrap();
    let cfg = RefineConfig::default();
    let plain = ablation::localize_variant(&fix, Variant::NoRefinement, &cfg).unwrap();
    let full = ablation::localize_variant(&fix, Variant::Full, &cfg).unwrap();
    assert_eq!(plain, fix.members);
    assert_eq!(full, plain);
}

#[test]
fn empty_mask_skips_refinement() {
    let fix = fixture();
    let (mlp, book) = semantics(fix);
    let sem = Semantics { decoder: &mlp, codebook: book };
    let cfg = RefineConfig {
        tau: 1.0,
        ..Default::default()
    };
    let mut scene = fix.scene.clone();
    let r = localization::localize_refined(&mut scene, sem, &fix.query, fix.views(), &cfg).unwrap();
    assert!(r.selected.is_empty());
    assert_eq!(scene, fix.scene);
}
