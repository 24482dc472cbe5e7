//! Clone/split of Gaussians with large positional gradients and pruning of
//! nearly transparent ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Optimizer, SceneGrads};
use crate::math;
use crate::scene::GaussianScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Steps between densification passes.
    pub interval: usize,
    /// First step at which a pass may run.
    pub start: usize,
    /// Mean screen-space (NDC) positional gradient norm above which a
    /// Gaussian is densified.
    pub grad_threshold: f64,
    /// Activated opacity below which a Gaussian is removed.
    pub prune_opacity: f64,
    /// Densification runs while `step < until_fraction · total_steps`.
    pub until_fraction: f64,
    /// Gaussians whose largest scale exceeds this fraction of the scene
    /// extent are split; smaller ones are cloned.
    pub percent_dense: f64,
    /// Upper bound on the scene size as a multiple of the initial count.
    pub max_growth: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            interval: 100,
            start: 500,
            grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            until_fraction: 0.5,
            percent_dense: 0.01,
            max_growth: 2.0,
        }
    }
}

impl DensifyConfig {
    pub(crate) fn due(&self, step: usize, total_steps: usize) -> bool {
        self.enabled
            && self.interval > 0
            && step >= self.start
            && step % self.interval == 0
            && (step as f64) < self.until_fraction * total_steps as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub gaussians: usize,
}

/// Running sums of screen-space gradient norms for visible Gaussians.
#[derive(Clone, Debug)]
pub(crate) struct Accumulator {
    sum: Vec<f64>,
    count: Vec<u32>,
    initial: usize,
}

impl Accumulator {
    pub fn new(n: usize) -> Self {
        Accumulator {
            sum: vec![0.0; n],
            count: vec![0; n],
            initial: n,
        }
    }

    /// Fresh sums for `n` rows, keeping the growth baseline.
    pub fn reset(&mut self, n: usize) {
        self.sum = vec![0.0; n];
        self.count = vec![0; n];
    }

    pub fn record(&mut self, g: &SceneGrads) {
        for i in 0..self.sum.len() {
            if g.visible[i] {
                self.sum[i] += g.screen_grad_norms[i];
                self.count[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

fn extent(scene: &GaussianScene) -> f64 {
    let n = scene.len().max(1) as f64;
    let mean = [0, 1, 2].map(|k| scene.gaussians.iter().map(|g| g.center[k] as f64).sum::<f64>() / n);
    scene
        .gaussians
        .iter()
        .map(|g| (0..3).map(|k| (g.center[k] as f64 - mean[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// One densification pass. Returns the mapping from new rows to the old rows
/// they continue (the first child of a split continues its parent; other new
/// Gaussians map to `None`) and the old row every new row descends from.
pub(crate) fn densify_and_prune_rows(
    scene: &mut GaussianScene,
    acc: &Accumulator,
    cfg: &DensifyConfig,
    seed: u64,
) -> (DensifyStats, Vec<Option<usize>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (cfg.max_growth * acc.initial.max(1) as f64) as usize;
    let dense_scale = cfg.percent_dense * extent(scene);
    let mut stats = DensifyStats::default();
    let old = std::mem::take(&mut scene.gaussians);
    let mut kept = Vec::with_capacity(old.len());
    let mut added = Vec::new();
    let mut budget = limit.saturating_sub(old.len());
    for (i, g) in old.into_iter().enumerate() {
        if g.opacity() < cfg.prune_opacity {
            stats.pruned += 1;
            continue;
        }
        if budget > 0 && acc.mean(i) > cfg.grad_threshold {
            budget -= 1;
            let max_scale = g.scale().into_iter().fold(0.0, f64::max);
            if max_scale <= dense_scale {
                stats.cloned += 1;
                kept.push((Some(i), g.clone()));
                added.push((i, g));
            } else {
                stats.split += 1;
                let r = math::quat_to_mat(&math::normalize4(&g.rotation.map(|v| v as f64)));
                let s = g.scale();
                let mut children = [g.clone(), g.clone()];
                for child in &mut children {
                    let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                    let local = nalgebra::Vector3::new(z[0] * s[0], z[1] * s[1], z[2] * s[2]);
                    let offset = r * local;
                    for k in 0..3 {
                        child.center[k] = (g.center[k] as f64 + offset[k]) as f32;
                        child.log_scale[k] = (g.log_scale[k] as f64 - 1.6f64.ln()) as f32;
                    }
                }
                let [a, b] = children;
                kept.push((Some(i), a));
                added.push((i, b));
            }
        } else {
            kept.push((Some(i), g));
        }
    }
    let mut rows: Vec<Option<usize>> = Vec::new();
    let mut parents = Vec::new();
    let mut gaussians = Vec::new();
    for (src, g) in kept {
        rows.push(src);
        parents.push(src.expect("kept rows have a source"));
        gaussians.push(g);
    }
    for (src, g) in added {
        rows.push(None);
        parents.push(src);
        gaussians.push(g);
    }
    // Static Gaussians first, stable.
    let mut order: Vec<usize> = (0..gaussians.len()).collect();
    order.sort_by_key(|&i| gaussians[i].dynamic);
    let mut slots: Vec<Option<crate::scene::Gaussian>> = gaussians.into_iter().map(Some).collect();
    scene.gaussians = order.iter().map(|&i| slots[i].take().expect("each row once")).collect();
    let rows = order.iter().map(|&i| rows[i]).collect();
    let parents = order.iter().map(|&i| parents[i]).collect();
    stats.gaussians = scene.len();
    (stats, rows, parents)
}

/// Densifies and prunes `scene`, carrying optimizer state over to surviving
/// Gaussians.
pub(crate) fn densify_and_prune_with(
    scene: &mut GaussianScene,
    opt: &mut Optimizer,
    acc: &Accumulator,
    cfg: &DensifyConfig,
    seed: u64,
) -> (DensifyStats, Vec<Option<usize>>, Vec<usize>) {
    let (stats, rows, parents) = densify_and_prune_rows(scene, acc, cfg, seed);
    opt.remap(&rows, scene.feature_dim, scene.bases());
    (stats, rows, parents)
}

/// Densification pass without optimizer state (fresh accumulators yield a
/// pure prune).
pub fn densify_and_prune(scene: &mut GaussianScene, cfg: &DensifyConfig) -> DensifyStats {
    let acc = Accumulator::new(scene.len());
    densify_and_prune_rows(scene, &acc, cfg, 0).0
}
