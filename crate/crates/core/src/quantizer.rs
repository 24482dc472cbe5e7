//! Cosine vector quantization of dense per-pixel embeddings.
//!
//! The codebook is learned by alternating hard cosine assignment with Adam
//! steps on `Σ_p (1 - cos(F(p), B[idx(p)]))`; features are held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::Adam;

/// Index value stored at invalid pixels.
pub const INVALID_INDEX: i32 = -1;

/// Pixels per block when reducing codebook gradients.
const BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: usize,
    pub dim: usize,
    /// Row-major `entries × dim`.
    pub data: Vec<f32>,
}

impl Codebook {
    pub fn new(entries: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if entries < 1 || dim == 0 || data.len() != entries * dim {
            return Err(Error::Shape(format!(
                "codebook {entries}×{dim} with {} values",
                data.len()
            )));
        }
        Ok(Codebook { entries, dim, data })
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_f64(&self, j: usize) -> Vec<f64> {
        self.row(j).iter().map(|&v| v as f64).collect()
    }
}

/// `frames × height × width × dim` features with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FeatureStack {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let pixels = frames * height * width;
        if data.len() != pixels * dim || valid.len() != pixels {
            return Err(Error::Shape("feature stack dimensions".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(FeatureStack {
            frames,
            height,
            width,
            dim,
            data,
            valid,
        })
    }

    pub fn pixels(&self) -> usize {
        self.valid.len()
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// `frames × height × width` codebook indices; [`INVALID_INDEX`] marks invalid pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub indices: Vec<i32>,
}

impl IndexStack {
    pub fn frame(&self, t: usize) -> &[i32] {
        let n = self.height * self.width;
        &self.indices[t * n..(t + 1) * n]
    }

    /// Errors unless every index is the sentinel or lies in `[0, entries)`.
    pub fn check_range(&self, entries: usize) -> Result<()> {
        match self
            .indices
            .iter()
            .find(|&&i| i != INVALID_INDEX && (i < 0 || i as usize >= entries))
        {
            Some(i) => Err(Error::Invalid(format!(
                "index {i} outside codebook of {entries} entries"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub indices: IndexStack,
    /// Valid pixels whose feature had zero norm and were marked invalid.
    pub zero_norm: usize,
}

fn unit_rows(data: &[f32], dim: usize) -> Vec<Option<Vec<f64>>> {
    data.chunks(dim)
        .map(|r| {
            let n = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            (n > 0.0).then(|| r.iter().map(|&v| v as f64 / n).collect())
        })
        .collect()
}

fn argmax_cos(f: &[f64], book: &[Option<Vec<f64>>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, b) in book.iter().enumerate() {
        let c = match b {
            Some(b) => f.iter().zip(b).map(|(x, y)| x * y).sum(),
            None => 0.0,
        };
        if c > best.1 {
            best = (j, c);
        }
    }
    best
}

fn check_dims(features: &FeatureStack, book: &Codebook) -> Result<()> {
    if features.dim != book.dim {
        return Err(Error::Shape(format!(
            "feature dim {} vs codebook dim {}",
            features.dim, book.dim
        )));
    }
    Ok(())
}

/// Nearest codebook entry by cosine similarity; ties go to the lowest index.
pub fn assign(features: &FeatureStack, book: &Codebook) -> Result<Assignment> {
    check_dims(features, book)?;
    if !features.valid.iter().any(|&v| v) {
        return Err(Error::Invalid("no valid pixels".into()));
    }
    let unit_book = unit_rows(&book.data, book.dim);
    let dim = features.dim;
    let per: Vec<(i32, bool)> = features
        .valid
        .par_iter()
        .enumerate()
        .map(|(p, &valid)| {
            if !valid {
                return (INVALID_INDEX, false);
            }
            match unit_rows(&features.data[p * dim..(p + 1) * dim], dim).pop().flatten() {
                Some(f) => (argmax_cos(&f, &unit_book).0 as i32, false),
                None => (INVALID_INDEX, true),
            }
        })
        .collect();
    let zero_norm = per.iter().filter(|p| p.1).count();
    if zero_norm > 0 {
        log::warn!("{zero_norm} valid pixels have zero-norm features and were marked invalid");
    }
    Ok(Assignment {
        indices: IndexStack {
            frames: features.frames,
            height: features.height,
            width: features.width,
            indices: per.into_iter().map(|p| p.0).collect(),
        },
        zero_norm,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `Σ_p (1 - cos(F(p), B[idx(p)]))` over pixels with a non-sentinel index.
pub fn quant_loss(features: &FeatureStack, book: &Codebook, indices: &IndexStack) -> Result<f64> {
    check_dims(features, book)?;
    if indices.indices.len() != features.pixels() {
        return Err(Error::Shape("index stack does not match features".into()));
    }
    indices.check_range(book.entries)?;
    let rows: Vec<Vec<f64>> = (0..book.entries).map(|j| book.row_f64(j)).collect();
    let parts: Vec<f64> = indices
        .indices
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(blk, idx)| {
            let mut s = 0.0;
            for (k, &j) in idx.iter().enumerate() {
                if j == INVALID_INDEX {
                    continue;
                }
                let f: Vec<f64> = features.pixel(blk * BLOCK + k).iter().map(|&v| v as f64).collect();
                s += 1.0 - cosine(&f, &rows[j as usize]);
            }
            s
        })
        .collect();
    Ok(parts.iter().sum())
}

/// Loss and codebook gradient for real-valued entries `book` (row-major
/// `entries × dim`) under a fixed assignment.
pub fn quant_loss_and_grad(
    features: &FeatureStack,
    book: &[f64],
    entries: usize,
    indices: &IndexStack,
) -> Result<(f64, Vec<f64>)> {
    let dim = features.dim;
    if book.len() != entries * dim || indices.indices.len() != features.pixels() {
        return Err(Error::Shape("codebook or index stack dimensions".into()));
    }
    indices.check_range(entries)?;
    let mut work = Work {
        unit: Vec::new(),
        pixel: Vec::new(),
        dim,
    };
    let mut assignment = Vec::new();
    for (p, &j) in indices.indices.iter().enumerate() {
        if j == INVALID_INDEX {
            continue;
        }
        if let Some(f) = unit_rows(features.pixel(p), dim).pop().flatten() {
            let b = &book[j as usize * dim..(j as usize + 1) * dim];
            assignment.push((j as usize, 1.0 - cosine(&f, b)));
            work.unit.extend(f);
            work.pixel.push(p);
        } else {
            assignment.push((j as usize, 1.0));
            work.unit.extend(std::iter::repeat_n(0.0, dim));
            work.pixel.push(p);
        }
    }
    let loss = assignment.iter().map(|a| a.1).sum();
    Ok((loss, loss_gradient(&work, book, &assignment, entries)))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub entries: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Adam steps between consecutive assignments.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            entries: 128,
            epochs: 50,
            lr: 1e-2,
            steps_per_epoch: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizerStats {
    /// Loss right after each assignment; the last entry is the final loss.
    pub losses: Vec<f64>,
    pub reseeded: usize,
    pub zero_norm: usize,
}

struct Work {
    /// Unit features of usable pixels.
    unit: Vec<f64>,
    /// Pixel index of each usable row.
    pixel: Vec<usize>,
    dim: usize,
}

impl Work {
    fn rows(&self) -> usize {
        self.pixel.len()
    }
    fn row(&self, r: usize) -> &[f64] {
        &self.unit[r * self.dim..(r + 1) * self.dim]
    }
}

/// Cosine k-means++ seeding: the first entry is a uniformly sampled pixel,
/// each further entry a distinct pixel sampled with probability proportional
/// to its cosine distance from the closest entry chosen so far.
fn seed_entries(work: &Work, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rows = work.rows();
    let trials = 2 + (n as f64).ln().floor() as usize;
    let mut chosen = vec![false; rows];
    let mut book = Vec::with_capacity(n * work.dim);
    let mut dist = vec![f64::INFINITY; rows];
    let updated = |dist: &[f64], entry: &[f64]| -> Vec<f64> {
        dist.par_iter()
            .enumerate()
            .map(|(r, &d)| {
                let c: f64 = work.row(r).iter().zip(entry).map(|(a, b)| a * b).sum();
                d.min((1.0 - c).max(0.0))
            })
            .collect()
    };
    for e in 0..n {
        let total: f64 = (0..rows).filter(|&r| !chosen[r]).map(|r| dist[r]).sum();
        let (pick, next) = if e == 0 || !(total > 0.0 && total.is_finite()) {
            let free: Vec<usize> = (0..rows).filter(|&r| !chosen[r]).collect();
            let pick = free[rng.random_range(0..free.len())];
            (pick, updated(&dist, work.row(pick)))
        } else {
            // Greedy k-means++: keep the candidate that lowers the potential most.
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for _ in 0..trials {
                let mut u = rng.random::<f64>() * total;
                let mut pick = None;
                for r in (0..rows).filter(|&r| !chosen[r]) {
                    pick = Some(r);
                    if u < dist[r] {
                        break;
                    }
                    u -= dist[r];
                }
                let pick = pick.expect("unchosen row exists");
                let next = updated(&dist, work.row(pick));
                let potential: f64 = next.iter().sum();
                if best.as_ref().map_or(true, |b| potential < b.1) {
                    best = Some((pick, potential, next));
                }
            }
            let (pick, _, next) = best.expect("at least one trial");
            (pick, next)
        };
        chosen[pick] = true;
        dist = next;
        book.extend_from_slice(work.row(pick));
    }
    book
}

/// Assignment of every usable row: `(index, 1 - cos)`.
fn assign_rows(work: &Work, book: &[f64], entries: usize) -> Vec<(usize, f64)> {
    let unit_book: Vec<Option<Vec<f64>>> = book
        .chunks(work.dim)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n > 0.0).then(|| r.iter().map(|v| v / n).collect())
        })
        .collect();
    debug_assert_eq!(unit_book.len(), entries);
    (0..work.rows())
        .into_par_iter()
        .map(|r| {
            let (j, c) = argmax_cos(work.row(r), &unit_book);
            (j, 1.0 - c)
        })
        .collect()
}

/// Gradient of `Σ (1 - cos(f_r, b_{a(r)}))` with respect to the codebook.
fn loss_gradient(work: &Work, book: &[f64], assignment: &[(usize, f64)], entries: usize) -> Vec<f64> {
    let dim = work.dim;
    let norms: Vec<f64> = book.chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let partials: Vec<Vec<f64>> = (0..work.rows())
        .collect::<Vec<_>>()
        .par_chunks(BLOCK)
        .map(|rows| {
            let mut g = vec![0.0; entries * dim];
            for &r in rows {
                let j = assignment[r].0;
                let nb = norms[j];
                if nb == 0.0 {
                    continue;
                }
                let b = &book[j * dim..(j + 1) * dim];
                let f = work.row(r);
                let c = 1.0 - assignment[r].1;
                // d(1 - cos)/db = -(f̂ - cos·b̂) / |b|
                for k in 0..dim {
                    g[j * dim + k] -= (f[k] - c * b[k] / nb) / nb;
                }
            }
            g
        })
        .collect();
    let mut g = vec![0.0; entries * dim];
    for part in partials {
        for (a, b) in g.iter_mut().zip(part) {
            *a += b;
        }
    }
    g
}

/// Learns an `entries`-row codebook over the valid pixels of `features`.
pub fn learn_codebook(
    features: &FeatureStack,
    cfg: &QuantizerConfig,
) -> Result<(Codebook, IndexStack, QuantizerStats)> {
    let dim = features.dim;
    if cfg.entries == 0 {
        return Err(Error::Invalid("codebook needs at least one entry".into()));
    }
    let mut stats = QuantizerStats::default();
    let mut work = Work {
        unit: Vec::new(),
        pixel: Vec::new(),
        dim,
    };
    for p in 0..features.pixels() {
        if !features.valid[p] {
            continue;
        }
        match unit_rows(features.pixel(p), dim).pop().flatten() {
            Some(f) => {
                work.unit.extend(f);
                work.pixel.push(p);
            }
            None => stats.zero_norm += 1,
        }
    }
    if work.rows() < cfg.entries {
        return Err(Error::Invalid(format!(
            "{} entries requested but only {} valid pixels",
            cfg.entries,
            work.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut book = seed_entries(&work, cfg.entries, &mut rng);
    let mut adam = Adam::new(book.len(), cfg.lr);

    let mut assignment = assign_rows(&work, &book, cfg.entries);
    for _ in 0..cfg.epochs {
        stats.losses.push(assignment.iter().map(|a| a.1).sum());
        for _ in 0..cfg.steps_per_epoch.max(1) {
            let g = loss_gradient(&work, &book, &assignment, cfg.entries);
            adam.step(&mut book, &g, None);
        }
        assignment = assign_rows(&work, &book, cfg.entries);
        stats.reseeded += reseed_collapsed(&work, &mut book, &mut adam, &mut assignment, cfg.entries);
    }
    stats.losses.push(assignment.iter().map(|a| a.1).sum());

    let codebook = Codebook::new(cfg.entries, dim, book.iter().map(|&v| v as f32).collect())?;
    let mut indices = vec![INVALID_INDEX; features.pixels()];
    let stored = unit_rows(&codebook.data, dim);
    let final_idx: Vec<i32> = (0..work.rows())
        .into_par_iter()
        .map(|r| argmax_cos(work.row(r), &stored).0 as i32)
        .collect();
    for (r, &p) in work.pixel.iter().enumerate() {
        indices[p] = final_idx[r];
    }
    let stack = IndexStack {
        frames: features.frames,
        height: features.height,
        width: features.width,
        indices,
    };
    Ok((codebook, stack, stats))
}

/// Moves entries that received no pixels onto the highest-loss pixels.
fn reseed_collapsed(
    work: &Work,
    book: &mut [f64],
    adam: &mut Adam,
    assignment: &mut Vec<(usize, f64)>,
    entries: usize,
) -> usize {
    let mut used = vec![false; entries];
    for a in assignment.iter() {
        used[a.0] = true;
    }
    let empty: Vec<usize> = (0..entries).filter(|&j| !used[j]).collect();
    if empty.is_empty() {
        return 0;
    }
    let mut order: Vec<usize> = (0..work.rows()).collect();
    order.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
    let dim = work.dim;
    for (&j, &r) in empty.iter().zip(&order) {
        book[j * dim..(j + 1) * dim].copy_from_slice(work.row(r));
        adam.reset(j * dim..(j + 1) * dim);
    }
    *assignment = assign_rows(work, book, entries);
    empty.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(rows: &[&[f32]]) -> FeatureStack {
        let dim = rows[0].len();
        FeatureStack::new(
            1,
            1,
            rows.len(),
            dim,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            vec![true; rows.len()],
        )
        .unwrap()
    }

    #[test]
    fn assigns_by_cosine() {
        let book = Codebook::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = assign(&stack(&[&[0.9, 0.1]]), &book).unwrap();
        assert_eq!(a.indices.indices, vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = Codebook::new(4, 2, vec![0.0, -1.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = assign(&stack(&[&[1.0, 1.0]]), &book).unwrap();
        assert_eq!(a.indices.indices, vec![1]);
    }

    #[test]
    fn zero_feature_is_invalid() {
        let book = Codebook::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = assign(&stack(&[&[0.0, 0.0], &[0.0, 2.0]]), &book).unwrap();
        assert_eq!(a.indices.indices, vec![INVALID_INDEX, 1]);
        assert_eq!(a.zero_norm, 1);
    }

    #[test]
    fn orthogonal_pixel_costs_one() {
        let book = Codebook::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = stack(&[&[0.0, 3.0], &[2.0, 0.0]]);
        let idx = IndexStack {
            frames: 1,
            height: 1,
            width: 2,
            indices: vec![0, 0],
        };
        assert!((quant_loss(&f, &book, &idx).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_keep_initial_assignment() {
        let f = stack(&[&[1.0, 0.1], &[0.1, 1.0], &[1.0, 0.2]]);
        let cfg = QuantizerConfig {
            entries: 2,
            epochs: 0,
            seed: 4,
            ..Default::default()
        };
        let (book, idx, stats) = learn_codebook(&f, &cfg).unwrap();
        assert_eq!(assign(&f, &book).unwrap().indices, idx);
        assert_eq!(stats.losses.len(), 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = stack(&[&[1.0, 0.3, -0.2], &[0.2, 1.0, 0.5], &[0.9, -0.1, 0.4]]);
        let work = Work {
            unit: unit_rows(&f.data, 3).into_iter().flatten().flatten().collect(),
            pixel: vec![0, 1, 2],
            dim: 3,
        };
        let book = vec![0.8, 0.1, 0.2, -0.1, 0.7, 0.3];
        let a = assign_rows(&work, &book, 2);
        let g = loss_gradient(&work, &book, &a, 2);
        let mut loss = |b: &[f64]| -> f64 {
            a.iter()
                .enumerate()
                .map(|(r, &(j, _))| 1.0 - cosine(work.row(r), &b[j * 3..j * 3 + 3]))
                .sum()
        };
        let n = crate::gradcheck::central_difference(&mut loss, &book, 1e-6);
        for k in 0..6 {
            assert!((g[k] - n[k]).abs() < 1e-7, "{k}: {} vs {}", g[k], n[k]);
        }
    }
}
