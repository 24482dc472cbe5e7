//! PSNR, set/mask IoU and a feature-space directional similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    /// `+∞` for identical inputs.
    pub db: f64,
    pub mse: f64,
}

impl Psnr {
    pub fn identical(&self) -> bool {
        self.db.is_infinite()
    }

    /// Finite value for logs and reports.
    pub fn capped(&self) -> f64 {
        self.db.min(PSNR_CAP_DB)
    }
}

/// `10·log10(1 / MSE)` over the pixels selected by `mask` (all if `None`).
/// `channels` values per pixel share the pixel's mask entry.
pub fn psnr(a: &[f64], b: &[f64], channels: usize, mask: Option<&[bool]>) -> Result<Psnr> {
    if a.len() != b.len() || channels == 0 || a.len() % channels != 0 {
        return Err(Error::Shape(format!("PSNR between {} and {} values", a.len(), b.len())));
    }
    if let Some(m) = mask {
        if m.len() * channels != a.len() {
            return Err(Error::Shape("PSNR mask size".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, (ca, cb)) in a.chunks(channels).zip(b.chunks(channels)).enumerate() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for (x, y) in ca.iter().zip(cb) {
            sum += (x - y) * (x - y);
        }
        count += channels;
    }
    if count == 0 {
        return Err(Error::Invalid("PSNR over an empty mask".into()));
    }
    let mse = sum / count as f64;
    let db = if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() };
    Ok(Psnr { db, mse })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub value: f64,
    pub intersection: usize,
    pub union: usize,
    /// Both inputs empty; `value` is 1 by convention.
    pub both_empty: bool,
}

fn iou_counts(intersection: usize, union: usize) -> Iou {
    if union == 0 {
        return Iou {
            value: 1.0,
            intersection,
            union,
            both_empty: true,
        };
    }
    Iou {
        value: intersection as f64 / union as f64,
        intersection,
        union,
        both_empty: false,
    }
}

/// IoU of two index sets (duplicates ignored).
pub fn iou_sets(pred: &[usize], gt: &[usize]) -> Iou {
    let a: std::collections::BTreeSet<_> = pred.iter().collect();
    let b: std::collections::BTreeSet<_> = gt.iter().collect();
    iou_counts(a.intersection(&b).count(), a.union(&b).count())
}

/// IoU of two binary masks of equal size.
pub fn iou_masks(pred: &[bool], gt: &[bool]) -> Result<Iou> {
    if pred.len() != gt.len() {
        return Err(Error::Shape("IoU mask sizes differ".into()));
    }
    let i = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let u = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(iou_counts(i, u))
}

/// Mean IoU over several (prediction, ground truth) set pairs.
pub fn miou(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("mIoU over zero queries".into()));
    }
    Ok(pairs.iter().map(|(p, g)| iou_sets(p, g).value).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirSim {
    /// Mean cosine over pixels with a defined direction.
    pub value: f64,
    pub pixels: usize,
    /// Edited pixels whose feature did not change.
    pub undefined: usize,
}

/// Mean cosine between per-pixel feature change (`edited - original`) and the
/// query change (`after - before`) over pixels in `region`.
pub fn feature_dir_sim(
    original: &[f64],
    edited: &[f64],
    dim: usize,
    before: &[f64],
    after: &[f64],
    region: &[bool],
) -> Result<DirSim> {
    if original.len() != edited.len() || before.len() != dim || after.len() != dim || region.len() * dim != original.len() {
        return Err(Error::Shape("directional similarity inputs".into()));
    }
    let q: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::Invalid("query embeddings are identical".into()));
    }
    if !region.iter().any(|&r| r) {
        return Err(Error::Invalid("empty edited region".into()));
    }
    let mut sum = 0.0;
    let mut pixels = 0;
    let mut undefined = 0;
    for p in 0..region.len() {
        if !region[p] {
            continue;
        }
        let d: Vec<f64> = (0..dim).map(|k| edited[p * dim + k] - original[p * dim + k]).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn == 0.0 {
            undefined += 1;
            continue;
        }
        sum += d.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (dn * qn);
        pixels += 1;
    }
    Ok(DirSim {
        value: if pixels == 0 { 0.0 } else { sum / pixels as f64 },
        pixels,
        undefined,
    })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub query: String,
    pub psnr_db: f64,
    pub miou: f64,
    pub miou_both_empty: bool,
    pub per_frame_psnr: Vec<f64>,
}

/// CSV with header `variant,psnr_db,miou`.
pub fn table_csv(rows: &[MetricReport]) -> String {
    let mut s = String::from("variant,psnr_db,miou\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.4}\n", r.variant, r.psnr_db, r.miou));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.5; 8];
        assert!(psnr(&a, &a, 1, None).unwrap().identical());
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1, None).unwrap().db - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 1, Some(&[false; 8])).is_err());
    }

    #[test]
    fn iou_counts_match() {
        let i = iou_sets(&[0, 1, 2, 3, 4], &[2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!((i.intersection, i.union), (3, 12));
        assert!((i.value - 0.25).abs() < 1e-15);
        assert!(iou_sets(&[], &[]).both_empty);
        assert_eq!(iou_sets(&[1], &[2]).value, 0.0);
    }

    #[test]
    fn aligned_edit_direction_is_one() {
        let orig = vec![0.0; 4];
        let edited = vec![1.0, 1.0, 0.0, 0.0];
        let d = feature_dir_sim(&orig, &edited, 2, &[0.0, 0.0], &[2.0, 2.0], &[true, true]).unwrap();
        assert!((d.value - 1.0).abs() < 1e-12);
        assert_eq!((d.pixels, d.undefined), (1, 1));
    }
}
