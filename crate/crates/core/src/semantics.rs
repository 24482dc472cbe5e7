//! Feature decoder (`d_f → 64 → N`, ReLU, softmax) and the cross-entropy
//! language loss against codebook index maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math;
use crate::quantizer::{Codebook, INVALID_INDEX};

pub const DEFAULT_HIDDEN: usize = 64;

/// Rows per block for deterministic parameter-gradient reduction.
const BLOCK: usize = 1024;

/// Stored decoder parameters. Layout of `params`: `w1` (hidden × input),
/// `b1` (hidden), `w2` (output × hidden), `b2` (output).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f32>,
}

impl Decoder {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Decoder {
            input,
            hidden,
            output,
            params: vec![0.0; Self::param_count(input, hidden, output)],
        }
    }

    /// He-initialized weights and zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Self::zeros(input, hidden, output);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).unwrap();
        for k in 0..hidden * input {
            d.params[k] = n1.sample(&mut rng) as f32;
        }
        let o = hidden * input + hidden;
        for k in 0..output * hidden {
            d.params[o + k] = n2.sample(&mut rng) as f32;
        }
        d
    }

    pub fn check(&self) -> Result<()> {
        if self.params.len() != Self::param_count(self.input, self.hidden, self.output) {
            return Err(Error::Shape("decoder parameter count".into()));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite decoder parameter".into()));
        }
        Ok(())
    }
}

/// Working-precision copy of a [`Decoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

impl From<&Decoder> for Mlp {
    fn from(d: &Decoder) -> Self {
        Mlp {
            input: d.input,
            hidden: d.hidden,
            output: d.output,
            params: d.params.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl From<&Mlp> for Decoder {
    fn from(m: &Mlp) -> Self {
        Decoder {
            input: m.input,
            hidden: m.hidden,
            output: m.output,
            params: m.params.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl Mlp {
    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    /// Hidden activations (post-ReLU) and output logits for one input row.
    pub fn forward(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        for h in 0..self.hidden {
            let row = &p[h * self.input..(h + 1) * self.input];
            let z = p[b1 + h] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            hidden[h] = z.max(0.0);
        }
        for o in 0..self.output {
            let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
            logits[o] = p[b2 + o] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    fn backward(&self, x: &[f64], hidden: &[f64], d_logits: &[f64], grad: &mut [f64], d_x: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut d_hidden = vec![0.0; self.hidden];
        for o in 0..self.output {
            let g = d_logits[o];
            if g == 0.0 {
                continue;
            }
            grad[b2 + o] += g;
            for h in 0..self.hidden {
                grad[w2 + o * self.hidden + h] += g * hidden[h];
                d_hidden[h] += g * p[w2 + o * self.hidden + h];
            }
        }
        d_x.fill(0.0);
        for h in 0..self.hidden {
            if hidden[h] <= 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grad[b1 + h] += g;
            for i in 0..self.input {
                grad[h * self.input + i] += g * x[i];
                d_x[i] += g * p[h * self.input + i];
            }
        }
    }
}

/// Row-stochastic `rows × classes` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexDistribution {
    pub rows: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl IndexDistribution {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.classes..(r + 1) * self.classes]
    }

    pub fn argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

fn decode_rows(inputs: &[f64], mlp: &Mlp) -> Result<IndexDistribution> {
    if mlp.input == 0 || inputs.len() % mlp.input != 0 {
        return Err(Error::Shape(format!(
            "{} input values for decoder width {}",
            inputs.len(),
            mlp.input
        )));
    }
    let rows = inputs.len() / mlp.input;
    let mut probs = vec![0.0; rows * mlp.output];
    probs
        .par_chunks_mut(mlp.output)
        .zip(inputs.par_chunks(mlp.input))
        .for_each_init(
            || (vec![0.0; mlp.hidden], vec![0.0; mlp.output]),
            |(hidden, logits), (out, x)| {
                mlp.forward(x, hidden, logits);
                math::softmax_into(logits, out);
            },
        );
    Ok(IndexDistribution {
        rows,
        classes: mlp.output,
        probs,
    })
}

/// Pixelwise decoding of an `H × W × d_f` feature map.
pub fn decode_map(feature_map: &[f64], mlp: &Mlp) -> Result<IndexDistribution> {
    decode_rows(feature_map, mlp)
}

/// Decoding of per-Gaussian features (row-major `G × d_f`).
pub fn decode_gaussians(features: &[f64], mlp: &Mlp) -> Result<IndexDistribution> {
    decode_rows(features, mlp)
}

/// Mean of `-ln M̂(p)[target(p)]` over pixels that are valid and carry a
/// non-sentinel target. Returns 0 when no pixel qualifies.
pub fn lang_loss(dist: &IndexDistribution, targets: &[i32], valid: &[bool]) -> Result<f64> {
    check_targets(dist.rows, dist.classes, targets, valid)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..dist.rows {
        if valid[r] && targets[r] != INVALID_INDEX {
            sum -= dist.row(r)[targets[r] as usize].ln();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("language loss over an empty valid set");
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

fn check_targets(rows: usize, classes: usize, targets: &[i32], valid: &[bool]) -> Result<()> {
    if targets.len() != rows || valid.len() != rows {
        return Err(Error::Shape("target/valid length".into()));
    }
    if let Some(&t) = targets
        .iter()
        .find(|&&t| t != INVALID_INDEX && (t < 0 || t as usize >= classes))
    {
        return Err(Error::Invalid(format!("target {t} outside {classes} classes")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangGrad {
    pub loss: f64,
    pub valid: usize,
    /// dL/d(decoder parameters), same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// dL/d(inputs), same layout as the input rows.
    pub inputs: Vec<f64>,
}

/// Cross-entropy forward and backward in one pass. Parameter gradients are
/// reduced over fixed row blocks in order.
pub fn lang_loss_grad(inputs: &[f64], mlp: &Mlp, targets: &[i32], valid: &[bool]) -> Result<LangGrad> {
    if inputs.len() % mlp.input.max(1) != 0 {
        return Err(Error::Shape("decoder input width".into()));
    }
    let rows = inputs.len() / mlp.input;
    check_targets(rows, mlp.output, targets, valid)?;
    let count = (0..rows)
        .filter(|&r| valid[r] && targets[r] != INVALID_INDEX)
        .count();
    let mut d_inputs = vec![0.0; inputs.len()];
    if count == 0 {
        log::warn!("language loss over an empty valid set");
        return Ok(LangGrad {
            loss: 0.0,
            valid: 0,
            params: vec![0.0; mlp.params.len()],
            inputs: d_inputs,
        });
    }
    let scale = 1.0 / count as f64;
    let parts: Vec<(f64, Vec<f64>)> = d_inputs
        .par_chunks_mut(BLOCK * mlp.input)
        .enumerate()
        .map(|(blk, dx_block)| {
            let mut grad = vec![0.0; mlp.params.len()];
            let mut loss = 0.0;
            let mut hidden = vec![0.0; mlp.hidden];
            let mut logits = vec![0.0; mlp.output];
            let mut probs = vec![0.0; mlp.output];
            for (k, dx) in dx_block.chunks_mut(mlp.input).enumerate() {
                let r = blk * BLOCK + k;
                if !valid[r] || targets[r] == INVALID_INDEX {
                    continue;
                }
                let x = &inputs[r * mlp.input..(r + 1) * mlp.input];
                mlp.forward(x, &mut hidden, &mut logits);
                math::softmax_into(&logits, &mut probs);
                let t = targets[r] as usize;
                loss -= probs[t].ln();
                for (j, p) in probs.iter_mut().enumerate() {
                    *p = (*p - if j == t { 1.0 } else { 0.0 }) * scale;
                }
                mlp.backward(x, &hidden, &probs, &mut grad, dx);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut params = vec![0.0; mlp.params.len()];
    for (l, g) in parts {
        loss += l;
        for (a, b) in params.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(LangGrad {
        loss: loss * scale,
        valid: count,
        params,
        inputs: d_inputs,
    })
}

/// `Σ_j row[j] · B[j]`.
pub fn expected_embedding(row: &[f64], book: &Codebook) -> Result<Vec<f64>> {
    if row.len() != book.entries {
        return Err(Error::Shape(format!(
            "{} probabilities for {} codebook entries",
            row.len(),
            book.entries
        )));
    }
    let mut out = vec![0.0; book.dim];
    for (j, &p) in row.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(book.row(j)) {
            *o += p * b as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_decoder_is_uniform() {
        let mlp = Mlp::from(&Decoder::zeros(3, 8, 5));
        let d = decode_map(&[0.3, -1.0, 2.0, 0.0, 0.0, 1.0], &mlp).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let l = lang_loss(&d, &[1, 4], &[true, true]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_valid_set_is_zero() {
        let mlp = Mlp::from(&Decoder::random(2, 4, 3, 1));
        let g = lang_loss_grad(&[1.0, 2.0], &mlp, &[0], &[false]).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mlp = Mlp::from(&Decoder::random(3, 6, 4, 2));
        let x = [0.5, -0.3, 0.8, -0.1, 0.9, 0.4, 0.2, 0.2, -0.7];
        let targets = [2, INVALID_INDEX, 0];
        let valid = [true, true, true];
        let g = lang_loss_grad(&x, &mlp, &targets, &valid).unwrap();
        let loss = |m: &Mlp, x: &[f64]| {
            lang_loss(&decode_map(x, m).unwrap(), &targets, &valid).unwrap()
        };
        let mut fp = |p: &[f64]| {
            let mut m = mlp.clone();
            m.params.copy_from_slice(p);
            loss(&m, &x)
        };
        let c = crate::gradcheck::compare(&mut fp, &mlp.params, &g.params, 1e-5, 1e-6);
        assert!(c.max_relative_error < 1e-4, "{c:?}");
        let mut fx = |xx: &[f64]| loss(&mlp, xx);
        let c = crate::gradcheck::compare(&mut fx, &x, &g.inputs, 1e-5, 1e-6);
        assert!(c.max_relative_error < 1e-4, "{c:?}");
    }

    #[test]
    fn expected_embedding_of_one_hot_is_the_entry() {
        let book = Codebook::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        assert_eq!(expected_embedding(&[0.0, 1.0], &book).unwrap(), vec![-1.0, 0.5, 0.25]);
    }
}
