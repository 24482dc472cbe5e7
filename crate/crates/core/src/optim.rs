//! Adam over flat parameter slices.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-element step counts, so rows can be reset or appended independently.
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates `params[k]` for every `k` where `mask` is absent or true.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        for k in 0..params.len() {
            if mask.is_some_and(|m| !m[k]) {
                continue;
            }
            let g = grads[k];
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / (1.0 - self.beta1.powi(t));
            let vh = self.v[k] / (1.0 - self.beta2.powi(t));
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Clears the moments of elements `range`.
    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        for k in range {
            self.m[k] = 0.0;
            self.v[k] = 0.0;
            self.steps[k] = 0;
        }
    }

    /// Rebuilds the state for a new row layout: `rows[r]` names the old row
    /// whose state new row `r` inherits, or `None` for fresh state.
    pub fn remap_rows(&mut self, row_len: usize, rows: &[Option<usize>]) {
        let mut m = vec![0.0; rows.len() * row_len];
        let mut v = vec![0.0; rows.len() * row_len];
        let mut steps = vec![0; rows.len() * row_len];
        for (r, src) in rows.iter().enumerate() {
            if let Some(s) = *src {
                let (a, b) = (r * row_len, s * row_len);
                m[a..a + row_len].copy_from_slice(&self.m[b..b + row_len]);
                v[a..a + row_len].copy_from_slice(&self.v[b..b + row_len]);
                steps[a..a + row_len].copy_from_slice(&self.steps[b..b + row_len]);
            }
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, -0.5], None);
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn masked_elements_are_untouched() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, 3.0], Some(&[false, true]));
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1, 0.05);
        let mut p = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            a.step(&mut p, &g, None);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
