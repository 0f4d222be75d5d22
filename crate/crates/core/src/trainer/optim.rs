//! Adam over a [`ParamSet`].

use std::collections::BTreeMap;

use crate::tensor::Matrix;

use super::model::ParamSet;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = value.data().len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Matrix::frobenius_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Matrix::from_vec(1, 2, vec![1.0, 1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Matrix::from_vec(1, 2, vec![3.0, -0.5]));
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let a = g["a"].data();
        assert!((a[0] - 0.6).abs() < 1e-12 && (a[1] - 0.8).abs() < 1e-12);
    }
}
