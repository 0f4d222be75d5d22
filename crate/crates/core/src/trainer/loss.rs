//! Soft-target cross-entropy and the supervised contrastive loss over a
//! batch joined with a memory bank. Each loss returns its value together
//! with the gradient with respect to its differentiable input.

use crate::autograd::softmax_in_place;
use crate::tensor::{dot, Matrix};

use super::bank::MemoryBank;

/// Mean over the batch of `-sum_i t_i log softmax(z)_i`.
pub fn ce_soft(logits: &Matrix, targets: &Matrix) -> f64 {
    ce_soft_with_grad(logits, targets, None).0
}

/// Soft cross-entropy and its gradient with respect to the logits.
///
/// With `weights`, the per-row losses are combined as `sum w_b l_b / sum w_b`
/// instead of a plain mean.
pub fn ce_soft_with_grad(logits: &Matrix, targets: &Matrix, weights: Option<&[f64]>) -> (f64, Matrix) {
    assert_eq!(logits.shape(), targets.shape(), "logits and targets differ in shape");
    let n = logits.rows();
    let row_weight: Vec<f64> = match weights {
        Some(w) => {
            assert_eq!(w.len(), n);
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        }
        None => vec![1.0 / n as f64; n],
    };
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for b in 0..n {
        let z = logits.row(b);
        let t = targets.row(b);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t_sum: f64 = t.iter().sum();
        loss += row_weight[b] * t.iter().zip(z).map(|(ti, zi)| -ti * (zi - lse)).sum::<f64>();
        for (c, g) in grad.row_mut(b).iter_mut().enumerate() {
            *g = row_weight[b] * ((z[c] - lse).exp() * t_sum - t[c]);
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct SclOutput {
    pub loss: f64,
    /// Anchors with at least one positive.
    pub contributing: usize,
    /// Gradient with respect to the batch projections.
    pub grad: Matrix,
}

/// Supervised contrastive loss for the batch anchors against the batch and
/// bank. Bank entries act only as positives and negatives.
pub fn scl_loss(anchors: &Matrix, labels: &[usize], bank: &MemoryBank, tau: f64) -> f64 {
    scl_loss_with_grad(anchors, labels, bank, tau).loss
}

pub fn scl_loss_with_grad(anchors: &Matrix, labels: &[usize], bank: &MemoryBank, tau: f64) -> SclOutput {
    let n = anchors.rows();
    assert_eq!(labels.len(), n, "one label per anchor");
    let bank_entries: Vec<_> = bank.entries().collect();
    let total = n + bank_entries.len();
    let candidate = |j: usize| -> (&[f64], usize) {
        if j < n {
            (anchors.row(j), labels[j])
        } else {
            let e = bank_entries[j - n];
            (e.projection.as_slice(), e.class_id)
        }
    };

    let mut grad = Matrix::zeros(n, anchors.cols());
    let mut loss = 0.0;
    let mut contributing = 0;
    // Per anchor: dL_i/ds_ij, kept to distribute after the loss is averaged.
    let mut coeffs: Vec<(usize, Vec<f64>)> = Vec::new();

    for i in 0..n {
        let zi = anchors.row(i);
        let others: Vec<usize> = (0..total).filter(|&j| j != i).collect();
        let positives = others.iter().filter(|&&j| candidate(j).1 == labels[i]).count();
        if positives == 0 {
            continue;
        }
        contributing += 1;
        let sims: Vec<f64> = others.iter().map(|&j| dot(zi, candidate(j).0) / tau).collect();
        let mut soft = sims.clone();
        softmax_in_place(&mut soft);
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let inv_p = 1.0 / positives as f64;
        let mut pos_sum = 0.0;
        let mut coeff = vec![0.0; total];
        for (slot, &j) in others.iter().enumerate() {
            let is_pos = candidate(j).1 == labels[i];
            if is_pos {
                pos_sum += sims[slot];
            }
            coeff[j] = soft[slot] - if is_pos { inv_p } else { 0.0 };
        }
        loss += lse - inv_p * pos_sum;
        coeffs.push((i, coeff));
    }

    if contributing == 0 {
        log::debug!("no-positive: no anchor in the batch has a positive");
        return SclOutput { loss: 0.0, contributing, grad };
    }

    let scale = 1.0 / (contributing as f64 * tau);
    for (i, coeff) in &coeffs {
        let zi = anchors.row(*i).to_vec();
        for (j, c) in coeff.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let (cj, _) = candidate(j);
            for (g, v) in grad.row_mut(*i).iter_mut().zip(cj) {
                *g += scale * c * v;
            }
            if j < n {
                for (g, v) in grad.row_mut(j).iter_mut().zip(&zi) {
                    *g += scale * c * v;
                }
            }
        }
    }
    SclOutput {
        loss: loss / contributing as f64,
        contributing,
        grad,
    }
}
