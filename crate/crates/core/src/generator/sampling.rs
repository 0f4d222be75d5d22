//! Top-k / nucleus (top-p) sampling over a logit vector.

use rand::Rng;

/// Draws an index from `softmax(logits)` restricted to the `top_k` most
/// likely entries and then to the smallest prefix whose mass reaches `top_p`.
///
/// Ordering among equal logits is by index, so the draw is deterministic for
/// a fixed RNG state.
pub fn sample_top_k_top_p<R: Rng + ?Sized>(logits: &[f64], top_k: usize, top_p: f64, rng: &mut R) -> usize {
    assert!(!logits.is_empty(), "cannot sample from an empty distribution");
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.max(1));

    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut kept = 0;
    let mut mass = 0.0;
    for w in &weights {
        mass += w / total;
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let kept_total: f64 = weights[..kept].iter().sum();
    let mut u = rng.random::<f64>() * kept_total;
    for (slot, w) in weights[..kept].iter().enumerate() {
        if u < *w {
            return order[slot];
        }
        u -= w;
    }
    order[kept - 1]
}
