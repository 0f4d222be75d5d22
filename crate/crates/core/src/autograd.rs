//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Loss functions with closed-form gradients enter the
//! tape through [`Tape::scalar_fn`], which stores the local gradient computed
//! alongside the value.

use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row range `[start, start + len)` of one sequence.
pub type Segment = (usize, usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Gather { table: Var, ids: Vec<usize> },
    SegmentMean { input: Var, segments: Vec<Segment> },
    RowNormalize { input: Var, norms: Vec<f64> },
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    ScalarFn { input: Var, local_grad: Matrix },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<Segment>,
    heads: usize,
    /// Softmax weights per (segment, head), each `len x len`.
    probs: Vec<Matrix>,
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0[v.0].take()
    }
}

const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, g) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= g;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select_rows(ids);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean of each segment's rows; one output row per segment.
    pub fn segment_mean(&mut self, input: Var, segments: &[Segment]) -> Var {
        let x = self.value(input);
        let mut value = Matrix::zeros(segments.len(), x.cols());
        for (s, &(start, len)) in segments.iter().enumerate() {
            let inv = 1.0 / len as f64;
            for r in start..start + len {
                for (o, v) in value.row_mut(s).iter_mut().zip(x.row(r)) {
                    *o += v * inv;
                }
            }
        }
        self.push(
            value,
            Op::SegmentMean {
                input,
                segments: segments.to_vec(),
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt().max(NORM_EPS);
            norms.push(n);
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(value, Op::RowNormalize { input, norms })
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let n = x.cols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm { input, inv_std })
    }

    /// Multi-head scaled dot-product self-attention, restricted to each
    /// segment. `q`, `k`, `v` share the same shape; heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        assert!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows(), d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &qm.row(start + i)[cols.clone()];
                    let row = p.row_mut(i);
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = dot(qi, &km.row(start + j)[cols.clone()]) * scale;
                    }
                    softmax_in_place(row);
                }
                for i in 0..len {
                    for j in 0..len {
                        let w = p.get(i, j);
                        let vj = &vm.row(start + j)[cols.clone()];
                        let oi = &mut out.row_mut(start + i)[cols.clone()];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            })),
        )
    }

    /// Records a `1 x 1` value whose gradient with respect to `input` is
    /// `local_grad` (same shape as the input).
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Matrix) -> Var {
        assert_eq!(local_grad.shape(), self.value(input).shape());
        self.push(Matrix::scalar(value), Op::ScalarFn { input, local_grad })
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_rows());
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row).row(0);
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, r.len());
                    for i in 0..g.rows() {
                        for c in 0..r.len() {
                            ga.set(i, c, g.get(i, c) * r[c]);
                            gr.data_mut()[c] += g.get(i, c) * x.get(i, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(x.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SegmentMean { input, segments } => {
                    let x = self.value(*input);
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += v * inv;
                            }
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::RowNormalize { input, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let proj = dot(yr, g.row(r));
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (*o - yr[c] * proj) / n;
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut gx = g.clone();
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = self.attention_backward(cache, &g);
                    acc(&mut grads, cache.q, gq);
                    acc(&mut grads, cache.k, gk);
                    acc(&mut grads, cache.v, gv);
                }
                Op::ScalarFn { input, local_grad } => acc(&mut grads, *input, local_grad.scaled(g.item())),
            }
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn attention_backward(&self, cache: &AttentionCache, g: &Matrix) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let d = qm.cols();
        let dh = d / cache.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(qm.rows(), d);
        let mut gk = Matrix::zeros(km.rows(), d);
        let mut gv = Matrix::zeros(vm.rows(), d);
        let mut p_iter = cache.probs.iter();
        for &(start, len) in &cache.segments {
            for h in 0..cache.heads {
                let p = p_iter.next().expect("one probability block per segment and head");
                let cols = h * dh..(h + 1) * dh;
                // dP[i][j] = dO_i . V_j ; dV_j += P[i][j] dO_i
                let mut ds = Matrix::zeros(len, len);
                for i in 0..len {
                    let go = &g.row(start + i)[cols.clone()];
                    for j in 0..len {
                        let pij = p.get(i, j);
                        ds.set(i, j, dot(go, &vm.row(start + j)[cols.clone()]));
                        let gvj = &mut gv.row_mut(start + j)[cols.clone()];
                        for (o, x) in gvj.iter_mut().zip(go) {
                            *o += pij * x;
                        }
                    }
                    // softmax backward: dS = P * (dP - sum_j dP P)
                    let inner: f64 = (0..len).map(|j| ds.get(i, j) * p.get(i, j)).sum();
                    for j in 0..len {
                        ds.set(i, j, p.get(i, j) * (ds.get(i, j) - inner) * scale);
                    }
                }
                for i in 0..len {
                    for j in 0..len {
                        let s = ds.get(i, j);
                        if s == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            gq.data_mut()[(start + i) * d + c] += s * km.get(start + j, c);
                            gk.data_mut()[(start + j) * d + c] += s * qm.get(start + i, c);
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    /// Sums `out * weights` so every output entry gets a distinct gradient.
    fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let shape = tape.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::uniform(shape.0, shape.1, 1.0, &mut rng);
        let value = tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        tape.scalar_fn(out, value, w)
    }

    fn check_unary(build: &dyn Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(rows as u64 * 31 + cols as u64);
        let x = Matrix::uniform(rows, cols, 1.0, &mut rng);
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(m.clone());
            let out = build(&mut t, v);
            let s = weighted_sum(&mut t, out, 99);
            t.value(s).item()
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let s = weighted_sum(&mut t, out, 99);
        let grads = t.backward(s);
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x, &f), 1e-6);
    }

    #[test]
    fn elementwise_and_normalisation_gradients() {
        check_unary(&|t, v| t.tanh(v), 3, 4);
        check_unary(&|t, v| t.scale(v, -2.5), 2, 2);
        check_unary(&|t, v| t.row_normalize(v), 4, 3);
        check_unary(&|t, v| t.layer_norm(v, 1e-5), 3, 5);
        check_unary(&|t, v| t.segment_mean(v, &[(0, 2), (2, 3)]), 5, 3);
        check_unary(&|t, v| t.gather(v, &[2, 0, 2, 1]), 3, 2);
    }

    #[test]
    fn binary_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Matrix::uniform(4, 3, 1.0, &mut rng);
        let row = Matrix::uniform(1, 4, 1.0, &mut rng);
        let b2 = b.clone();
        check_unary(&move |t, v| {
            let bv = t.leaf(b2.clone());
            t.matmul(v, bv)
        }, 2, 4);
        let r2 = row.clone();
        check_unary(&move |t, v| {
            let rv = t.leaf(r2.clone());
            let a = t.add_row(v, rv);
            t.mul_row(a, rv)
        }, 3, 4);
        check_unary(&|t, v| {
            let sq = t.tanh(v);
            t.add(v, sq)
        }, 2, 3);
    }

    #[test]
    fn attention_gradients() {
        let segs = [(0, 3), (3, 2)];
        // Q, K and V all depend on the same input so every path is exercised.
        check_unary(&move |t, v| {
            let k = t.scale(v, 0.7);
            let q = t.tanh(v);
            t.attention(q, k, v, &segs, 2)
        }, 5, 4);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut t = Tape::new();
        let q = t.leaf(Matrix::zeros(3, 2));
        let v = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]));
        let out = t.attention(q, q, v, &[(0, 2), (2, 1)], 1);
        assert_eq!(t.value(out).to_rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![2.0, 2.0]]);
    }
}
