//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array. Operations append nodes in
//! evaluation order, so the node index is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. The op set is exactly what the
//! encoders, heads and losses need; shapes are checked with assertions because
//! callers validate user input before building a graph.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SegmentMean(Var, Vec<(usize, usize)>),
    RowNorm(Var),
    RowNormalize(Var),
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Attention probabilities of an attention node, ordered segment-major then head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_t inner dimensions");
        let out = va.dot(&vb.t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Adds a 1×C row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a single row");
        assert_eq!(vx.ncols(), vr.ncols(), "add_row widths");
        let out = vx + vr;
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with affine 1×C `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in vx.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over a packed `R × 3C` query/key/value
    /// matrix. Tokens only attend within their own `(start, len)` segment.
    pub fn attention(&mut self, qkv: Var, segments: Vec<(usize, usize)>, heads: usize) -> Var {
        let v = self.value(qkv);
        let (rows, three_c) = v.dim();
        assert_eq!(three_c % 3, 0, "attention expects packed q|k|v");
        let width = three_c / 3;
        assert_eq!(width % heads, 0, "width divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in &segments {
            assert!(start + len <= rows && len > 0, "attention segment out of range");
            for h in 0..heads {
                let q = v.slice(s![start..start + len, h * dh..(h + 1) * dh]);
                let k = v.slice(s![start..start + len, width + h * dh..width + (h + 1) * dh]);
                let val = v.slice(s![
                    start..start + len,
                    2 * width + h * dh..2 * width + (h + 1) * dh
                ]);
                let mut p = q.dot(&k.t()) * scale;
                for mut row in p.outer_iter_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![start..start + len, h * dh..(h + 1) * dh])
                    .assign(&p.dot(&val));
                probs.push(p);
            }
        }
        let ng = self.ng(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let out = vx.select(Axis(0), &idx);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts), ng)
    }

    /// Mean of each `(start, len)` block of rows; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Var {
        let vx = self.value(x);
        let mut out = Array2::zeros((segments.len(), vx.ncols()));
        for (i, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            let mean = vx
                .slice(s![start..start + len, ..])
                .sum_axis(Axis(0))
                / len as f64;
            out.row_mut(i).assign(&mean);
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean(x, segments), ng)
    }

    /// L2 norm of every row, as an N×1 column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx
            .map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .insert_axis(Axis(1));
        let ng = self.ng(x);
        self.push(out, Op::RowNorm(x), ng)
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.outer_iter_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RowNormalize(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.sum() / vx.len() as f64;
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x), ng)
    }

    /// Mean negative log-softmax at the labelled column of each row.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.nrows(), labels.len(), "one label per logits row");
        let mut probs = vl.clone();
        let mut loss = 0.0;
        for (mut row, &label) in probs.outer_iter_mut().zip(&labels) {
            assert!(label < row.len(), "label out of range");
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        loss /= labels.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar node. Gradients exist only for nodes that
    /// (transitively) depend on a leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g * *f),
            Op::Gelu(x) => {
                let mut d = self.value(*x).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv / cols * (cols * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let v = self.value(*qkv);
                let width = v.ncols() / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut d = Array2::zeros(v.dim());
                for (si, &(start, len)) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let rows = start..start + len;
                        let qc = h * dh..(h + 1) * dh;
                        let kc = width + h * dh..width + (h + 1) * dh;
                        let vc = 2 * width + h * dh..2 * width + (h + 1) * dh;
                        let q = v.slice(s![rows.clone(), qc.clone()]);
                        let k = v.slice(s![rows.clone(), kc.clone()]);
                        let val = v.slice(s![rows.clone(), vc.clone()]);
                        let go = g.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&val.t());
                        let mut ds = dp;
                        for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut drow).and(&prow).for_each(|dd, &pp| *dd = pp * (*dd - dot));
                        }
                        ds *= scale;
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        d.slice_mut(s![rows.clone(), qc]).assign(&dq);
                        d.slice_mut(s![rows.clone(), kc]).assign(&dk);
                        d.slice_mut(s![rows, vc]).assign(&dv);
                    }
                }
                self.accumulate(grads, *qkv, d);
            }
            Op::GatherRows(x, idx) => {
                if self.ng(*x) {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (out_row, &src) in idx.iter().enumerate() {
                        let mut target = d.row_mut(src);
                        target += &g.row(out_row);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::SegmentMean(x, segments) => {
                if self.ng(*x) {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (i, &(start, len)) in segments.iter().enumerate() {
                        let share = &g.row(i) / len as f64;
                        for r in start..start + len {
                            let mut target = d.row_mut(r);
                            target += &share;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::RowNorm(x) => {
                let vx = self.value(*x);
                let mut d = Array2::zeros(vx.dim());
                for (r, row) in vx.outer_iter().enumerate() {
                    let n = node.value[[r, 0]];
                    // Subgradient zero at the origin.
                    if n > 0.0 {
                        let f = g[[r, 0]] / n;
                        d.row_mut(r).assign(&(&row * f));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowNormalize(x) => {
                let vx = self.value(*x);
                let mut d = Array2::zeros(vx.dim());
                for r in 0..vx.nrows() {
                    let n = vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        let y = node.value.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        d.row_mut(r).assign(&((&gr - &(&y * dot)) / n));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let share = g[[0, 0]] / vx.len() as f64;
                self.accumulate(grads, *x, Array2::from_elem(vx.dim(), share));
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, Array2::from_elem(vx.dim(), g[[0, 0]]));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[[r, label]] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                out[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        out
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&x, &|xx| {
            let mut t = Tape::new();
            let v = t.leaf(xx.clone(), true);
            let l = build(&mut t, v);
            t.scalar(l)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3);
        check(
            &|t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.matmul(x, wv);
                let y = t.add_row(y, bv);
                let y = t.gelu(y);
                t.sum(y)
            },
            random(&mut rng, 5, 4),
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        let mix = random(&mut rng, 6, 6);
        check(
            &|t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let m = t.constant(mix.clone());
                let y = t.layer_norm(x, g, b);
                let y = t.matmul(y, m);
                let y = t.gelu(y);
                t.mean(y)
            },
            random(&mut rng, 3, 6),
        );
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = random(&mut rng, 4, 4);
        check(
            &|t, x| {
                let m = t.constant(mix.clone());
                let a = t.attention(x, vec![(0, 3), (3, 2)], 2);
                let y = t.matmul(a, m);
                let y = t.gelu(y);
                t.sum(y)
            },
            random(&mut rng, 5, 12),
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.constant(random(&mut rng, 6, 12));
        let a = t.attention(x, vec![(0, 4), (4, 2)], 2);
        let probs = t.attention_probs(a).unwrap();
        assert_eq!(probs.len(), 4);
        for p in probs {
            for row in p.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gather_concat_segment_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = random(&mut rng, 2, 3);
        let mix = random(&mut rng, 3, 3);
        check(
            &|t, x| {
                let o = t.leaf(other.clone(), false);
                let c = t.concat_rows(vec![x, o]);
                let gth = t.gather_rows(c, vec![0, 4, 1, 1, 3, 2]);
                let m = t.constant(mix.clone());
                let y = t.matmul(gth, m);
                let y = t.gelu(y);
                let y = t.segment_mean(y, vec![(0, 2), (2, 4)]);
                let y = t.gelu(y);
                t.sum(y)
            },
            random(&mut rng, 3, 3),
        );
    }

    #[test]
    fn norms_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = random(&mut rng, 4, 5);
        check(
            &|t, x| {
                let tv = t.constant(text.clone());
                let xn = t.row_normalize(x);
                let tn = t.row_normalize(tv);
                let logits = t.matmul_t(xn, tn);
                let logits = t.scale(logits, 7.0);
                let ce = t.cross_entropy(logits, vec![1, 3, 0]);
                let norms = t.row_norm(x);
                let fd = t.mean(norms);
                let fd = t.scale(fd, 0.5);
                t.add(ce, fd)
            },
            random(&mut rng, 3, 5),
        );
    }

    #[test]
    fn row_norm_at_zero_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((2, 3)), true);
        let n = t.row_norm(x);
        let l = t.sum(n);
        let grads = t.backward(l);
        assert!(grads.get(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Array2::ones((2, 2)));
        let b = t.leaf(Array2::ones((2, 2)), true);
        let c = t.matmul(a, b);
        let l = t.sum(c);
        let grads = t.backward(l);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
