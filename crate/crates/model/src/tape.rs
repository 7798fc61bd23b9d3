//! Reverse-mode autodiff over a per-sample computation tape.
//!
//! Ops are coarse (affine, layer norm, multi-head attention, cross entropy)
//! and cache whatever their backward pass needs. Parameters are referenced by
//! id and their gradients accumulate into a [`Grads`] buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Grads, ParamId, Parameters};
use crate::tensor::{gelu, gelu_grad, gemm, layer_norm, log_sum_exp, Mat};

pub type NodeId = usize;

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyMask {
    Full,
    /// Half-open key range `[lo, hi)` per query row.
    Ranges(Vec<(usize, usize)>),
    /// Row-major `queries × keys` matrix, `true` = allowed.
    Dense { keys: usize, allowed: Vec<bool> },
}

impl KeyMask {
    pub fn causal(n: usize) -> Self {
        KeyMask::Ranges((0..n).map(|i| (0, i + 1)).collect())
    }

    pub fn allows(&self, i: usize, j: usize, keys: usize) -> bool {
        match self {
            KeyMask::Full => j < keys,
            KeyMask::Ranges(r) => r[i].0 <= j && j < r[i].1,
            KeyMask::Dense { keys: k, allowed } => allowed[i * k + j],
        }
    }

    /// Converts a boolean mask, using ranges when every row is contiguous.
    pub fn from_spec(spec: &worldkit_core::sos::MaskSpec) -> Self {
        let n = spec.size();
        let mut ranges = Vec::with_capacity(n);
        for i in 0..n {
            let row = spec.row(i);
            let lo = row.iter().position(|&b| b);
            let hi = row.iter().rposition(|&b| b);
            match (lo, hi) {
                (Some(lo), Some(hi)) if row[lo..=hi].iter().all(|&b| b) => ranges.push((lo, hi + 1)),
                _ => {
                    return KeyMask::Dense {
                        keys: n,
                        allowed: (0..n).flat_map(|i| spec.row(i).to_vec()).collect(),
                    }
                }
            }
        }
        KeyMask::Ranges(ranges)
    }
}

fn head_cols(x: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(x.rows, dh);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_cols(dst: &mut Mat, src: &Mat, h: usize, dh: usize) {
    for i in 0..src.rows {
        let d = &mut dst.row_mut(i)[h * dh..(h + 1) * dh];
        for (a, b) in d.iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

/// Multi-head scaled dot-product attention. `q` is `n × d`, `k` and `v` are
/// `m × d`. Disallowed keys get probability exactly zero. Returns the
/// `n × d` output and the per-head probability matrices.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, mask: &KeyMask) -> (Mat, Vec<Mat>) {
    let (n, d) = q.shape();
    let m = k.rows;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_cols(q, h, dh);
        let kh = head_cols(k, h, dh);
        let vh = head_cols(v, h, dh);
        let mut s = Mat::zeros(n, m);
        gemm(scale, &qh, false, &kh, true, 0.0, &mut s);
        for i in 0..n {
            let row = s.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, x) in row.iter().enumerate() {
                if mask.allows(i, j, m) && *x > max {
                    max = *x;
                }
            }
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if mask.allows(i, j, m) {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            if sum > 0.0 {
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
        let mut oh = Mat::zeros(n, dh);
        gemm(1.0, &s, false, &vh, false, 0.0, &mut oh);
        add_head_cols(&mut out, &oh, h, dh);
        probs.push(s);
    }
    (out, probs)
}

/// `x · W + b`.
pub fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = Mat::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        y.row_mut(i).copy_from_slice(&b.data);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut y);
    y
}

enum Op {
    Leaf,
    Embed { table: ParamId, ids: Vec<usize> },
    Affine { x: NodeId, w: ParamId, b: ParamId },
    Add(NodeId, NodeId),
    LayerNorm { x: NodeId, g: ParamId, b: ParamId, xhat: Mat, rstd: Vec<f64> },
    Gelu(NodeId),
    Dropout { x: NodeId, keep: Vec<f64> },
    Attend { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Mat> },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Mat },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// A forward computation recorded for one backward pass.
pub struct Tape<'p> {
    params: &'p Parameters,
    nodes: Vec<Node>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Tape<'p> {
    /// Inference tape: dropout off.
    pub fn new(params: &'p Parameters) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training tape with dropout rate `p` drawn from `rng`.
    pub fn training(params: &'p Parameters, p: f64, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout: p,
            rng: Some(rng),
        }
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Rows of a parameter table selected by `ids`.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn affine(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let y = affine(self.value(x), self.params.get(w), self.params.get(b));
        self.push(y, Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn layer_norm(&mut self, x: NodeId, g: ParamId, b: ParamId) -> NodeId {
        let (y, xhat, rstd) = layer_norm(self.value(x), &self.params.get(g).data, &self.params.get(b).data);
        self.push(y, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Mat::from_vec(v.rows, v.cols, v.data.iter().map(|&a| gelu(a)).collect());
        self.push(y, Op::Gelu(x))
    }

    /// Inverted dropout; the identity on inference tapes.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let n = self.nodes[x].value.len();
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let v = &self.nodes[x].value;
        let y = Mat::from_vec(v.rows, v.cols, v.data.iter().zip(&keep).map(|(a, k)| a * k).collect());
        self.push(y, Op::Dropout { x, keep })
    }

    pub fn attend(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &KeyMask) -> NodeId {
        let (out, probs) = attend(self.value(q), self.value(k), self.value(v), heads, mask);
        self.push(out, Op::Attend { q, k, v, heads, probs })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Mat::concat_rows(&mats);
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.value(x).slice_rows(start, len);
        self.push(y, Op::Slice { x, start })
    }

    /// `Σ_i w_i · −log softmax(logits_i)[targets_i]`, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per logit row");
        assert_eq!(weights.len(), targets.len());
        let mut probs = Mat::zeros(l.rows, l.cols);
        let mut loss = 0.0;
        for i in 0..l.rows {
            let row = l.row(i);
            let lse = log_sum_exp(row);
            loss += weights[i] * (lse - row[targets[i]]);
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v: f64 = terms.iter().map(|&(n, w)| w * self.value(n).data[0]).sum();
        self.push(Mat::scalar(v), Op::WeightedSum(terms.to_vec()))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    /// Back-propagates from the scalar node `root`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut Grads) {
        let mut g: Vec<Option<Mat>> = (0..=root).map(|_| None).collect();
        g[root] = Some(Mat::scalar(1.0));
        let acc = |g: &mut Vec<Option<Mat>>, id: NodeId, m: Mat| match &mut g[id] {
            Some(e) => e.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        for id in (0..=root).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Embed { table, ids } => {
                    let gt = grads.get_mut(*table);
                    for (i, &r) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.params.get(*w);
                    gemm(1.0, xv, true, &dy, false, 1.0, grads.get_mut(*w));
                    let gb = grads.get_mut(*b);
                    for i in 0..dy.rows {
                        for (a, v) in gb.data.iter_mut().zip(dy.row(i)) {
                            *a += v;
                        }
                    }
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm(1.0, &dy, false, wv, true, 0.0, &mut dx);
                    acc(&mut g, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, dy.clone());
                    acc(&mut g, *b, dy);
                }
                Op::LayerNorm { x, g: gamma, b, xhat, rstd } => {
                    let gv = &self.params.get(*gamma).data;
                    let d = dy.cols;
                    let gb = grads.get_mut(*b);
                    for i in 0..dy.rows {
                        for (a, v) in gb.data.iter_mut().zip(dy.row(i)) {
                            *a += v;
                        }
                    }
                    let mut dx = Mat::zeros(dy.rows, d);
                    let gg = grads.get_mut(*gamma);
                    for i in 0..dy.rows {
                        let dyr = dy.row(i);
                        let xh = xhat.row(i);
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            gg.data[j] += dyr[j] * xh[j];
                            dxhat[j] = dyr[j] * gv[j];
                        }
                        let mean_d: f64 = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = dx.row_mut(i);
                        for j in 0..d {
                            out[j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(
                        xv.rows,
                        xv.cols,
                        xv.data.iter().zip(&dy.data).map(|(a, d)| gelu_grad(*a) * d).collect(),
                    );
                    acc(&mut g, *x, dx);
                }
                Op::Dropout { x, keep } => {
                    let dx = Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(keep).map(|(a, k)| a * k).collect());
                    acc(&mut g, *x, dx);
                }
                Op::Attend { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.rows, d);
                    let mut dk = Mat::zeros(kv.rows, d);
                    let mut dv = Mat::zeros(vv.rows, d);
                    for (h, p) in probs.iter().enumerate() {
                        let qh = head_cols(qv, h, dh);
                        let kh = head_cols(kv, h, dh);
                        let vh = head_cols(vv, h, dh);
                        let doh = head_cols(&dy, h, dh);
                        let mut dvh = Mat::zeros(vv.rows, dh);
                        gemm(1.0, p, true, &doh, false, 0.0, &mut dvh);
                        let mut dp = Mat::zeros(p.rows, p.cols);
                        gemm(1.0, &doh, false, &vh, true, 0.0, &mut dp);
                        // Softmax backward, row by row.
                        for i in 0..p.rows {
                            let pr = p.row(i);
                            let dpr = dp.row_mut(i);
                            let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pv) in dpr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        let mut dqh = Mat::zeros(qv.rows, dh);
                        gemm(scale, &dp, false, &kh, false, 0.0, &mut dqh);
                        let mut dkh = Mat::zeros(kv.rows, dh);
                        gemm(scale, &dp, true, &qh, false, 0.0, &mut dkh);
                        add_head_cols(&mut dq, &dqh, h, dh);
                        add_head_cols(&mut dk, &dkh, h, dh);
                        add_head_cols(&mut dv, &dvh, h, dh);
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        acc(&mut g, p, dy.slice_rows(start, rows));
                        start += rows;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    let c = xv.cols;
                    dx.data[start * c..start * c + dy.len()].copy_from_slice(&dy.data);
                    acc(&mut g, *x, dx);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let s = dy.data[0];
                    let mut dl = probs.clone();
                    for i in 0..dl.rows {
                        let w = s * weights[i];
                        let row = dl.row_mut(i);
                        row[targets[i]] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    acc(&mut g, *logits, dl);
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        acc(&mut g, n, Mat::scalar(w * dy.data[0]));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut b = ParamBuilder::new(seed);
        b.add("x", rows, cols, Init::Normal(1.0));
        b.finish().get(0).clone()
    }

    // Central-difference check of d(loss)/d(param) for every scalar of
    // every parameter in a small graph built by `f`.
    fn check<F>(mut params: Parameters, f: F)
    where
        F: Fn(&mut Tape) -> NodeId,
    {
        let mut grads = Grads::zeros_like(&params);
        {
            let mut t = Tape::new(&params);
            let root = f(&mut t);
            t.backward(root, &mut grads);
        }
        let eval = |p: &Parameters| {
            let mut t = Tape::new(p);
            let r = f(&mut t);
            t.scalar(r)
        };
        let h = 1e-6;
        for id in 0..params.len() {
            for k in 0..params.get(id).len() {
                let orig = params.get(id).data[k];
                params.get_mut(id).data[k] = orig + h;
                let up = eval(&params);
                params.get_mut(id).data[k] = orig - h;
                let down = eval(&params);
                params.get_mut(id).data[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors[id].data[k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: analytic {an} numeric {fd}", params.name(id));
            }
        }
    }

    #[test]
    fn affine_layernorm_gelu_gradients() {
        let mut b = ParamBuilder::new(1);
        let x = b.add("x", 3, 4, Init::Normal(1.0));
        let w = b.add("w", 4, 5, Init::Normal(0.5));
        let bias = b.add("b", 1, 5, Init::Normal(0.5));
        let g = b.add("g", 1, 5, Init::Normal(1.0));
        let beta = b.add("beta", 1, 5, Init::Normal(0.5));
        let out = b.add("out", 5, 6, Init::Normal(0.5));
        let ob = b.add("ob", 1, 6, Init::Zeros);
        check(b.finish(), move |t| {
            let xin = t.embed(x, &[0, 1, 2]);
            let h = t.affine(xin, w, bias);
            let h = t.layer_norm(h, g, beta);
            let h = t.gelu(h);
            let l = t.affine(h, out, ob);
            t.cross_entropy(l, &[1, 5, 0], &[1.0, 0.5, 2.0])
        });
    }

    #[test]
    fn attention_gradients_with_masks() {
        for mask in [
            KeyMask::Full,
            KeyMask::causal(4),
            KeyMask::Ranges(vec![(0, 1), (0, 2), (2, 3), (2, 4)]),
        ] {
            let mut b = ParamBuilder::new(2);
            let x = b.add("x", 4, 4, Init::Normal(1.0));
            let mem = b.add("mem", 4, 4, Init::Normal(1.0));
            let wq = b.add("wq", 4, 4, Init::Normal(0.5));
            let bq = b.add("bq", 1, 4, Init::Normal(0.1));
            let out = b.add("out", 4, 3, Init::Normal(0.5));
            let ob = b.add("ob", 1, 3, Init::Zeros);
            check(b.finish(), move |t| {
                let xi = t.embed(x, &[0, 1, 2, 3]);
                let mi = t.embed(mem, &[3, 2, 1, 0]);
                let q = t.affine(xi, wq, bq);
                let a = t.attend(q, mi, xi, 2, &mask);
                let s = t.add(a, xi);
                let l = t.affine(s, out, ob);
                t.cross_entropy(l, &[0, 1, 2, 0], &[1.0; 4])
            });
        }
    }

    #[test]
    fn concat_slice_and_sums() {
        let mut b = ParamBuilder::new(3);
        let x = b.add("x", 2, 3, Init::Normal(1.0));
        let y = b.add("y", 3, 3, Init::Normal(1.0));
        check(b.finish(), move |t| {
            let a = t.embed(x, &[0, 1]);
            let c = t.embed(y, &[0, 1, 2]);
            let cat = t.concat(&[a, c]);
            let s = t.slice_rows(cat, 1, 3);
            let l1 = t.cross_entropy(s, &[0, 1, 2], &[1.0; 3]);
            let l2 = t.cross_entropy(cat, &[2, 2, 2, 2, 2], &[1.0; 5]);
            t.weighted_sum(&[(l1, 0.3), (l2, 1.7)])
        });
    }

    #[test]
    fn masked_keys_get_zero_probability() {
        let q = rand_mat(3, 4, 5);
        let k = rand_mat(3, 4, 6);
        let (_, probs) = attend(&q, &k, &k, 2, &KeyMask::causal(3));
        for p in probs {
            assert_eq!(p.get(0, 1), 0.0);
            assert_eq!(p.get(0, 2), 0.0);
            assert_eq!(p.get(1, 2), 0.0);
            assert!((p.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_from_spec_uses_ranges_when_contiguous() {
        use worldkit_core::sos::{sos_attention_mask, MaskSpec, SegmentLayout};
        let spec = sos_attention_mask(&SegmentLayout::framed(&[2, 1]));
        let m = KeyMask::from_spec(&spec);
        assert_eq!(m, KeyMask::Ranges(vec![(0, 1), (0, 2), (2, 3), (3, 4), (4, 5)]));
        let holey = MaskSpec::from_fn(3, |p, q| q == 0 || q == p);
        assert!(matches!(KeyMask::from_spec(&holey), KeyMask::Dense { .. }));
        for p in 0..3 {
            for q in 0..3 {
                assert_eq!(KeyMask::from_spec(&holey).allows(p, q, 3), holey.allows(p, q));
            }
        }
    }
}
