//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with
//! respect to every node. Attention, layer norm and the contrastive loss are
//! fused ops with hand-written adjoints.

use ndarray::{s, Array2, ArrayView1, Axis};

pub type Mat = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;
/// Norm floor used inside cosine similarity.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Slot of this node in the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// One contrastive term: prediction row `pred_row` of head `head` scored
/// against target row `pos_row` and the negative set `neg_set`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NceTerm {
    pub head: usize,
    pub pred_row: usize,
    pub pos_row: usize,
    pub neg_set: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Mask(Var, Mat),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        n_heads: usize,
        probs: Vec<Mat>,
    },
    InfoNce {
        preds: Vec<Var>,
        targets: Var,
        negatives: Var,
        terms: Vec<NceTerm>,
        neg_sets: Vec<Vec<usize>>,
        temperature: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Mat) -> Var {
        let out = self.value(a) * &mask;
        self.push(out, Op::Mask(a, mask))
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let out = self.value(src).select(Axis(0), &idx);
        self.push(out, Op::Gather(src, idx))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head causal self-attention applied independently to each
    /// `(start, len)` row segment of the stacked `q`, `k`, `v`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        n_heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        let dh = width / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * n_heads);
        for &(start, len) in segments {
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![start..start + len, cols.clone()]);
                let ks = kv.slice(s![start..start + len, cols.clone()]);
                let vs = vv.slice(s![start..start + len, cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let max = row
                        .slice(s![..=i])
                        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut z = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if j <= i {
                            *x = (*x - max).exp();
                            z += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![start..start + len, cols])
                    .assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
        )
    }

    /// Mean InfoNCE loss over `terms` with cosine similarity; returns a 1x1
    /// node.
    pub fn info_nce(
        &mut self,
        preds: &[Var],
        targets: Var,
        negatives: Var,
        terms: Vec<NceTerm>,
        neg_sets: Vec<Vec<usize>>,
        temperature: f64,
    ) -> Var {
        let mut total = 0.0;
        for t in &terms {
            let p = self.value(preds[t.head]).row(t.pred_row);
            let pos = self.value(targets).row(t.pos_row);
            let negs = self.value(negatives);
            let (loss, _) = nce_term(
                p,
                pos,
                neg_sets[t.neg_set].iter().map(|&r| negs.row(r)),
                temperature,
                false,
            );
            total += loss;
        }
        let mean = if terms.is_empty() {
            0.0
        } else {
            total / terms.len() as f64
        };
        self.push(
            Mat::from_elem((1, 1), mean),
            Op::InfoNce {
                preds: preds.to_vec(),
                targets,
                negatives,
                terms,
                neg_sets,
                temperature,
            },
        )
    }

    /// Gradients of scalar node `root` with respect to every node; `None`
    /// for nodes the root does not depend on.
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&self.nodes[i], &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Mask(a, mask) => acc(*a, g * mask),
            Op::Gather(src, idx) => {
                let mut d = Mat::zeros(self.value(*src).raw_dim());
                for (row, &r) in idx.iter().enumerate() {
                    let mut target = d.row_mut(r);
                    target += &g.row(row);
                }
                acc(*src, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let n = xhat.ncols() as f64;
                let dxhat = g * gam;
                let mut dx = Mat::zeros(xhat.raw_dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    let is = inv_std[r];
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = is / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                n_heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qv.ncols() / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.raw_dim());
                let mut dk = Mat::zeros(kv.raw_dim());
                let mut dv = Mat::zeros(vv.raw_dim());
                let mut p_iter = probs.iter();
                for &(start, len) in segments {
                    for h in 0..*n_heads {
                        let p = p_iter.next().unwrap();
                        let rows = start..start + len;
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = p * &dp;
                        for (mut srow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = srow.sum();
                            srow.zip_mut_with(&prow, |sv, &pv| *sv -= pv * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()])
                            .assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::InfoNce {
                preds,
                targets,
                negatives,
                terms,
                neg_sets,
                temperature,
            } => {
                let scale = g[[0, 0]] / terms.len().max(1) as f64;
                let mut dpreds: Vec<Mat> = preds
                    .iter()
                    .map(|p| Mat::zeros(self.value(*p).raw_dim()))
                    .collect();
                let tv = self.value(*targets);
                let nv = self.value(*negatives);
                let mut dt = Mat::zeros(tv.raw_dim());
                let mut dn = Mat::zeros(nv.raw_dim());
                for t in terms {
                    let set = &neg_sets[t.neg_set];
                    let p = self.value(preds[t.head]).row(t.pred_row);
                    let (_, gr) = nce_term(
                        p,
                        tv.row(t.pos_row),
                        set.iter().map(|&r| nv.row(r)),
                        *temperature,
                        true,
                    );
                    let gr = gr.unwrap();
                    dpreds[t.head]
                        .row_mut(t.pred_row)
                        .scaled_add(scale, &gr.pred);
                    dt.row_mut(t.pos_row).scaled_add(scale, &gr.positive);
                    for (&r, gn) in set.iter().zip(&gr.negatives) {
                        dn.row_mut(r).scaled_add(scale, gn);
                    }
                }
                for (p, d) in preds.iter().zip(dpreds) {
                    acc(*p, d);
                }
                acc(*targets, dt);
                acc(*negatives, dn);
            }
        }
    }
}

pub struct NceGrads {
    pub pred: ndarray::Array1<f64>,
    pub positive: ndarray::Array1<f64>,
    pub negatives: Vec<ndarray::Array1<f64>>,
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grads(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    want_grads: bool,
) -> (f64, Option<(ndarray::Array1<f64>, ndarray::Array1<f64>)>) {
    let na = a.dot(&a).sqrt().max(COS_EPS);
    let nb = b.dot(&b).sqrt().max(COS_EPS);
    let c = a.dot(&b) / (na * nb);
    if !want_grads {
        return (c, None);
    }
    let ga = &b / (na * nb) - &a * (c / (na * na));
    let gb = &a / (na * nb) - &b * (c / (nb * nb));
    (c, Some((ga, gb)))
}

/// `-log softmax_0([cos(p,pos), cos(p,n_1), ...] / temperature)` and,
/// optionally, its gradients.
pub fn nce_term<'a>(
    pred: ArrayView1<'a, f64>,
    positive: ArrayView1<'a, f64>,
    negatives: impl Iterator<Item = ArrayView1<'a, f64>>,
    temperature: f64,
    want_grads: bool,
) -> (f64, Option<NceGrads>) {
    let (c0, g0) = cosine_with_grads(pred, positive, want_grads);
    let mut logits = vec![c0 / temperature];
    let mut neg_grads = Vec::new();
    for n in negatives {
        let (c, g) = cosine_with_grads(pred, n, want_grads);
        logits.push(c / temperature);
        neg_grads.push(g);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = max + z.ln() - logits[0];
    if !want_grads {
        return (loss, None);
    }
    let soft: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let (gp0, gpos) = g0.unwrap();
    let w0 = (soft[0] - 1.0) / temperature;
    let mut gpred = &gp0 * w0;
    let positive_grad = &gpos * w0;
    let mut negatives = Vec::with_capacity(neg_grads.len());
    for (k, g) in neg_grads.into_iter().enumerate() {
        let (gp, gn) = g.unwrap();
        let w = soft[k + 1] / temperature;
        gpred.scaled_add(w, &gp);
        negatives.push(gn * w);
    }
    (
        loss,
        Some(NceGrads {
            pred: gpred,
            positive: positive_grad,
            negatives,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of leaf `which`.
    fn check_grad(build: impl Fn(&mut Tape, &[Mat]) -> Var, inputs: Vec<Mat>, tol: f64) {
        let mut tape = Tape::new();
        let root = build(&mut tape, &inputs);
        let grads = tape.backward(root);
        let eps = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads[which]
                .clone()
                .unwrap_or_else(|| Mat::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    let flat = perturbed[which].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    let mut t = Tape::new();
                    let r = build(&mut t, &perturbed);
                    t.scalar(r)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(
                    err < tol || (a - numeric).abs() < 1e-8,
                    "input {which} idx {idx}: {a} vs {numeric}"
                );
            }
        }
    }

    /// Reduces any matrix to a scalar through a fixed random projection so
    /// every output entry contributes.
    fn reduce(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = tape.value(x).dim();
        let mut rr = rng::stream(seed, 99);
        let w = tape.leaf(rand_mat(&mut rr, c, 1));
        let ones = tape.leaf(Mat::from_elem((1, r), 1.0 / r as f64));
        let y = tape.matmul(x, w);
        tape.matmul(ones, y)
    }

    #[test]
    fn linear_relu_layernorm_gradients() {
        let mut r = rng::stream(1, 0);
        let inputs = vec![
            rand_mat(&mut r, 5, 4),
            rand_mat(&mut r, 4, 6),
            rand_mat(&mut r, 1, 6),
            rand_mat(&mut r, 1, 6),
            rand_mat(&mut r, 1, 6),
        ];
        check_grad(
            |t, m| {
                let x = t.leaf(m[0].clone());
                let w = t.leaf(m[1].clone());
                let b = t.leaf(m[2].clone());
                let g = t.leaf(m[3].clone());
                let be = t.leaf(m[4].clone());
                let h = t.linear(x, w, b);
                let n = t.layer_norm(h, g, be);
                let a = t.relu(n);
                let gathered = t.gather_rows(a, vec![0, 2, 2, 4]);
                reduce(t, gathered, 3)
            },
            inputs,
            1e-5,
        );
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng::stream(2, 0);
        let inputs = vec![
            rand_mat(&mut r, 7, 4),
            rand_mat(&mut r, 7, 4),
            rand_mat(&mut r, 7, 4),
        ];
        check_grad(
            |t, m| {
                let q = t.leaf(m[0].clone());
                let k = t.leaf(m[1].clone());
                let v = t.leaf(m[2].clone());
                let o = t.causal_attention(q, k, v, &[(0, 3), (3, 4)], 2);
                reduce(t, o, 4)
            },
            inputs,
            1e-5,
        );
    }

    #[test]
    fn info_nce_gradients() {
        let mut r = rng::stream(3, 0);
        let inputs = vec![
            rand_mat(&mut r, 4, 5),
            rand_mat(&mut r, 4, 5),
            rand_mat(&mut r, 6, 5),
        ];
        check_grad(
            |t, m| {
                let p = t.leaf(m[0].clone());
                let p2 = t.leaf(m[1].clone());
                let tg = t.leaf(m[2].clone());
                let terms = vec![
                    NceTerm {
                        head: 0,
                        pred_row: 0,
                        pos_row: 1,
                        neg_set: 0,
                    },
                    NceTerm {
                        head: 1,
                        pred_row: 3,
                        pos_row: 2,
                        neg_set: 1,
                    },
                    NceTerm {
                        head: 0,
                        pred_row: 2,
                        pos_row: 5,
                        neg_set: 1,
                    },
                ];
                t.info_nce(
                    &[p, p2],
                    tg,
                    tg,
                    terms,
                    vec![vec![3, 4, 5], vec![0, 1]],
                    0.5,
                )
            },
            inputs,
            1e-5,
        );
    }

    #[test]
    fn attention_is_causal() {
        let mut r = rng::stream(4, 0);
        let q = rand_mat(&mut r, 5, 4);
        let k = rand_mat(&mut r, 5, 4);
        let mut v = rand_mat(&mut r, 5, 4);
        let run = |v: &Mat| {
            let mut t = Tape::new();
            let (a, b, c) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let o = t.causal_attention(a, b, c, &[(0, 5)], 2);
            t.value(o).clone()
        };
        let before = run(&v);
        v.row_mut(4).fill(9.0);
        let after = run(&v);
        assert_eq!(before.slice(s![..4, ..]), after.slice(s![..4, ..]));
    }
}
