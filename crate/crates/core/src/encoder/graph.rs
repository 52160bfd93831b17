//! A small reverse-mode tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. Parameter nodes refer into
//! a shared [`ParamStore`] instead of copying values.

use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<F> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Im2col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    RelBias {
        scores: Var,
        table: Var,
        head: usize,
        max_dist: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MulConst(Var, Vec<F>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Mat<F>>,
}

pub struct Graph<F: Real> {
    params: Arc<ParamStore<F>>,
    nodes: Vec<Node<F>>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new(params: Arc<ParamStore<F>>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &Arc<ParamStore<F>> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => self.params.get(*i),
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op<F>, value: Option<Mat<F>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Mat<F>) -> Var {
        self.push(Op::Input, Some(m))
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.push(Op::Param(index), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = Mat::matmul(self.value(a), false, self.value(b), false);
        self.push(Op::MatMul(a, b), Some(out))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = Mat::matmul(self.value(a), false, self.value(b), true);
        self.push(Op::MatMulT(a, b), Some(out))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.len(), self.value(x).cols, "bias width mismatch");
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            out.row_mut(r).iter_mut().zip(&b.data).for_each(|(o, b)| *o += *b);
        }
        self.push(Op::AddRow(x, bias), Some(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(Op::Scale(x, s), Some(out))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = *v * sigmoid(*v));
        self.push(Op::Silu(x), Some(out))
    }

    /// Splits columns in half: `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xin = self.value(x);
        assert!(xin.cols % 2 == 0, "GLU needs an even width");
        let h = xin.cols / 2;
        let mut out = Mat::zeros(xin.rows, h);
        for r in 0..xin.rows {
            let (a, b) = xin.row(r).split_at(h);
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(a).zip(b) {
                *o = *a * sigmoid(*b);
            }
        }
        self.push(Op::Glu(x), Some(out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xin = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = F::of(xin.cols as f64);
        let mut xhat = Mat::zeros(xin.rows, xin.cols);
        let mut out = Mat::zeros(xin.rows, xin.cols);
        let mut rstd = Vec::with_capacity(xin.rows);
        for r in 0..xin.rows {
            let row = xin.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let xh = (*v - mean) * rs;
                xhat.data[r * xin.cols + j] = xh;
                out.data[r * xin.cols + j] = xh * g.data[j] + b.data[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Some(out),
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        self.push(Op::Softmax(x), Some(out))
    }

    /// Unfolds `x` (`T × C`) into rows of `kernel` consecutive frames
    /// (`out_rows × kernel*C`); out-of-range taps read zero.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad_left: usize, out_rows: usize) -> Var {
        let xin = self.value(x);
        let c = xin.cols;
        let mut out = Mat::zeros(out_rows, kernel * c);
        for t in 0..out_rows {
            for k in 0..kernel {
                let src = (t * stride + k).checked_sub(pad_left);
                if let Some(s) = src.filter(|&s| s < xin.rows) {
                    out.data[t * kernel * c + k * c..t * kernel * c + (k + 1) * c].copy_from_slice(xin.row(s));
                }
            }
        }
        self.push(
            Op::Im2col {
                x,
                kernel,
                stride,
                pad_left,
            },
            Some(out),
        )
    }

    /// Per-channel convolution with `w` (`K × C`, K odd), zero "same" padding.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let (xin, wv) = (self.value(x), self.value(w));
        let (t_len, c, k) = (xin.rows, xin.cols, wv.rows);
        assert_eq!(wv.cols, c, "depthwise kernel width mismatch");
        let half = k / 2;
        let mut out = Mat::zeros(t_len, c);
        for t in 0..t_len {
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(half).filter(|&s| s < t_len) else {
                    continue;
                };
                let (src, wr) = (xin.row(s), wv.row(j));
                for ((o, x), w) in out.data[t * c..(t + 1) * c].iter_mut().zip(src).zip(wr) {
                    *o += *x * *w;
                }
            }
        }
        self.push(Op::DepthwiseConv { x, w }, Some(out))
    }

    /// Adds `table[head, clip(j - i) + max_dist]` to square attention scores.
    pub fn rel_bias(&mut self, scores: Var, table: Var, head: usize, max_dist: usize) -> Var {
        let tab = self.value(table);
        let width = 2 * max_dist + 1;
        assert_eq!(tab.cols, width, "relative bias table width mismatch");
        let mut out = self.value(scores).clone();
        let t = out.rows;
        for i in 0..t {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += tab.data[head * width + rel_index(i, j, max_dist)];
            }
        }
        self.push(
            Op::RelBias {
                scores,
                table,
                head,
                max_dist,
            },
            Some(out),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xin = self.value(x);
        let mut out = Mat::zeros(xin.rows, len);
        for r in 0..xin.rows {
            out.row_mut(r).copy_from_slice(&xin.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, Some(out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), Some(out))
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&mut self, x: Var, mask: Vec<F>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.len(), "mask size mismatch");
        out.data.iter_mut().zip(&mask).for_each(|(o, m)| *o *= *m);
        self.push(Op::MulConst(x, mask), Some(out))
    }

    /// Runs the backward sweep from `seeds` and returns gradients for every
    /// parameter of the store (zero where a parameter was unused).
    pub fn backward(&self, seeds: &[(Var, Mat<F>)]) -> Vec<Mat<F>> {
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g);
        }
        let mut param_grads: Vec<Mat<F>> = self
            .params
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i].add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate_with(&mut grads, *a, av.rows, av.cols, |g| Mat::gemm_into(&dy, false, bv, true, F::one(), g));
                    accumulate_with(&mut grads, *b, bv.rows, bv.cols, |g| Mat::gemm_into(av, true, &dy, false, F::one(), g));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate_with(&mut grads, *a, av.rows, av.cols, |g| Mat::gemm_into(&dy, false, bv, false, F::one(), g));
                    accumulate_with(&mut grads, *b, bv.rows, bv.cols, |g| Mat::gemm_into(&dy, true, av, false, F::one(), g));
                }
                Op::AddRow(x, bias) => {
                    let bv = self.value(*bias);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for r in 0..dy.rows {
                        db.data.iter_mut().zip(dy.row(r)).for_each(|(a, b)| *a += *b);
                    }
                    accumulate(&mut grads, *bias, &db);
                    accumulate_owned(&mut grads, *x, dy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, &dy);
                    accumulate_owned(&mut grads, *a, dy);
                }
                Op::Scale(x, s) => {
                    let mut g = dy;
                    g.data.iter_mut().for_each(|v| *v *= *s);
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut g = dy;
                    for (g, x) in g.data.iter_mut().zip(&xv.data) {
                        let s = sigmoid(*x);
                        *g *= s * (F::one() + *x * (F::one() - s));
                    }
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::Glu(x) => {
                    let xv = self.value(*x);
                    let h = xv.cols / 2;
                    let mut g = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let (a, b) = xv.row(r).split_at(h);
                        let d = dy.row(r);
                        let gr = &mut g.data[r * xv.cols..(r + 1) * xv.cols];
                        for j in 0..h {
                            let s = sigmoid(b[j]);
                            gr[j] = d[j] * s;
                            gr[h + j] = d[j] * a[j] * s * (F::one() - s);
                        }
                    }
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let cols = xhat.cols;
                    let n = F::of(cols as f64);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(xhat.rows, cols);
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..xhat.rows {
                        let (d, xh) = (dy.row(r), xhat.row(r));
                        for j in 0..cols {
                            dg.data[j] += d[j] * xh[j];
                            db.data[j] += d[j];
                            dxhat[j] = d[j] * gv.data[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<F>() / n;
                        for j in 0..cols {
                            dx.data[r * cols + j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, &dg);
                    accumulate(&mut grads, *beta, &db);
                    accumulate_owned(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut g = dy;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row_mut(r);
                        let inner: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        gr.iter_mut().zip(yr).for_each(|(g, y)| *g = *y * (*g - inner));
                    }
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::Im2col {
                    x,
                    kernel,
                    stride,
                    pad_left,
                } => {
                    let xv = self.value(*x);
                    let c = xv.cols;
                    let mut g = Mat::zeros(xv.rows, c);
                    for t in 0..dy.rows {
                        for k in 0..*kernel {
                            if let Some(s) = (t * stride + k).checked_sub(*pad_left).filter(|&s| s < xv.rows) {
                                let src = &dy.data[t * kernel * c + k * c..t * kernel * c + (k + 1) * c];
                                g.row_mut(s).iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                            }
                        }
                    }
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::DepthwiseConv { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t_len, c, k) = (xv.rows, xv.cols, wv.rows);
                    let half = k / 2;
                    let mut dx = Mat::zeros(t_len, c);
                    let mut dw = Mat::zeros(k, c);
                    for t in 0..t_len {
                        let d = dy.row(t);
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(half).filter(|&s| s < t_len) else {
                                continue;
                            };
                            for ch in 0..c {
                                dx.data[s * c + ch] += wv.data[j * c + ch] * d[ch];
                                dw.data[j * c + ch] += xv.data[s * c + ch] * d[ch];
                            }
                        }
                    }
                    accumulate(&mut grads, *w, &dw);
                    accumulate_owned(&mut grads, *x, dx);
                }
                Op::RelBias {
                    scores,
                    table,
                    head,
                    max_dist,
                } => {
                    let tv = self.value(*table);
                    let width = 2 * max_dist + 1;
                    let mut dt = Mat::zeros(tv.rows, tv.cols);
                    for i in 0..dy.rows {
                        for j in 0..dy.cols {
                            dt.data[head * width + rel_index(i, j, *max_dist)] += dy.data[i * dy.cols + j];
                        }
                    }
                    accumulate(&mut grads, *table, &dt);
                    accumulate_owned(&mut grads, *scores, dy);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut g = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        g.data[r * xv.cols + start..r * xv.cols + start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    accumulate_owned(&mut grads, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let mut g = Mat::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + pv.cols]);
                        }
                        off += pv.cols;
                        accumulate_owned(&mut grads, *p, g);
                    }
                }
                Op::MulConst(x, mask) => {
                    let mut g = dy;
                    g.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= *m);
                    accumulate_owned(&mut grads, *x, g);
                }
            }
        }
        param_grads
    }
}

fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(max_dist as isize), max_dist as isize);
    (d + max_dist as isize) as usize
}

fn accumulate<F: Real>(grads: &mut [Option<Mat<F>>], v: Var, g: &Mat<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_owned<F: Real>(grads: &mut [Option<Mat<F>>], v: Var, g: Mat<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn accumulate_with<F: Real>(grads: &mut [Option<Mat<F>>], v: Var, rows: usize, cols: usize, f: impl FnOnce(&mut Mat<F>)) {
    let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols));
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Checks every op's backward against central differences on a scalar
    /// probe `sum(out * w)` for a fixed random `w`.
    fn check(build: impl Fn(&mut Graph<f64>) -> Var, store: ParamStore<f64>) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let store = Arc::new(store);
        let mut g = Graph::new(store.clone());
        let out = build(&mut g);
        let shape = (g.value(out).rows, g.value(out).cols);
        let probe = rand_mat(&mut r, shape.0, shape.1);
        let grads = g.backward(&[(out, probe.clone())]);
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new(Arc::new(s.clone()));
            let o = build(&mut g);
            g.value(o).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for (pi, t) in store.tensors().iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = (*store).clone();
                plus.tensor_mut(pi).data[e] += h;
                let mut minus = (*store).clone();
                minus.tensor_mut(pi).data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[pi].data[e];
                assert!(
                    (fd - an).abs() <= 1e-7 * fd.abs().max(1.0),
                    "{} [{e}]: fd {fd} vs analytic {an}",
                    store.name(pi)
                );
            }
        }
    }

    fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        for (name, rows, cols) in shapes {
            s.push(*name, rand_mat(&mut r, *rows, *cols));
        }
        s
    }

    #[test]
    fn dense_ops() {
        check(
            |g| {
                let x = g.param(0);
                let w = g.param(1);
                let b = g.param(2);
                let y = g.matmul(x, w);
                let y = g.add_row(y, b);
                let y = g.silu(y);
                let z = g.matmul_t(y, y);
                let z = g.scale(z, 0.7);
                g.softmax(z)
            },
            store(&[("x", 4, 3), ("w", 3, 5), ("b", 1, 5)], 1),
        );
    }

    #[test]
    fn norm_glu_and_masks() {
        check(
            |g| {
                let x = g.param(0);
                let (gamma, beta) = (g.param(1), g.param(2));
                let y = g.layer_norm(x, gamma, beta);
                let y = g.glu(y);
                let n = g.value(y).len();
                let y = g.mul_const(y, (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect());
                let a = g.slice_cols(y, 0, 1);
                let b = g.slice_cols(y, 1, 2);
                let c = g.concat_cols(&[b, a]);
                g.add(c, y)
            },
            store(&[("x", 5, 6), ("gamma", 1, 6), ("beta", 1, 6)], 2),
        );
    }

    #[test]
    fn conv_ops() {
        check(
            |g| {
                let x = g.param(0);
                let (w, dw, rel) = (g.param(1), g.param(2), g.param(3));
                let u = g.im2col(x, 3, 2, 1, 3);
                let u = g.matmul(u, w);
                let y = g.depthwise_conv(u, dw);
                let s = g.matmul_t(y, y);
                g.rel_bias(s, rel, 1, 1)
            },
            store(&[("x", 7, 2), ("w", 6, 4), ("dw", 3, 4), ("rel", 2, 3)], 3),
        );
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let s = Arc::new(store(&[("a", 2, 2), ("b", 2, 2)], 4));
        let mut g = Graph::new(s);
        let a = g.param(0);
        let y = g.scale(a, 2.0);
        let grads = g.backward(&[(y, Mat::zeros(2, 2))]);
        assert!(grads.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }
}
