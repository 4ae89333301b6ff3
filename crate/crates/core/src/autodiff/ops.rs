//! Forward definitions and vector-Jacobian products of every tape operation.
//!
//! Shape mismatches are programming errors and panic with the op name.

use super::{Op, Tape, Var};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh u) written as the logistic of 2u, which needs one exp.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(super) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

pub(super) fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    accumulate(grads, v, g.len(), |s| {
        for (a, b) in s.iter_mut().zip(g) {
            *a += *b;
        }
    });
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let ng = self.any_grad(&[x]);
        self.push(value, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let c = self.value(x).cols();
        assert_eq!(self.value(bias).numel(), c, "add_row: bias width");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(value, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `a[m, k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let bs = self.shape(b).to_vec();
        assert!(bs.len() == 2 && bs[0] == k, "matmul: {:?} x {:?}", self.shape(a), bs);
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a[m, k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (n, kb) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, kb, "matmul_nt: inner dims");
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// `x·ln x` with the continuous extension `0·ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        self.unary(x, Op::XLogX(x), |v| if v > T::zero() { v * v.ln() } else { T::zero() })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::LogSoftmaxRows(x), ng)
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(gamma).numel(), c, "layer_norm: gamma width");
        assert_eq!(self.value(beta).numel(), c, "layer_norm: beta width");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                dst[j] = (src[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(value, Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    /// Scales each row to unit L2 norm (rows with norm below `eps` are divided by `eps`).
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let n = src.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v / n;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::NormalizeRows { x, eps }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::from_usize(xv.numel()).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum along the last axis: `[r, c] -> [r, 1]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<T> = xv.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let value = Tensor::new(vec![data.len(), 1], data).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SumLast(x), ng)
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rf = T::from_usize(r).unwrap();
        out.iter_mut().for_each(|o| *o /= rf);
        let value = Tensor::new(vec![1, c], out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Mean over each row range `offsets[b]..offsets[b+1]`: `[Σn, c] -> [B, c]`.
    /// Empty ranges yield zero rows.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(offsets.len() >= 2 && *offsets.last().unwrap() == xv.rows(), "segment_mean: offsets");
        let b = offsets.len() - 1;
        let mut out = vec![T::zero(); b * c];
        for s in 0..b {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(lo <= hi, "segment_mean: offsets must be non-decreasing");
            if hi == lo {
                continue;
            }
            let dst = &mut out[s * c..(s + 1) * c];
            for r in lo..hi {
                for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let n = T::from_usize(hi - lo).unwrap();
            dst.iter_mut().for_each(|o| *o /= n);
        }
        let value = Tensor::new(vec![b, c], out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SegmentMean { x, offsets: offsets.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape: element count");
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c, "slice_cols: {start}+{len} > {c}");
        let mut out = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        assert!(parts.iter().all(|&p| self.value(p).rows() == r), "concat_cols: row counts");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], out).unwrap();
        let ng = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors).expect("concat_rows: widths");
        let ng = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Embedding-style row lookup: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < xv.rows(), "gather_rows: index {i} out of range");
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// `out[i, j] = x[i, idx[i*k + j]]` with `k = idx.len() / rows`.
    pub fn gather_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(r > 0 && idx.len() % r == 0, "gather_per_row: index count");
        let k = idx.len() / r;
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(n, &j)| {
                assert!(j < c, "gather_per_row: column {j} out of range");
                xv.data()[(n / k) * c + j]
            })
            .collect();
        let value = Tensor::new(vec![r, k], out).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(value, Op::GatherPerRow { x, idx: idx.to_vec() }, ng)
    }

    /// Replaces rows where `mask` is set by the vector `emb`.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Var {
        let c = self.value(x).cols();
        assert_eq!(mask.len(), self.value(x).rows(), "mask_rows: mask length");
        assert_eq!(self.value(emb).numel(), c, "mask_rows: embedding width");
        let e = self.value(emb).data().to_vec();
        let mut value = self.value(x).clone();
        for (row, &m) in value.data_mut().chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(&e);
            }
        }
        let ng = self.any_grad(&[x, emb]);
        self.push(value, Op::MaskRows { x, emb, mask: mask.to_vec() }, ng)
    }

    /// 1-D convolution over time-major input `x[L, Cin]` with weights laid out
    /// as `w[kernel*Cin, Cout]` (tap-major) and bias `b[Cout]`; zero padding `pad`
    /// on both ends. Output is `[(L + 2 pad - kernel) / stride + 1, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let len = self.value(x).rows();
        self.conv1d_segments(x, w, b, kernel, stride, pad, &[0, len])
    }

    /// [`Tape::conv1d`] applied independently to each row range
    /// `offsets[i]..offsets[i+1]` of `x`, each padded on its own; outputs are
    /// stacked in segment order.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_segments(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize, offsets: &[usize]) -> Var {
        let xv = self.value(x);
        let (len, cin) = (xv.rows(), xv.cols());
        let ws = self.shape(w);
        assert!(ws.len() == 2 && ws[0] == kernel * cin, "conv1d: weight {ws:?} for kernel {kernel} x {cin}");
        let cout = ws[1];
        assert_eq!(self.value(b).numel(), cout, "conv1d: bias");
        assert!(stride > 0, "conv1d: stride");
        check_offsets("conv1d", offsets, len);
        assert!(
            offsets.windows(2).all(|s| s[1] - s[0] + 2 * pad >= kernel),
            "conv1d: input shorter than kernel"
        );
        let cols = im2col(xv.data(), cin, kernel, stride, pad, offsets);
        let lout = cols.len() / (kernel * cin);
        let mut out = vec![T::zero(); lout * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm_nn(lout, kernel * cin, cout, &cols, self.value(w).data(), T::one(), &mut out);
        let value = Tensor::new(vec![lout, cout], out).unwrap();
        let ng = self.any_grad(&[x, w, b]);
        self.push(value, Op::Conv1d { x, w, b, kernel, stride, pad, offsets: offsets.to_vec() }, ng)
    }

    /// Multi-head scaled dot-product attention within each row range
    /// `offsets[i]..offsets[i+1]`. `q`, `k`, `v` are `[N, d]` with `d`
    /// split into `heads` equal column blocks; output is `[N, d]`.
    pub fn attention_segments(&mut self, q: Var, k: Var, v: Var, heads: usize, offsets: &[usize]) -> Var {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        assert!(self.shape(k) == [n, d] && self.shape(v) == [n, d], "attention: q/k/v shapes");
        assert!(heads > 0 && d % heads == 0, "attention: {d} columns into {heads} heads");
        check_offsets("attention", offsets, n);
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(offsets.windows(2).map(|s| (s[1] - s[0]).pow(2)).sum::<usize>() * heads);
        let (di, one, zero) = (d as isize, T::one(), T::zero());
        for seg in offsets.windows(2) {
            let (a, m) = (seg[0], seg[1] - seg[0]);
            if m == 0 {
                continue;
            }
            for h in 0..heads {
                let base = a * d + h * dh;
                let mut s = vec![T::zero(); m * m];
                T::gemm(m, dh, m, scale, &qd[base..], di, 1, &kd[base..], 1, di, zero, &mut s, m as isize, 1);
                let mut p = vec![T::zero(); m * m];
                for (src, dst) in s.chunks(m).zip(p.chunks_mut(m)) {
                    softmax_row(src, dst);
                }
                T::gemm(m, m, dh, one, &p, m as isize, 1, &vd[base..], di, 1, zero, &mut out[base..], di, 1);
                probs.extend_from_slice(&p);
            }
        }
        let value = Tensor::new(vec![n, d], out).unwrap();
        let ng = self.any_grad(&[q, k, v]);
        self.push(value, Op::Attention { q, k, v, heads, offsets: offsets.to_vec(), probs }, ng)
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Var {
        assert_eq!(hard.shape(), self.shape(soft), "straight_through: shape");
        let ng = self.any_grad(&[soft]);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// `Σ_l w[l] · xs[l]` for equally shaped `xs` and a length-`xs.len()` weight vector.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Var {
        assert!(!xs.is_empty(), "weighted_sum: no inputs");
        assert_eq!(self.value(w).numel(), xs.len(), "weighted_sum: weight count");
        let shape = self.shape(xs[0]).to_vec();
        let mut out = vec![T::zero(); self.value(xs[0]).numel()];
        for (l, &x) in xs.iter().enumerate() {
            assert_eq!(self.shape(x), &shape[..], "weighted_sum: shape mismatch");
            let wl = self.value(w).data()[l];
            for (o, &v) in out.iter_mut().zip(self.value(x).data()) {
                *o += wl * v;
            }
        }
        let value = Tensor::new(shape, out).unwrap();
        let mut deps = xs.to_vec();
        deps.push(w);
        let ng = self.any_grad(&deps);
        self.push(value, Op::WeightedSum { xs: xs.to_vec(), w }, ng)
    }

    pub(super) fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, g);
                }
                if needs(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g.len(), |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    accumulate(grads, *a, g.len(), |s| {
                        for ((x, &d), &o) in s.iter_mut().zip(g).zip(bv) {
                            *x += d * o;
                        }
                    });
                }
                if needs(*b) {
                    let av = val(*a).data();
                    accumulate(grads, *b, g.len(), |s| {
                        for ((x, &d), &o) in s.iter_mut().zip(g).zip(av) {
                            *x += d * o;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                if needs(*x) {
                    add_into(grads, *x, g);
                }
                if needs(*bias) {
                    let c = val(*bias).numel();
                    accumulate(grads, *bias, c, |s| {
                        for row in g.chunks(c) {
                            for (x, &d) in s.iter_mut().zip(row) {
                                *x += d;
                            }
                        }
                    });
                }
            }
            Op::Scale(x, k) => {
                if needs(*x) {
                    accumulate(grads, *x, g.len(), |s| s.iter_mut().zip(g).for_each(|(a, &d)| *a += d * *k));
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                if needs(*x) {
                    add_into(grads, *x, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if needs(*a) {
                    accumulate(grads, *a, m * k, |s| gemm_nt(m, n, k, g, val(*b).data(), T::one(), s));
                }
                if needs(*b) {
                    accumulate(grads, *b, k * n, |s| gemm_tn(k, m, n, val(*a).data(), g, T::one(), s));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if needs(*a) {
                    accumulate(grads, *a, m * k, |s| gemm_nn(m, n, k, g, val(*b).data(), T::one(), s));
                }
                if needs(*b) {
                    accumulate(grads, *b, n * k, |s| gemm_tn(n, m, k, g, val(*a).data(), T::one(), s));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((a, &d), &v) in s.iter_mut().zip(g).zip(xv) {
                            if v > T::zero() {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((a, &d), &v) in s.iter_mut().zip(g).zip(xv) {
                            *a += d * gelu_grad(v);
                        }
                    });
                }
            }
            Op::Exp(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((a, &d), &v) in s.iter_mut().zip(g).zip(y) {
                            *a += d * v;
                        }
                    });
                }
            }
            Op::Log(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((a, &d), &v) in s.iter_mut().zip(g).zip(xv) {
                            *a += d / v;
                        }
                    });
                }
            }
            Op::XLogX(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    let floor = T::min_positive_value();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((a, &d), &v) in s.iter_mut().zip(g).zip(xv) {
                            *a += d * (v.max(floor).ln() + T::one());
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                srow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    accumulate(grads, *x, g.len(), |s| {
                        for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let gs: T = grow.iter().copied().sum();
                            for j in 0..c {
                                srow[j] += grow[j] - yrow[j].exp() * gs;
                            }
                        }
                    });
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = val(*x);
                let c = xv.cols();
                let gm = val(*gamma).data();
                let nf = T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for ((src, grow), dst) in xv.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let mean = src.iter().copied().sum::<T>() / nf;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                    let rstd = T::one() / (var + *eps).sqrt();
                    for j in 0..c {
                        xhat[j] = (src[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gm[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..c {
                        dst[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    add_into(grads, *x, &dx);
                }
                if needs(*gamma) {
                    add_into(grads, *gamma, &dgamma);
                }
                if needs(*beta) {
                    add_into(grads, *beta, &dbeta);
                }
            }
            Op::NormalizeRows { x, eps } => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let y = node.value.data();
                    accumulate(grads, *x, g.len(), |s| {
                        for (((srow, grow), yrow), xrow) in
                            s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(xv.data().chunks(c))
                        {
                            let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                            if norm > *eps {
                                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                                for j in 0..c {
                                    srow[j] += (grow[j] - yrow[j] * dot) / norm;
                                }
                            } else {
                                for j in 0..c {
                                    srow[j] += grow[j] / *eps;
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = val(*x).numel();
                    accumulate(grads, *x, n, |s| s.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = val(*x).numel();
                    let d = g[0] / T::from_usize(n).unwrap();
                    accumulate(grads, *x, n, |s| s.iter_mut().for_each(|a| *a += d));
                }
            }
            Op::SumLast(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for (row, &d) in s.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|a| *a += d);
                        }
                    });
                }
            }
            Op::MeanRows(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let rf = T::from_usize(xv.rows()).unwrap();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for row in s.chunks_mut(c) {
                            for (a, &d) in row.iter_mut().zip(g) {
                                *a += d / rf;
                            }
                        }
                    });
                }
            }
            Op::SegmentMean { x, offsets } => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for b in 0..offsets.len() - 1 {
                            let (lo, hi) = (offsets[b], offsets[b + 1]);
                            if hi == lo {
                                continue;
                            }
                            let n = T::from_usize(hi - lo).unwrap();
                            let grow = &g[b * c..(b + 1) * c];
                            for r in lo..hi {
                                for (a, &d) in s[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                    *a += d / n;
                                }
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let len = node.value.cols();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for (row, grow) in s.chunks_mut(c).zip(g.chunks(len)) {
                            for (a, &d) in row[*start..*start + len].iter_mut().zip(grow) {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        accumulate(grads, p, val(p).numel(), |s| {
                            for (row, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                                for (a, &d) in row.iter_mut().zip(&grow[off..off + w]) {
                                    *a += d;
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if needs(p) {
                        add_into(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for (n, &i) in idx.iter().enumerate() {
                            for (a, &d) in s[i * c..(i + 1) * c].iter_mut().zip(&g[n * c..(n + 1) * c]) {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::GatherPerRow { x, idx } => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let k = node.value.cols();
                    accumulate(grads, *x, xv.numel(), |s| {
                        for (n, &j) in idx.iter().enumerate() {
                            s[(n / k) * c + j] += g[n];
                        }
                    });
                }
            }
            Op::MaskRows { x, emb, mask } => {
                let c = node.value.cols();
                if needs(*x) {
                    accumulate(grads, *x, g.len(), |s| {
                        for ((row, grow), &m) in s.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                            if !m {
                                row.iter_mut().zip(grow).for_each(|(a, &d)| *a += d);
                            }
                        }
                    });
                }
                if needs(*emb) {
                    accumulate(grads, *emb, c, |s| {
                        for (grow, &m) in g.chunks(c).zip(mask) {
                            if m {
                                s.iter_mut().zip(grow).for_each(|(a, &d)| *a += d);
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, kernel, stride, pad, offsets } => {
                let xv = val(*x);
                let (len, cin) = (xv.rows(), xv.cols());
                let cout = val(*w).cols();
                let lout = node.value.rows();
                let kc = kernel * cin;
                if needs(*w) {
                    let cols = im2col(xv.data(), cin, *kernel, *stride, *pad, offsets);
                    accumulate(grads, *w, kc * cout, |s| gemm_tn(kc, lout, cout, &cols, g, T::one(), s));
                }
                if needs(*b) {
                    accumulate(grads, *b, cout, |s| {
                        for row in g.chunks(cout) {
                            s.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                        }
                    });
                }
                if needs(*x) {
                    let mut dcols = vec![T::zero(); lout * kc];
                    gemm_nt(lout, cout, kc, g, val(*w).data(), T::zero(), &mut dcols);
                    accumulate(grads, *x, len * cin, |s| {
                        let mut t_out = 0;
                        for seg in offsets.windows(2) {
                            let (a, n) = (seg[0], seg[1] - seg[0]);
                            for t in 0..conv_len(n, *kernel, *stride, *pad) {
                                for k in 0..*kernel {
                                    let pos = (t * stride + k) as isize - *pad as isize;
                                    if pos < 0 || pos as usize >= n {
                                        continue;
                                    }
                                    let r = a + pos as usize;
                                    let src = &dcols[t_out * kc + k * cin..t_out * kc + (k + 1) * cin];
                                    let dst = &mut s[r * cin..(r + 1) * cin];
                                    dst.iter_mut().zip(src).for_each(|(a, &d)| *a += d);
                                }
                                t_out += 1;
                            }
                        }
                    });
                }
            }
            Op::Attention { q, k, v, heads, offsets, probs } => {
                let (n, d) = (val(*q).rows(), val(*q).cols());
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let (di, one, zero) = (d as isize, T::one(), T::zero());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut at = 0;
                for seg in offsets.windows(2) {
                    let (a, m) = (seg[0], seg[1] - seg[0]);
                    if m == 0 {
                        continue;
                    }
                    let mi = m as isize;
                    for h in 0..*heads {
                        let base = a * d + h * dh;
                        let p = &probs[at..at + m * m];
                        at += m * m;
                        // dV = Pᵀ dO
                        T::gemm(m, m, dh, one, p, 1, mi, &g[base..], di, 1, one, &mut dv[base..], di, 1);
                        // dP = dO Vᵀ, then the softmax vector-Jacobian product.
                        let mut ds = vec![T::zero(); m * m];
                        T::gemm(m, dh, m, one, &g[base..], di, 1, &vd[base..], 1, di, zero, &mut ds, mi, 1);
                        for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                            let dot: T = drow.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                            for (x, &y) in drow.iter_mut().zip(prow) {
                                *x = y * (*x - dot);
                            }
                        }
                        T::gemm(m, m, dh, scale, &ds, mi, 1, &kd[base..], di, 1, one, &mut dq[base..], di, 1);
                        T::gemm(m, m, dh, scale, &ds, 1, mi, &qd[base..], di, 1, one, &mut dk[base..], di, 1);
                    }
                }
                for (var, dg) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        add_into(grads, var, &dg);
                    }
                }
            }
            Op::WeightedSum { xs, w } => {
                let wv = val(*w).data();
                for (l, &x) in xs.iter().enumerate() {
                    if needs(x) {
                        let wl = wv[l];
                        accumulate(grads, x, g.len(), |s| s.iter_mut().zip(g).for_each(|(a, &d)| *a += wl * d));
                    }
                }
                if needs(*w) {
                    let dw: Vec<T> = xs
                        .iter()
                        .map(|&x| val(x).data().iter().zip(g).map(|(&v, &d)| v * d).sum())
                        .collect();
                    add_into(grads, *w, &dw);
                }
            }
        }
    }
}

fn conv_len(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

fn check_offsets(op: &str, offsets: &[usize], rows: usize) {
    assert!(
        offsets.len() >= 2 && offsets[0] == 0 && *offsets.last().unwrap() == rows && offsets.windows(2).all(|w| w[0] <= w[1]),
        "{op}: offsets must rise from 0 to {rows}"
    );
}

/// Unfolds every segment of `x` (rows `offsets[i]..offsets[i+1]`, each
/// zero-padded on its own) into `[Σ lout_i, kernel*cin]`.
fn im2col<T: Scalar>(x: &[T], cin: usize, kernel: usize, stride: usize, pad: usize, offsets: &[usize]) -> Vec<T> {
    let kc = kernel * cin;
    let total: usize = offsets.windows(2).map(|s| conv_len(s[1] - s[0], kernel, stride, pad)).sum();
    let mut cols = vec![T::zero(); total * kc];
    let mut t_out = 0;
    for seg in offsets.windows(2) {
        let (a, n) = (seg[0], seg[1] - seg[0]);
        for t in 0..conv_len(n, kernel, stride, pad) {
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - pad as isize;
                if pos < 0 || pos as usize >= n {
                    continue;
                }
                let p = a + pos as usize;
                cols[t_out * kc + k * cin..t_out * kc + (k + 1) * cin].copy_from_slice(&x[p * cin..(p + 1) * cin]);
            }
            t_out += 1;
        }
    }
    cols
}
