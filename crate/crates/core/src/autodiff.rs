//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Operations are coarse (a whole attention layer, a whole convolution) so
//! the tape stays short and the heavy lifting happens inside GEMM calls.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! parameter gradients into a [`Grads`] buffer.

use std::collections::HashMap;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{bilinear_taps, col2im, conv_out, gemm, im2col, MatRef, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Interleave {
        visible: Var,
        fill: Var,
        vis_idx: Vec<usize>,
        fill_idx: Vec<usize>,
    },
    MeanRows(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logit: Var,
        label: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        col: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
    },
    ConcatChannels(Vec<Var>),
    GlobalAvgPool(Var),
    SumScalars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Bring a parameter onto the tape; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        let b = self.value(bias).data();
        assert_eq!(b.len(), n, "add_row: bias length");
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    /// `x * w + b` for `x[m, k]`, `w[k, n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_inplace(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[m, n]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let c = i % n;
            *o = xhat[i] * g[c] + b[c];
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention over all rows jointly.
    /// `q`, `k`, `v` are `[m, d]` with `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = (qv.rows(), qv.cols());
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * m * m];
        let mut out = Tensor::zeros(&[m, d]);
        for h in 0..heads {
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            gemm(
                m,
                dh,
                m,
                scale,
                MatRef {
                    data: &qv.data()[h * dh..],
                    rs: d as isize,
                    cs: 1,
                },
                MatRef {
                    data: &kv.data()[h * dh..],
                    rs: 1,
                    cs: d as isize,
                },
                0.0,
                p,
                m as isize,
                1,
            );
            for row in p.chunks_mut(m) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            gemm(
                m,
                m,
                dh,
                1.0,
                MatRef::rowmajor(p, m),
                MatRef {
                    data: &vv.data()[h * dh..],
                    rs: d as isize,
                    cs: 1,
                },
                0.0,
                &mut out.data_mut()[h * dh..],
                d as isize,
                1,
            );
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), n], data);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Build a `[vis_idx.len() + fill_idx.len(), n]` sequence placing the
    /// rows of `visible` at `vis_idx` and the single row `fill` at every
    /// position in `fill_idx`.
    pub fn interleave(
        &mut self,
        visible: Var,
        fill: Var,
        vis_idx: &[usize],
        fill_idx: &[usize],
    ) -> Var {
        let vv = self.value(visible);
        let n = vv.cols();
        let fv = self.value(fill).data();
        assert_eq!(fv.len(), n);
        let total = vis_idx.len() + fill_idx.len();
        let mut out = Tensor::zeros(&[total, n]);
        let od = out.data_mut();
        for (r, &i) in vis_idx.iter().enumerate() {
            od[i * n..(i + 1) * n].copy_from_slice(vv.row(r));
        }
        for &i in fill_idx {
            od[i * n..(i + 1) * n].copy_from_slice(fv);
        }
        self.push(
            out,
            Op::Interleave {
                visible,
                fill,
                vis_idx: vis_idx.to_vec(),
                fill_idx: fill_idx.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::from_vec(&[1, n], out), Op::MeanRows(x))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse: shape mismatch");
        let n = pv.len().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target })
    }

    /// Softmax cross-entropy for a single `[1, C]` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits).data();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// Numerically stable binary cross-entropy on a single logit.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.value(logit).item();
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, label })
    }

    /// 2-D convolution of a `[c, h, w]` image with `w[co, c, k, k]`, `b[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, ci, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(c, ci, "conv2d: channel mismatch");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let col = im2col(xv.data(), (c, h, wd), k, stride, pad, (ho, wo));
        let ck = c * k * k;
        let hw = ho * wo;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        let bv = self.value(b).data();
        for (o, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            chunk.fill(bv[o]);
        }
        gemm(
            co,
            ck,
            hw,
            1.0,
            MatRef::rowmajor(wv.data(), ck),
            MatRef::rowmajor(&col, hw),
            1.0,
            out.data_mut(),
            hw as isize,
            1,
        );
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
        )
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `[c, h, w]` image.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.shape()[0];
        let hw = out.len() / c;
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        for (ci, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            for v in chunk {
                *v = *v * s[ci] + t[ci];
            }
        }
        self.push(out, Op::ChannelAffine { x, scale, shift })
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let mut argmax = vec![0usize; c * ho * wo];
        let xd = xv.data();
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ci * h + iy as usize) * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ci * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Bilinear resize of a `[c, h, w]` image.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = crate::tensor::resize_bilinear(self.value(x), oh, ow);
        self.push(out, Op::Resize { x })
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (h, w) = {
            let s = self.value(xs[0]).shape();
            (s[1], s[2])
        };
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let v = self.value(x);
            assert_eq!(
                &v.shape()[1..],
                &[h, w],
                "concat_channels: spatial mismatch"
            );
            c += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        self.push(
            Tensor::from_vec(&[c, h, w], data),
            Op::ConcatChannels(xs.to_vec()),
        )
    }

    /// `[c, h, w]` -> `[1, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let hw = xv.len() / c;
        let data = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::from_vec(&[1, c], data), Op::GlobalAvgPool(x))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&x| self.value(x).item()).sum();
        self.push(Tensor::scalar(s), Op::SumScalars(xs.to_vec()))
    }

    /// Gradients of `loss` with respect to every node.
    pub fn backward_all(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Accumulate parameter gradients of `loss` into `out`.
    pub fn backward(&self, loss: Var, out: &mut Grads) {
        let grads = self.backward_all(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                out.accumulate(*id, g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    MatRef::rowmajor(g.data(), n),
                    MatRef::transposed(bv.data(), n),
                    0.0,
                    ga.data_mut(),
                    k as isize,
                    1,
                );
                let mut gb = Tensor::zeros(&[k, n]);
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    MatRef::transposed(av.data(), k),
                    MatRef::rowmajor(g.data(), n),
                    0.0,
                    gb.data_mut(),
                    n as isize,
                    1,
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, *x, g.clone());
                let shape = val(*bias).shape().to_vec();
                acc(grads, *bias, Tensor::from_vec(&shape, gb));
            }
            Op::Scale(x, s) => {
                let mut t = g.clone();
                t.scale_inplace(*s);
                acc(grads, *x, t);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(grads, *x, g.clone().reshape(&shape));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gam = val(*gamma).data();
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut gx = vec![0.0; m * n];
                let mut gxhat = vec![0.0; n];
                for r in 0..m {
                    let grow = g.row(r);
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for c in 0..n {
                        gg[c] += grow[c] * xh[c];
                        gbeta[c] += grow[c];
                        gxhat[c] = grow[c] * gam[c];
                        mean_g += gxhat[c];
                        mean_gx += gxhat[c] * xh[c];
                    }
                    mean_g /= n as f64;
                    mean_gx /= n as f64;
                    for c in 0..n {
                        gx[r * n + c] = rstd[r] * (gxhat[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                acc(grads, *x, Tensor::from_vec(&[m, n], gx));
                let gs = val(*gamma).shape().to_vec();
                acc(grads, *gamma, Tensor::from_vec(&gs, gg));
                let bs = val(*beta).shape().to_vec();
                acc(grads, *beta, Tensor::from_vec(&bs, gbeta));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (m, d) = (qv.rows(), qv.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(&[m, d]);
                let mut gk = Tensor::zeros(&[m, d]);
                let mut gv = Tensor::zeros(&[m, d]);
                let mut dp = vec![0.0; m * m];
                for h in 0..*heads {
                    let p = &probs[h * m * m..(h + 1) * m * m];
                    let gh = MatRef {
                        data: &g.data()[h * dh..],
                        rs: d as isize,
                        cs: 1,
                    };
                    gemm(
                        m,
                        dh,
                        m,
                        1.0,
                        gh,
                        MatRef {
                            data: &vv.data()[h * dh..],
                            rs: 1,
                            cs: d as isize,
                        },
                        0.0,
                        &mut dp,
                        m as isize,
                        1,
                    );
                    gemm(
                        m,
                        m,
                        dh,
                        1.0,
                        MatRef::transposed(p, m),
                        gh,
                        1.0,
                        &mut gv.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                    for r in 0..m {
                        let pr = &p[r * m..(r + 1) * m];
                        let dr = &mut dp[r * m..(r + 1) * m];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv, pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                    gemm(
                        m,
                        m,
                        dh,
                        scale,
                        MatRef::rowmajor(&dp, m),
                        MatRef {
                            data: &kv.data()[h * dh..],
                            rs: d as isize,
                            cs: 1,
                        },
                        1.0,
                        &mut gq.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                    gemm(
                        m,
                        m,
                        dh,
                        scale,
                        MatRef::transposed(&dp, m),
                        MatRef {
                            data: &qv.data()[h * dh..],
                            rs: d as isize,
                            cs: 1,
                        },
                        1.0,
                        &mut gk.data_mut()[h * dh..],
                        d as isize,
                        1,
                    );
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Interleave {
                visible,
                fill,
                vis_idx,
                fill_idx,
            } => {
                let n = g.cols();
                let mut gvis = Vec::with_capacity(vis_idx.len() * n);
                for &i in vis_idx {
                    gvis.extend_from_slice(g.row(i));
                }
                let mut gfill = vec![0.0; n];
                for &i in fill_idx {
                    for (o, v) in gfill.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(grads, *visible, Tensor::from_vec(&[vis_idx.len(), n], gvis));
                let fs = val(*fill).shape().to_vec();
                acc(grads, *fill, Tensor::from_vec(&fs, gfill));
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for row in gx.data_mut().chunks_mut(n) {
                    for (o, v) in row.iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Mse { pred, target } => {
                let pv = val(*pred);
                let n = pv.len().max(1) as f64;
                let s = g.item() * 2.0 / n;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| s * (p - t))
                    .collect();
                acc(grads, *pred, Tensor::from_vec(pv.shape(), data));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g.item();
                let mut data: Vec<f64> = probs.iter().map(|p| s * p).collect();
                data[*label] -= s;
                let shape = val(*logits).shape().to_vec();
                acc(grads, *logits, Tensor::from_vec(&shape, data));
            }
            Op::BceWithLogits { logit, label } => {
                let lv = val(*logit);
                let d = g.item() * (sigmoid(lv.item()) - label);
                acc(grads, *logit, Tensor::from_vec(lv.shape(), vec![d]));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                let ck = c * k * k;
                let hw = ho * wo;
                let mut gw = Tensor::zeros(wv.shape());
                gemm(
                    co,
                    hw,
                    ck,
                    1.0,
                    MatRef::rowmajor(g.data(), hw),
                    MatRef::transposed(col, hw),
                    0.0,
                    gw.data_mut(),
                    ck as isize,
                    1,
                );
                let gb: Vec<f64> = g.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
                let mut gcol = vec![0.0; ck * hw];
                gemm(
                    ck,
                    co,
                    hw,
                    1.0,
                    MatRef::transposed(wv.data(), ck),
                    MatRef::rowmajor(g.data(), hw),
                    0.0,
                    &mut gcol,
                    hw as isize,
                    1,
                );
                let gx = col2im(&gcol, (c, h, wd), k, *stride, *pad, (ho, wo));
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx));
                acc(grads, *w, gw);
                let bs = val(*b).shape().to_vec();
                acc(grads, *b, Tensor::from_vec(&bs, gb));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = val(*x);
                let c = xv.shape()[0];
                let hw = xv.len() / c;
                let s = val(*scale).data();
                let mut gx = g.clone();
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for ci in 0..c {
                    let gr = &g.data()[ci * hw..(ci + 1) * hw];
                    let xr = &xv.data()[ci * hw..(ci + 1) * hw];
                    gs[ci] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    gt[ci] = gr.iter().sum();
                    for v in &mut gx.data_mut()[ci * hw..(ci + 1) * hw] {
                        *v *= s[ci];
                    }
                }
                acc(grads, *x, gx);
                let ss = val(*scale).shape().to_vec();
                acc(grads, *scale, Tensor::from_vec(&ss, gs));
                let ts = val(*shift).shape().to_vec();
                acc(grads, *shift, Tensor::from_vec(&ts, gt));
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        gx.data_mut()[src] += g.data()[o];
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Resize { x } => {
                let xv = val(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut gx = Tensor::zeros(xv.shape());
                let gxd = gx.data_mut();
                for ci in 0..c {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g.data()[(ci * oh + oy) * ow + ox];
                            let base = ci * h * w;
                            gxd[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            gxd[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            gxd[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            gxd[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatChannels(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let shape = val(x).shape().to_vec();
                    let n: usize = shape.iter().product();
                    acc(
                        grads,
                        x,
                        Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec()),
                    );
                    offset += n;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let c = xv.shape()[0];
                let hw = xv.len() / c;
                let mut gx = Tensor::zeros(xv.shape());
                for (ci, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[ci] / hw as f64);
                }
                acc(grads, *x, gx);
            }
            Op::SumScalars(xs) => {
                for &x in xs {
                    acc(grads, x, g.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let loss = build(&mut g, x);
        let analytic = g.backward_all(loss)[0].clone().expect("input grad");
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn wave(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| (i as f64 * 0.731 + phase).sin()).collect(),
        )
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        check_input_grad(wave(&[3, 5], 0.2), |g, x| {
            let gamma = g.constant(wave(&[5], 1.0));
            let beta = g.constant(wave(&[5], 2.0));
            let y = g.layer_norm(x, gamma, beta);
            let y = g.gelu(y);
            g.mse(y, wave(&[3, 5], 3.0))
        });
    }

    #[test]
    fn attention_gradients() {
        check_input_grad(wave(&[4, 6], 0.4), |g, x| {
            let wk = g.constant(wave(&[6, 6], 1.3));
            let k = g.matmul(x, wk);
            let y = g.attention(x, k, x, 2);
            g.mse(y, wave(&[4, 6], 0.9))
        });
    }

    #[test]
    fn conv_pool_resize_gradients() {
        check_input_grad(wave(&[2, 6, 6], 0.1), |g, x| {
            let w = g.constant(wave(&[3, 2, 3, 3], 0.5));
            let b = g.constant(wave(&[3], 0.7));
            let y = g.conv2d(x, w, b, 2, 1);
            let s = g.constant(wave(&[3], 1.1));
            let t = g.constant(wave(&[3], 1.7));
            let y = g.channel_affine(y, s, t);
            let p = g.max_pool(x, 3, 2, 1);
            let p = g.resize(p, 3, 3);
            let cat = g.concat_channels(&[y, p]);
            let r = g.resize(cat, 5, 4);
            let pooled = g.global_avg_pool(r);
            let l1 = g.mse(r, wave(&[5, 5, 4], 0.3));
            let l2 = g.mse(pooled, wave(&[1, 5], 0.8));
            g.sum_scalars(&[l1, l2])
        });
    }

    #[test]
    fn gather_interleave_and_losses() {
        check_input_grad(wave(&[3, 4], 0.6), |g, x| {
            let fill = g.constant(wave(&[4], 0.2));
            let seq = g.interleave(x, fill, &[0, 2, 4], &[1, 3]);
            let picked = g.gather_rows(seq, &[1, 2, 4]);
            let pooled = g.mean_rows(picked);
            let w = g.constant(wave(&[4, 2], 0.9));
            let logits = g.matmul(pooled, w);
            let ce = g.cross_entropy(logits, 1);
            let one = g.gather_rows(logits, &[0]);
            let w1 = g.constant(wave(&[2, 1], 0.1));
            let z = g.matmul(one, w1);
            let bce = g.bce_with_logits(z, 1.0);
            let relu = g.relu(seq);
            let mse = g.mse(relu, wave(&[5, 4], 0.5));
            let scaled = g.scale(mse, 0.5);
            g.sum_scalars(&[ce, bce, scaled])
        });
    }

    #[test]
    fn repeated_param_uses_share_one_node() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.add(a, b);
        let mut grads = Grads::zeros_like(&store);
        g.backward(y, &mut grads);
        assert_eq!(grads.get(id).item(), 2.0);
    }

    #[test]
    fn binary_cross_entropy_limits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let l = g.bce_with_logits(z, 1.0);
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(Tensor::scalar(40.0));
        let l = g.bce_with_logits(z, 1.0);
        assert!(g.value(l).item() < 1e-15);
    }
}
