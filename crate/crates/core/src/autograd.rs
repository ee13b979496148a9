//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes only carry gradients when some ancestor leaf
//! was created with `requires_grad`, so attacks that differentiate w.r.t. the
//! input alone skip all weight-gradient work.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulScalar { x: Var, s: Var },
    Gelu(Var),
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Upsample2(Var),
    Reshape(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNormChannels { x: Var, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, attn: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
    Focal { logits: Var, targets: Vec<usize>, gamma: f64, weights: Option<Vec<f64>>, probs: Vec<f64> },
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 2-d convolution, NCHW input and `[out, in, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bsz, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, kh, kw) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(wd, kw, stride, pad);
        let ncol = bsz * ho * wo;
        let rows = cin * kh * kw;
        let cols = im2col(self.value(x).data(), bsz, cin, h, wd, kh, kw, stride, pad, ho, wo);
        let mut out_mat = vec![0.0; cout * ncol];
        gemm(cout, rows, ncol, 1.0, self.value(w).data(), false, &cols, false, 0.0, &mut out_mat);
        let hw = ho * wo;
        let mut out = vec![0.0; bsz * cout * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for co in 0..cout {
            let bv = bias.as_ref().map_or(0.0, |bb| bb[co]);
            for bi in 0..bsz {
                let src = &out_mat[co * ncol + bi * hw..co * ncol + (bi + 1) * hw];
                let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let value = Tensor::from_vec(&[bsz, cout, ho, wo], out).expect("conv shape");
        let cols = if rg { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { x, w, b, stride, pad, cols }, rg)
    }

    /// `x [B, in] -> x W^T + b`, with `W [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bsz, din) = self.value(x).dims2();
        let (dout, win) = self.value(w).dims2();
        assert_eq!(din, win, "linear input mismatch");
        let mut out = vec![0.0; bsz * dout];
        gemm(bsz, din, dout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(Tensor::from_vec(&[bsz, dout], out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// `a [m, k] * b [k, n]`, or `a * b^T` with `b [n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.value(a).dims2();
        let (b0, b1) = self.value(b).dims2();
        let (bk, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, bk, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Shift(a), rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let rg = self.rg(&[x, s]);
        self.push(v, Op::MulScalar { x, s }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = bc * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = bi;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[b, c, ho, wo], out).unwrap(), Op::MaxPool2 { x, argmax }, rg)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out: Vec<f64> = self.value(x).data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / hw).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[b, c], out).unwrap(), Op::GlobalAvgPool(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for bc in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[bc * h2 * w2 + y * w2 + xx] = src[bc * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[b, c, h2, w2], out).unwrap(), Op::Upsample2(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Scales each row of `x [R, D]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, d) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[r, d], out).unwrap(), Op::NormalizeRows { x, norms }, rg)
    }

    /// Normalizes across channels at every spatial position (no affine).
    pub fn layer_norm_channels(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; b * hw];
        for bi in 0..b {
            for p in 0..hw {
                let at = |ci: usize| (bi * c + ci) * hw + p;
                let mean = (0..c).map(|ci| src[at(ci)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ci| (src[at(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + 1e-5).sqrt();
                for ci in 0..c {
                    out[at(ci)] = (src[at(ci)] - mean) * r;
                }
                rstd[bi * hw + p] = r;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[b, c, h, w], out).unwrap(), Op::LayerNormChannels { x, rstd }, rg)
    }

    /// Single-head dot-product self-attention over spatial positions;
    /// `q`, `k`, `v` are `[B, C, H, W]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (b, c, h, w) = self.value(q).dims4();
        let n = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        let mut attn = vec![0.0; b * n * n];
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            let qs = &self.value(q).data()[bi * c * n..(bi + 1) * c * n];
            let ks = &self.value(k).data()[bi * c * n..(bi + 1) * c * n];
            let vs = &self.value(v).data()[bi * c * n..(bi + 1) * c * n];
            let a = &mut attn[bi * n * n..(bi + 1) * n * n];
            gemm(n, c, n, scale, qs, true, ks, false, 0.0, a);
            for row in a.chunks_mut(n) {
                softmax_inplace(row);
            }
            gemm(c, n, n, 1.0, vs, false, a, true, 0.0, &mut out[bi * c * n..(bi + 1) * c * n]);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::from_vec(&[b, c, h, w], out).unwrap(), Op::Attention { q, k, v, attn }, rg)
    }

    /// Mean cross-entropy of `logits [B, C]` against hard targets with
    /// uniform label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Var {
        let (b, c) = self.value(logits).dims2();
        assert_eq!(b, targets.len(), "cross_entropy batch mismatch");
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            assert!(t < c, "target {t} out of range for {c} classes");
            let lse = log_sum_exp(row);
            for (j, z) in row.iter().enumerate() {
                let q = smoothing / c as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                loss -= q * (z - lse);
            }
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs },
            rg,
        )
    }

    /// Mean per-pixel focal loss of `logits [B, K, H, W]` against per-pixel
    /// class targets (`B*H*W` entries, row-major).
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, weights: Option<&[f64]>) -> Var {
        let (b, k, h, w) = self.value(logits).dims4();
        let hw = h * w;
        assert_eq!(targets.len(), b * hw, "focal target size mismatch");
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        let mut col = vec![0.0; k];
        for bi in 0..b {
            for p in 0..hw {
                for ci in 0..k {
                    col[ci] = src[(bi * k + ci) * hw + p];
                }
                let lse = log_sum_exp(&col);
                for ci in 0..k {
                    probs[(bi * k + ci) * hw + p] = (col[ci] - lse).exp();
                }
                let t = targets[bi * hw + p];
                assert!(t < k, "pixel target {t} out of range for {k} channels");
                let logp = col[t] - lse;
                let pt = logp.exp();
                let wt = weights.map_or(1.0, |ws| ws[t]);
                loss -= wt * (1.0 - pt).max(0.0).powf(gamma) * logp;
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss / (b * hw) as f64),
            Op::Focal { logits, targets: targets.to_vec(), gamma, weights: weights.map(|w| w.to_vec()), probs },
            rg,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from the one-element tensor `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        if !self.nodes[root.0].requires_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.node_backward(node, &g);
            grads[i] = Some(g);
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Grads { grads }
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (bsz, cin, h, wd) = self.value(*x).dims4();
                let (cout, _, kh, kw) = self.value(*w).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let hw = ho * wo;
                let ncol = bsz * hw;
                let rows = cin * kh * kw;
                let gd = g.data();
                let mut gmat = vec![0.0; cout * ncol];
                for bi in 0..bsz {
                    for co in 0..cout {
                        gmat[co * ncol + bi * hw..co * ncol + (bi + 1) * hw]
                            .copy_from_slice(&gd[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]);
                    }
                }
                if rg(*w) {
                    let mut gw = vec![0.0; cout * rows];
                    gemm(cout, ncol, rows, 1.0, &gmat, false, cols, true, 0.0, &mut gw);
                    out.push((*w, Tensor::from_vec(self.value(*w).shape(), gw).unwrap()));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let gb: Vec<f64> = gmat.chunks(ncol).map(|r| r.iter().sum()).collect();
                        out.push((*b, Tensor::from_vec(&[cout], gb).unwrap()));
                    }
                }
                if rg(*x) {
                    let mut gcols = vec![0.0; rows * ncol];
                    gemm(rows, cout, ncol, 1.0, self.value(*w).data(), true, &gmat, false, 0.0, &mut gcols);
                    let gx = col2im(&gcols, bsz, cin, h, wd, kh, kw, *stride, *pad, ho, wo);
                    out.push((*x, Tensor::from_vec(&[bsz, cin, h, wd], gx).unwrap()));
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, din) = self.value(*x).dims2();
                let (dout, _) = self.value(*w).dims2();
                if rg(*x) {
                    let mut gx = vec![0.0; bsz * din];
                    gemm(bsz, dout, din, 1.0, g.data(), false, self.value(*w).data(), false, 0.0, &mut gx);
                    out.push((*x, Tensor::from_vec(&[bsz, din], gx).unwrap()));
                }
                if rg(*w) {
                    let mut gw = vec![0.0; dout * din];
                    gemm(dout, bsz, din, 1.0, g.data(), true, self.value(*x).data(), false, 0.0, &mut gw);
                    out.push((*w, Tensor::from_vec(&[dout, din], gw).unwrap()));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut gb = vec![0.0; dout];
                        for row in g.data().chunks(dout) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        out.push((*b, Tensor::from_vec(&[dout], gb).unwrap()));
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2();
                let n = node.value.dims2().1;
                if rg(*a) {
                    // dA = G * op(B)^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), !*trans_b, 0.0, &mut ga);
                    out.push((*a, Tensor::from_vec(&[m, k], ga).unwrap()));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = G^T * A
                        gemm(n, m, k, 1.0, g.data(), true, self.value(*a).data(), false, 0.0, &mut gb);
                    } else {
                        gemm(k, m, n, 1.0, self.value(*a).data(), true, g.data(), false, 0.0, &mut gb);
                    }
                    out.push((*b, Tensor::from_vec(self.value(*b).shape(), gb).unwrap()));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::Shift(a) => out.push((*a, g.clone())),
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if rg(*x) {
                    out.push((*x, g.map(|v| v * sv)));
                }
                if rg(*s) {
                    let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    out.push((*s, Tensor::scalar(ds)));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.data().iter().zip(xv).map(|(gv, &xi)| gv * gelu_grad(xi)).collect();
                out.push((*x, Tensor::from_vec(g.shape(), d).unwrap()));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.data().iter().zip(xv).map(|(gv, &xi)| if xi > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*x, Tensor::from_vec(g.shape(), d).unwrap()));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    dd[idx] += gv;
                }
                out.push((*x, d));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = Vec::with_capacity(self.value(*x).numel());
                for gv in g.data() {
                    d.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                out.push((*x, Tensor::from_vec(self.value(*x).shape(), d).unwrap()));
            }
            Op::Upsample2(x) => {
                let (b, c, h, w) = self.value(*x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![0.0; b * c * h * w];
                let gd = g.data();
                for bc in 0..b * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[bc * h * w + (y / 2) * w + xx / 2] += gd[bc * h2 * w2 + y * w2 + xx];
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(&[b, c, h, w], d).unwrap()));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.value(*x).shape()).unwrap()));
            }
            Op::NormalizeRows { x, norms } => {
                let (_, d) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*x, Tensor::from_vec(node.value.shape(), dx).unwrap()));
            }
            Op::LayerNormChannels { x, rstd } => {
                let (b, c, h, w) = node.value.dims4();
                let hw = h * w;
                let y = node.value.data();
                let gd = g.data();
                let mut dx = vec![0.0; y.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let at = |ci: usize| (bi * c + ci) * hw + p;
                        let mg = (0..c).map(|ci| gd[at(ci)]).sum::<f64>() / c as f64;
                        let mgy = (0..c).map(|ci| gd[at(ci)] * y[at(ci)]).sum::<f64>() / c as f64;
                        let r = rstd[bi * hw + p];
                        for ci in 0..c {
                            dx[at(ci)] = r * (gd[at(ci)] - mg - y[at(ci)] * mgy);
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(node.value.shape(), dx).unwrap()));
            }
            Op::Attention { q, k, v, attn } => {
                let (b, c, h, w) = node.value.dims4();
                let n = h * w;
                let scale = 1.0 / (c as f64).sqrt();
                let mut gq = vec![0.0; b * c * n];
                let mut gk = vec![0.0; b * c * n];
                let mut gv = vec![0.0; b * c * n];
                let mut ga = vec![0.0; n * n];
                for bi in 0..b {
                    let r = bi * c * n..(bi + 1) * c * n;
                    let a = &attn[bi * n * n..(bi + 1) * n * n];
                    let go = &g.data()[r.clone()];
                    let qs = &self.value(*q).data()[r.clone()];
                    let ks = &self.value(*k).data()[r.clone()];
                    let vs = &self.value(*v).data()[r.clone()];
                    gemm(c, n, n, 1.0, go, false, a, false, 0.0, &mut gv[r.clone()]);
                    gemm(n, c, n, 1.0, go, true, vs, false, 0.0, &mut ga);
                    for (grow, arow) in ga.chunks_mut(n).zip(a.chunks(n)) {
                        let s: f64 = grow.iter().zip(arow).map(|(x, y)| x * y).sum();
                        for (gx, ax) in grow.iter_mut().zip(arow) {
                            *gx = ax * (*gx - s);
                        }
                    }
                    gemm(c, n, n, scale, ks, false, &ga, true, 0.0, &mut gq[r.clone()]);
                    gemm(c, n, n, scale, qs, false, &ga, false, 0.0, &mut gk[r]);
                }
                let shape = node.value.shape().to_vec();
                out.push((*q, Tensor::from_vec(&shape, gq).unwrap()));
                out.push((*k, Tensor::from_vec(&shape, gk).unwrap()));
                out.push((*v, Tensor::from_vec(&shape, gv).unwrap()));
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let (b, c) = self.value(*logits).dims2();
                let gs = g.item() / b as f64;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(c).zip(targets) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let q = smoothing / c as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                        *v = (*v - q) * gs;
                    }
                }
                out.push((*logits, Tensor::from_vec(&[b, c], d).unwrap()));
            }
            Op::Focal { logits, targets, gamma, weights, probs } => {
                let (b, k, h, w) = self.value(*logits).dims4();
                let hw = h * w;
                let gs = g.item() / (b * hw) as f64;
                let mut d = vec![0.0; probs.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let t = targets[bi * hw + p];
                        let pt = probs[(bi * k + t) * hw + p];
                        let wt = weights.as_ref().map_or(1.0, |ws| ws[t]);
                        // coef = p_t * dL/dp_t
                        let one_m = (1.0 - pt).max(0.0);
                        let logp = pt.max(f64::MIN_POSITIVE).ln();
                        let term1 = if *gamma == 0.0 || pt >= 1.0 {
                            0.0
                        } else {
                            gamma * one_m.powf(gamma - 1.0) * pt * logp
                        };
                        let coef = term1 - one_m.powf(*gamma);
                        for ci in 0..k {
                            let pj = probs[(bi * k + ci) * hw + p];
                            let delta = if ci == t { 1.0 } else { 0.0 };
                            d[(bi * k + ci) * hw + p] = gs * wt * coef * (delta - pj);
                        }
                    }
                }
                out.push((*logits, Tensor::from_vec(&[b, k, h, w], d).unwrap()));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, Tensor::full(self.value(*x).shape(), g.item() / n as f64)));
            }
        }
        out
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    row.iter_mut().for_each(|z| *z /= s);
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ncol = b * ho * wo;
    let mut cols = vec![0.0; c * kh * kw * ncol];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let row = &mut cols[r * ncol..(r + 1) * ncol];
                for bi in 0..b {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut row[bi * ho * wo + oy * wo..bi * ho * wo + (oy + 1) * wo];
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ncol = b * ho * wo;
    let mut x = vec![0.0; b * c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let row = &cols[r * ncol..(r + 1) * ncol];
                for bi in 0..b {
                    let plane = &mut x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[bi * ho * wo + oy * wo..bi * ho * wo + (oy + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build)/d(inputs).
    fn gradcheck(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, u)| {
                            let mut u = u.clone();
                            if k == i {
                                u.data_mut()[j] += delta;
                            }
                            tape.leaf(u, false)
                        })
                        .collect();
                    let r = build(&mut tape, &vs);
                    tape.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[j];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} elem {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv_pool_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        gradcheck(vec![x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let y = t.gelu(y);
            let y = t.upsample2(y);
            let y = t.max_pool2(y);
            let y = t.global_avg_pool(y);
            let y = t.normalize_rows(y);
            t.cross_entropy(y, &[0, 2], 0.1)
        });
    }

    #[test]
    fn linear_matmul_scalar_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        let m = rand_tensor(&[5, 2], &mut rng);
        let s = rand_tensor(&[1], &mut rng);
        gradcheck(vec![x, w, b, m, s], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            let y = t.relu(y);
            let z = t.matmul(y, v[3], false);
            let zz = t.matmul(z, z, true);
            let zs = t.mul_scalar(zz, v[4]);
            let d = t.sub(zs, zz);
            let a = t.add(d, zz);
            let a = t.scale(a, 0.3);
            t.mean(a)
        });
    }

    #[test]
    fn attention_layernorm_focal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let k = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let v = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let targets: Vec<usize> = (0..8).map(|i| i % 3).collect();
        for gamma in [0.0, 0.5, 2.0] {
            let targets = targets.clone();
            gradcheck(vec![q.clone(), k.clone(), v.clone()], move |t, vs| {
                let a = t.attention(vs[0], vs[1], vs[2]);
                let n = t.layer_norm_channels(a);
                let r = t.reshape(n, &[2, 3, 2, 2]);
                t.focal_loss(r, &targets, gamma, Some(&[1.0, 0.5, 2.0]))
            });
        }
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&[3, 4, 1, 1], &mut rng);
        let mut t = Tape::new();
        let l = t.leaf(logits.clone(), false);
        let f = t.focal_loss(l, &[0, 3, 1], 0.0, None);
        let l2 = t.leaf(logits.reshape(&[3, 4]).unwrap(), false);
        let c = t.cross_entropy(l2, &[0, 3, 1], 0.0);
        assert!((t.value(f).item() - t.value(c).item()).abs() < 1e-14);
    }

    #[test]
    fn no_grad_leaves_skip_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 2], 1.0), true);
        let w = t.leaf(Tensor::full(&[3, 2], 0.5), false);
        let y = t.linear(x, w, None);
        let l = t.mean(y);
        let g = t.backward(l);
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }
}
