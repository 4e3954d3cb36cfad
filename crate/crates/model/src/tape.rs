//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A fresh [`Tape`] is built for every forward pass. Leaves are either
//! constants or trainable parameters; only nodes that depend on a parameter
//! receive gradients.

use mvweak_core::{Real, Tensor};

use crate::kernels::{self, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Element-wise reduction across a list of equal-shape tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseOp {
    Max,
    Sum,
    Mean,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    L2NormalizeRows {
        input: Var,
        inv_norm: Vec<F>,
        clamped: Vec<bool>,
    },
    Fuse {
        inputs: Vec<Var>,
        op: FuseOp,
        winner: Vec<u32>,
    },
    MeanRows(Var),
    SumAll(Var),
    ScalarWithGrad {
        input: Var,
        local: Tensor<F>,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    track_kinks: bool,
    kink_gap: f64,
    branches: u64,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_kinks: false,
            kink_gap: f64::INFINITY,
            branches: FNV_OFFSET,
        }
    }

    /// Records the distance of every non-smooth operation from its kink so
    /// gradient checks can reject points near ties.
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::new()
        }
    }

    /// Smallest distance to a non-differentiable point seen so far.
    pub fn kink_gap(&self) -> f64 {
        self.kink_gap
    }

    pub fn note_kink(&mut self, gap: f64) {
        if self.track_kinks {
            self.kink_gap = self.kink_gap.min(gap);
        }
    }

    /// Hash of every branch taken by a non-smooth operation (ReLU signs,
    /// pooling and fusion winners). Two evaluations with equal hashes ran
    /// through the same linear piece.
    pub fn branch_hash(&self) -> u64 {
        self.branches
    }

    fn note_branches(&mut self, taken: impl Iterator<Item = u64>) {
        if self.track_kinks {
            for v in taken {
                self.branches = (self.branches ^ v).wrapping_mul(FNV_PRIME);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_nt inner dimensions {k} vs {k2}");
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add of mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let r = self.value(row);
        assert_eq!(r.len(), n, "row of length {} added to {m}x{n}", r.len());
        let rd = r.data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(rd).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        self.push(Tensor::from_vec(&[m, n], data).unwrap(), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks && self.ng(a) {
            let gap = self
                .value(a)
                .data()
                .iter()
                .map(|x| x.abs().as_f64())
                .fold(f64::INFINITY, f64::min);
            self.note_kink(gap);
            let signs: Vec<u64> = self.value(a).data().iter().map(|&x| (x > F::zero()) as u64).collect();
            self.note_branches(signs.into_iter());
        }
        let t = self.value(a).map(|x| x.max(F::zero()));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Same-padded stride-1 convolution of NHWC `input` with
    /// `weight [k, k, cin, cout]` and `bias [cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (frames, height, width, cin) = match self.value(input).shape() {
            [n, h, w, c] => (*n, *h, *w, *c),
            s => panic!("conv2d input must be NHWC, got {s:?}"),
        };
        let (kernel, cout) = match self.value(weight).shape() {
            [k, k2, ci, co] if k == k2 && *ci == cin => (*k, *co),
            s => panic!("conv2d weight {s:?} does not match {cin} input channels"),
        };
        assert_eq!(self.value(bias).len(), cout, "conv2d bias length");
        let geom = ConvGeom {
            frames,
            height,
            width,
            cin,
            cout,
            kernel,
        };
        let out = kernels::conv2d(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            geom,
        );
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            Tensor::from_vec(&[frames, height, width, cout], out).unwrap(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Var {
        let (n, h, w, c) = match self.value(input).shape() {
            [n, h, w, c] if h % 2 == 0 && w % 2 == 0 => (*n, *h, *w, *c),
            s => panic!("maxpool2 needs NHWC with even sides, got {s:?}"),
        };
        let (out, argmax, gap) = kernels::maxpool2(self.value(input).data(), n, h, w, c);
        if self.ng(input) {
            self.note_kink(gap);
            self.note_branches(argmax.iter().map(|&i| i as u64));
        }
        let ng = self.ng(input);
        self.push(
            Tensor::from_vec(&[n, h / 2, w / 2, c], out).unwrap(),
            Op::MaxPool2 { input, argmax },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = dims2(self.value(a));
        assert!(start + len <= n, "column slice out of range");
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(&[m, len], data).unwrap(),
            Op::SliceCols { input: a, start },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = dims2(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = dims2(self.value(p));
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&[m, n], data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = dims2(self.value(a));
        assert!(start + len <= m, "row slice out of range");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(&[len, n], data).unwrap(),
            Op::SliceRows { input: a, start },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = dims2(self.value(parts[0])).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims2(self.value(p));
            assert_eq!(pn, n, "concat_rows column mismatch");
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&[m, n], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let mut data = self.value(a).data().to_vec();
        for r in data.chunks_mut(n) {
            let mx = r.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in r.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in r.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[m, n], data).unwrap(), Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (m, n) = dims2(self.value(a));
        let nf = F::of(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in self.value(a).data().chunks(n) {
            let mean = r.iter().copied().sum::<F>() / nf;
            let var = r.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(r.iter().map(|&x| (x - mean) * is));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .chunks(n)
            .flat_map(|r| r.iter().zip(g).zip(b).map(|((&x, &gv), &bv)| x * gv + bv))
            .collect();
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&[m, n], data).unwrap(),
            Op::LayerNormRows {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// `x / sqrt(max(|x|^2, eps))` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: F) -> Var {
        let (m, n) = dims2(self.value(a));
        let mut data = self.value(a).data().to_vec();
        let mut inv_norm = Vec::with_capacity(m);
        let mut clamped = Vec::with_capacity(m);
        for r in data.chunks_mut(n) {
            let sq: F = r.iter().map(|&x| x * x).sum();
            let c = sq < eps;
            let inv = F::one() / sq.max(eps).sqrt();
            for v in r.iter_mut() {
                *v = *v * inv;
            }
            inv_norm.push(inv);
            clamped.push(c);
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(&[m, n], data).unwrap(),
            Op::L2NormalizeRows {
                input: a,
                inv_norm,
                clamped,
            },
            ng,
        )
    }

    /// Element-wise reduction across `inputs`. Max ties resolve to the
    /// earliest input.
    pub fn fuse(&mut self, inputs: &[Var], op: FuseOp) -> Var {
        assert!(!inputs.is_empty(), "fuse of zero tensors");
        let shape = self.value(inputs[0]).shape().to_vec();
        for &v in inputs {
            assert_eq!(self.value(v).shape(), shape.as_slice(), "fuse shape mismatch");
        }
        let len = self.value(inputs[0]).len();
        let mut out = Vec::with_capacity(len);
        let mut winner = Vec::new();
        let mut gap = f64::INFINITY;
        let count = F::of(inputs.len() as f64);
        for i in 0..len {
            match op {
                FuseOp::Max => {
                    let mut best = (self.value(inputs[0]).data()[i], 0u32);
                    let mut second = F::neg_infinity();
                    for (s, &v) in inputs.iter().enumerate().skip(1) {
                        let x = self.value(v).data()[i];
                        if x > best.0 {
                            second = best.0;
                            best = (x, s as u32);
                        } else if x > second {
                            second = x;
                        }
                    }
                    if inputs.len() > 1 {
                        gap = gap.min((best.0 - second).as_f64());
                    }
                    out.push(best.0);
                    winner.push(best.1);
                }
                FuseOp::Sum | FuseOp::Mean => {
                    let mut s = F::zero();
                    for &v in inputs {
                        s = s + self.value(v).data()[i];
                    }
                    out.push(if op == FuseOp::Mean { s / count } else { s });
                }
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        if ng {
            self.note_kink(gap);
            self.note_branches(winner.iter().map(|&w| w as u64));
        }
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::Fuse {
                inputs: inputs.to_vec(),
                op,
                winner,
            },
            ng,
        )
    }

    /// Column means of an `m x n` matrix as a `1 x n` row; each column is
    /// summed top to bottom and then divided by `m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let d = self.value(a).data();
        let mf = F::of(m as f64);
        let data = (0..n)
            .map(|j| {
                let mut s = F::zero();
                for i in 0..m {
                    s = s + d[i * n + j];
                }
                s / mf
            })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[1, n], data).unwrap(), Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Scalar computed outside the tape together with its gradient with
    /// respect to `input`.
    pub fn scalar_with_grad(&mut self, input: Var, value: F, local: Tensor<F>) -> Var {
        assert_eq!(local.shape(), self.value(input).shape(), "local gradient shape");
        let ng = self.ng(input);
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { input, local }, ng)
    }

    /// `sum_i w_i * x_i` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut s = F::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
            s = s + w * self.value(v).data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, d) in t.data_mut().iter_mut().zip(delta) {
                        *a = *a + d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(self.value(v).shape(), delta).unwrap());
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).1;
                if self.ng(*a) {
                    acc(*a, kernels::matmul_nt(gd, self.value(*b).data(), m, n, k));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_tn(self.value(*a).data(), gd, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).0;
                if self.ng(*a) {
                    acc(*a, kernels::matmul(gd, self.value(*b).data(), m, n, k));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_tn(gd, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::AddRow(a, row) => {
                acc(*a, gd.to_vec());
                if self.ng(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![F::zero(); n];
                    for r in gd.chunks(n) {
                        for (x, &y) in d.iter_mut().zip(r) {
                            *x = *x + y;
                        }
                    }
                    acc(*row, d);
                }
            }
            Op::Scale(a, k) => acc(*a, gd.iter().map(|&x| x * *k).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    gd.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect(),
                );
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.ng(*input) {
                    acc(
                        *input,
                        kernels::conv2d_grad_input(gd, self.value(*weight).data(), *geom),
                    );
                }
                if self.ng(*weight) || self.ng(*bias) {
                    let (dw, db) = kernels::conv2d_grad_params(self.value(*input).data(), gd, *geom);
                    acc(*weight, dw);
                    acc(*bias, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![F::zero(); self.value(*input).len()];
                for (&i, &gv) in argmax.iter().zip(gd) {
                    d[i as usize] = d[i as usize] + gv;
                }
                acc(*input, d);
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::SliceCols { input, start } => {
                let (m, n) = dims2(self.value(*input));
                let len = g.shape()[1];
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*input, d);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                    }
                    acc(p, d);
                    off += w;
                }
            }
            Op::SliceRows { input, start } => {
                let (m, n) = dims2(self.value(*input));
                let mut d = vec![F::zero(); m * n];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*input, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*a, d);
            }
            Op::LayerNormRows {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                let nf = F::of(n as f64);
                let gam = self.value(*gamma).data();
                if self.ng(*input) {
                    let mut d = Vec::with_capacity(xhat.len());
                    for ((xr, gr), &is) in xhat.chunks(n).zip(gd.chunks(n)).zip(inv_std) {
                        let dxh: Vec<F> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: F = dxh.iter().copied().sum();
                        let s2: F = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        d.extend(
                            dxh.iter()
                                .zip(xr)
                                .map(|(&dx, &x)| is / nf * (nf * dx - s1 - x * s2)),
                        );
                    }
                    acc(*input, d);
                }
                let mut dg = vec![F::zero(); n];
                let mut db = vec![F::zero(); n];
                for (xr, gr) in xhat.chunks(n).zip(gd.chunks(n)) {
                    for j in 0..n {
                        dg[j] = dg[j] + gr[j] * xr[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::L2NormalizeRows {
                input,
                inv_norm,
                clamped,
            } => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), (&inv, &c)) in y.chunks(n).zip(gd.chunks(n)).zip(inv_norm.iter().zip(clamped)) {
                    if c {
                        d.extend(gr.iter().map(|&gv| gv * inv));
                    } else {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) * inv));
                    }
                }
                acc(*input, d);
            }
            Op::Fuse { inputs, op, winner } => match op {
                FuseOp::Max => {
                    for (s, &v) in inputs.iter().enumerate() {
                        let d = gd
                            .iter()
                            .zip(winner)
                            .map(|(&gv, &w)| if w as usize == s { gv } else { F::zero() })
                            .collect();
                        acc(v, d);
                    }
                }
                FuseOp::Sum => {
                    for &v in inputs {
                        acc(v, gd.to_vec());
                    }
                }
                FuseOp::Mean => {
                    let c = F::of(inputs.len() as f64);
                    for &v in inputs {
                        acc(v, gd.iter().map(|&x| x / c).collect());
                    }
                }
            },
            Op::MeanRows(a) => {
                let (m, n) = dims2(self.value(*a));
                let mf = F::of(m as f64);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(gd.iter().map(|&x| x / mf));
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                acc(*a, vec![gd[0]; len]);
            }
            Op::ScalarWithGrad { input, local } => {
                acc(*input, local.data().iter().map(|&x| x * gd[0]).collect());
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, vec![gd[0] * w]);
                }
            }
        }
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}
