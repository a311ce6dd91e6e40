//! Reverse-mode autodiff tape over `f64` ndarrays.
//!
//! A `Graph` is rebuilt for every forward pass; leaves hold inputs and
//! leased parameters (cheap `Rc` clones), interior nodes record the op and
//! whatever the backward pass needs. Node ids are append-ordered, so a
//! single reverse sweep is a valid topological order.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::kernels as k;

pub type Value = Rc<ArrayD<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// Saved batch statistics from a training-mode batch norm, for running-stat
/// updates outside the graph.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// Second parent has the same rank with each axis equal or 1.
    MulBcast,
    /// Second parent's shape is a suffix of the first parent's shape.
    AddSuffix,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Scale(f64),
    AddConst,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Relu,
    Gelu,
    Sigmoid,
    Matmul {
        m: usize,
        k: usize,
        n: usize,
    },
    MatmulTb {
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmul {
        bs: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmulTb {
        bs: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        from: Vec<usize>,
    },
    Permute {
        axes: Vec<usize>,
    },
    /// Cyclic shift of axes 1 and 2 of an NHWC tensor.
    RollHw {
        sh: isize,
        sw: isize,
    },
    /// NHWC space-to-depth with zero padding up to a multiple of `block`.
    SpaceToDepth {
        block: usize,
    },
    Concat {
        axis: usize,
        splits: Vec<usize>,
    },
    AdaptiveAvgPool,
    GlobalAvgPool,
    GlobalMaxPool {
        /// Flat spatial argmax per (batch, channel).
        argmax: Vec<usize>,
    },
    /// The im2col buffer is recomputed during backward to keep graph memory
    /// proportional to activations.
    Conv3x3,
    LayerNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Softmax,
    LogSoftmax,
    PickPerRow {
        idx: Vec<usize>,
    },
    GatherRows {
        idx: Vec<usize>,
    },
    L2NormRows {
        inv_norm: Vec<f64>,
    },
    SumAll,
    MeanAll,
}

struct Node {
    value: Value,
    op: Op,
    parents: Vec<TensorId>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to node `id`, if any path carried one.
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("graph values are kept in standard layout")
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn value_rc(&self, id: TensorId) -> Value {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, parents: Vec<TensorId>) -> TensorId {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            parents: vec![],
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf sharing an existing value without copying the data.
    pub fn leaf_shared(&mut self, value: Value, requires_grad: bool) -> TensorId {
        assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: vec![],
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = vec![0.0; self.value(a).len()];
        k::map_binary(slice(self.value(a)), slice(self.value(b)), &mut out, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(from_vec(&shape, out), Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let mut out = vec![0.0; self.value(a).len()];
        k::map_binary(slice(self.value(a)), slice(self.value(b)), &mut out, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(from_vec(&shape, out), Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let mut out = vec![0.0; self.value(a).len()];
        k::map_binary(slice(self.value(a)), slice(self.value(b)), &mut out, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(from_vec(&shape, out), Op::Mul, vec![a, b])
    }

    /// a * broadcast(b) where b has the same rank and each axis is equal or 1.
    pub fn mul_bcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "mul_bcast: rank mismatch");
        for (x, y) in sa.iter().zip(&sb) {
            assert!(y == x || *y == 1, "mul_bcast: axis mismatch {sa:?} vs {sb:?}");
        }
        let vb = self.value(b).broadcast(IxDyn(&sa)).unwrap().to_owned();
        let mut out = vec![0.0; self.value(a).len()];
        k::map_binary(slice(self.value(a)), slice(&vb), &mut out, |x, y| x * y);
        self.push(from_vec(&sa, out), Op::MulBcast, vec![a, b])
    }

    /// a + broadcast(b) where b's shape is a suffix of a's shape.
    pub fn add_suffix(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..], "add_suffix: {sb:?} not a suffix of {sa:?}");
        let suffix: usize = sb.iter().product::<usize>().max(1);
        let va = slice(self.value(a));
        let vb_owned = self.value_rc(b);
        let vb = slice(&vb_owned);
        let mut out = vec![0.0; va.len()];
        k::fill_rows(&mut out, suffix, |i, row| {
            let src = &va[i * suffix..i * suffix + row.len()];
            for ((o, &x), &y) in row.iter_mut().zip(src).zip(vb) {
                *o = x + y;
            }
        });
        self.push(from_vec(&sa, out), Op::AddSuffix, vec![a, b])
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Ln, f64::ln)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, Op::Scale(c), move |x| c * x)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, Op::AddConst, move |x| x + c)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, Op::Clamp { lo, hi }, move |x| x.clamp(lo, hi))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Gelu, gelu_tanh)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(f64) -> f64 + Sync + Send) -> TensorId {
        let mut out = vec![0.0; self.value(a).len()];
        k::map_unary(slice(self.value(a)), &mut out, f);
        let shape = self.shape(a).to_vec();
        self.push(from_vec(&shape, out), op, vec![a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        k::matmul(slice(self.value(a)), slice(self.value(b)), m, kk, n, &mut out);
        self.push(from_vec(&[m, n], out), Op::Matmul { m, k: kk, n }, vec![a, b])
    }

    /// a [m,k] x b[n,k]^T -> [m,n]
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_tb: {sa:?} x {sb:?}^T");
        let (m, kk, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        k::matmul_tb(slice(self.value(a)), slice(self.value(b)), m, kk, n, &mut out);
        self.push(from_vec(&[m, n], out), Op::MatmulTb { m, k: kk, n }, vec![a, b])
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm: {sa:?} x {sb:?}");
        let (bs, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        k::batch_matmul(slice(self.value(a)), slice(self.value(b)), bs, m, kk, n, &mut out);
        self.push(from_vec(&[bs, m, n], out), Op::BatchMatmul { bs, m, k: kk, n }, vec![a, b])
    }

    /// a [bs,m,k] x b[bs,n,k]^T -> [bs,m,n]
    pub fn bmm_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "bmm_tb: {sa:?} x {sb:?}^T");
        let (bs, m, kk, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        k::batch_matmul_tb(slice(self.value(a)), slice(self.value(b)), bs, m, kk, n, &mut out);
        self.push(from_vec(&[bs, m, n], out), Op::BatchMatmulTb { bs, m, k: kk, n }, vec![a, b])
    }

    /// Affine map on the last axis: x [..., in] -> [..., out] via weight
    /// [in, out] plus optional bias [out].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2);
        let d_in = *sx.last().unwrap();
        assert_eq!(d_in, sw[0], "linear: input width {d_in} vs weight {sw:?}");
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, d_in]);
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add_suffix(y, b);
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let from = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape: {from:?} -> {shape:?}");
        let out = from_vec(shape, slice(self.value(a)).to_vec());
        self.push(out, Op::Reshape { from }, vec![a])
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> TensorId {
        let v = self.value(a).clone().permuted_axes(IxDyn(axes));
        let out = v.as_standard_layout().to_owned();
        self.push(out, Op::Permute { axes: axes.to_vec() }, vec![a])
    }

    pub fn roll_hw(&mut self, a: TensorId, sh: isize, sw: isize) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "roll_hw expects NHWC");
        let out = roll_nhwc(slice(self.value(a)), &s, sh, sw);
        self.push(from_vec(&s, out), Op::RollHw { sh, sw }, vec![a])
    }

    /// NHWC -> [B, ceil(H/k), ceil(W/k), k*k*C]; zero pads ragged edges.
    /// Block scan order is row-major over (dy, dx), channels innermost.
    pub fn space_to_depth(&mut self, a: TensorId, block: usize) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "space_to_depth expects NHWC");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(block), w.div_ceil(block));
        let oc = block * block * c;
        let va = slice(self.value(a));
        let mut out = vec![0.0; b * oh * ow * oc];
        k::fill_rows(&mut out, oc, |pix, row| {
            let bi = pix / (oh * ow);
            let oy = (pix / ow) % oh;
            let ox = pix % ow;
            for dy in 0..block {
                for dx in 0..block {
                    let seg = &mut row[(dy * block + dx) * c..(dy * block + dx + 1) * c];
                    let sy = oy * block + dy;
                    let sx = ox * block + dx;
                    if sy < h && sx < w {
                        let off = ((bi * h + sy) * w + sx) * c;
                        seg.copy_from_slice(&va[off..off + c]);
                    } else {
                        seg.fill(0.0);
                    }
                }
            }
        });
        self.push(from_vec(&[b, oh, ow, oc], out), Op::SpaceToDepth { block }, vec![a])
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(ndarray::Axis(axis), &views).expect("concat: incompatible shapes");
        let splits = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let out = out.as_standard_layout().to_owned();
        self.push(out, Op::Concat { axis, splits }, parts.to_vec())
    }

    // ---- pooling / conv ----

    pub fn adaptive_avg_pool(&mut self, a: TensorId, oh: usize, ow: usize) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; b * oh * ow * c];
        k::adaptive_avg_pool(slice(self.value(a)), b, h, w, c, oh, ow, &mut out);
        self.push(from_vec(&[b, oh, ow, c], out), Op::AdaptiveAvgPool, vec![a])
    }

    pub fn global_avg_pool(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let va = slice(self.value(a));
        let mut out = vec![0.0; b * c];
        k::fill_rows(&mut out, c, |bi, row| {
            row.fill(0.0);
            let img = &va[bi * h * w * c..(bi + 1) * h * w * c];
            for p in 0..h * w {
                for (o, &v) in row.iter_mut().zip(&img[p * c..(p + 1) * c]) {
                    *o += v;
                }
            }
            for o in row.iter_mut() {
                *o /= (h * w) as f64;
            }
        });
        self.push(from_vec(&[b, c], out), Op::GlobalAvgPool, vec![a])
    }

    pub fn global_max_pool(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let va = slice(self.value(a));
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            let img = &va[bi * h * w * c..(bi + 1) * h * w * c];
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_p = 0;
                for p in 0..h * w {
                    let v = img[p * c + ch];
                    if v > best {
                        best = v;
                        best_p = p;
                    }
                }
                out[bi * c + ch] = best;
                argmax[bi * c + ch] = best_p;
            }
        }
        self.push(from_vec(&[b, c], out), Op::GlobalMaxPool { argmax }, vec![a])
    }

    /// Same-padded stride-1 3x3 convolution in NHWC. Weight layout is
    /// [9*c_in, c_out] in im2col row order; bias is [c_out].
    pub fn conv3x3(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4);
        assert_eq!(sw.len(), 2);
        let (bs, h, ww, cin) = (sx[0], sx[1], sx[2], sx[3]);
        assert_eq!(sw[0], 9 * cin, "conv3x3: weight rows != 9*c_in");
        let cout = sw[1];
        let mut cols = vec![0.0; bs * h * ww * 9 * cin];
        k::im2col_3x3(slice(self.value(x)), bs, h, ww, cin, &mut cols);
        let mut y = vec![0.0; bs * h * ww * cout];
        k::matmul(&cols, slice(self.value(w)), bs * h * ww, 9 * cin, cout, &mut y);
        let vb_owned = self.value_rc(b);
        let vb = slice(&vb_owned);
        k::fill_rows(&mut y, cout, |_, row| {
            for (o, &bv) in row.iter_mut().zip(vb) {
                *o += bv;
            }
        });
        drop(cols);
        self.push(from_vec(&[bs, h, ww, cout], y), Op::Conv3x3, vec![x, w, b])
    }

    // ---- normalization ----

    /// Layer norm over the last axis with learned gamma/beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let rows = self.value(x).len() / d;
        let vx = slice(self.value(x));
        let vg_owned = self.value_rc(gamma);
        let vb_owned = self.value_rc(beta);
        let (vg, vb) = (slice(&vg_owned), slice(&vb_owned));
        let mut out = vec![0.0; vx.len()];
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        k::fill_rows(&mut xhat, d, |r, row| {
            let src = &vx[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for (o, &v) in row.iter_mut().zip(src) {
                *o = (v - mean) * istd;
            }
        });
        k::fill_rows(&mut inv_std, 1, |r, istd| {
            let src = &vx[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            istd[0] = 1.0 / (var + eps).sqrt();
        });
        k::fill_rows(&mut out, d, |r, row| {
            let xh = &xhat[r * d..(r + 1) * d];
            for ((o, &h), (&g, &b)) in row.iter_mut().zip(xh).zip(vg.iter().zip(vb)) {
                *o = g * h + b;
            }
        });
        self.push(from_vec(&s, out), Op::LayerNorm { xhat, inv_std }, vec![x, gamma, beta])
    }

    /// Batch norm over axis 0 of [n, c] using batch statistics; returns the
    /// normalized output plus the stats for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> (TensorId, BatchStats) {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "batch_norm expects [n, c]");
        let (n, c) = (s[0], s[1]);
        assert!(n > 0);
        let vx = slice(self.value(x));
        let vg_owned = self.value_rc(gamma);
        let vb_owned = self.value_rc(beta);
        let (vg, vb) = (slice(&vg_owned), slice(&vb_owned));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in vx.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for row in vx.chunks(c) {
            for ((va, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *va += (v - m) * (v - m);
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        k::fill_rows(&mut xhat, c, |r, row| {
            let src = &vx[r * c..(r + 1) * c];
            for (j, o) in row.iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        });
        k::fill_rows(&mut out, c, |r, row| {
            let xh = &xhat[r * c..(r + 1) * c];
            for (j, o) in row.iter_mut().enumerate() {
                *o = vg[j] * xh[j] + vb[j];
            }
        });
        let stats = BatchStats { mean, var };
        let id = self.push(
            from_vec(&s, out),
            Op::BatchNormTrain { xhat, inv_std },
            vec![x, gamma, beta],
        );
        (id, stats)
    }

    /// Batch norm in inference mode with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> TensorId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "batch_norm expects [n, c]");
        let c = s[1];
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let vx = slice(self.value(x));
        let vg_owned = self.value_rc(gamma);
        let vb_owned = self.value_rc(beta);
        let (vg, vb) = (slice(&vg_owned), slice(&vb_owned));
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; vx.len()];
        k::fill_rows(&mut out, c, |r, row| {
            let src = &vx[r * c..(r + 1) * c];
            for (j, o) in row.iter_mut().enumerate() {
                *o = vg[j] * (src[j] - mean[j]) * inv_std[j] + vb[j];
            }
        });
        self.push(
            from_vec(&s, out),
            Op::BatchNormEval { mean: mean.to_vec(), var: var.to_vec(), eps },
            vec![x, gamma, beta],
        )
    }

    // ---- softmax family ----

    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let mut out = vec![0.0; self.value(a).len()];
        k::softmax_rows(slice(self.value(a)), n, &mut out);
        self.push(from_vec(&s, out), Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let mut out = vec![0.0; self.value(a).len()];
        k::log_softmax_rows(slice(self.value(a)), n, &mut out);
        self.push(from_vec(&s, out), Op::LogSoftmax, vec![a])
    }

    /// [n, c] -> [n] selecting column idx[i] from row i.
    pub fn pick_per_row(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(idx.len(), s[0]);
        let va = slice(self.value(a));
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| {
            assert!(j < s[1], "pick_per_row: column {j} out of range {}", s[1]);
            va[i * s[1] + j]
        }).collect();
        self.push(from_vec(&[s[0]], out), Op::PickPerRow { idx: idx.to_vec() }, vec![a])
    }

    /// Gathers rows along axis 0; duplicate indices allowed.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let s = self.shape(a).to_vec();
        let row_len: usize = s[1..].iter().product::<usize>().max(1);
        let va = slice(self.value(a));
        let mut out = vec![0.0; idx.len() * row_len];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < s[0], "gather_rows: row {i} out of range {}", s[0]);
            out[r * row_len..(r + 1) * row_len].copy_from_slice(&va[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = s.clone();
        out_shape[0] = idx.len();
        self.push(from_vec(&out_shape, out), Op::GatherRows { idx: idx.to_vec() }, vec![a])
    }

    /// Row-wise L2 normalization of [n, d].
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let va = slice(self.value(a));
        let mut inv_norm = vec![0.0; n];
        for (r, inv) in inv_norm.iter_mut().enumerate() {
            let row = &va[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            *inv = 1.0 / norm;
        }
        let mut out = vec![0.0; va.len()];
        k::fill_rows(&mut out, d, |r, row| {
            let src = &va[r * d..(r + 1) * d];
            for (o, &v) in row.iter_mut().zip(src) {
                *o = v * inv_norm[r];
            }
        });
        self.push(from_vec(&s, out), Op::L2NormRows { inv_norm }, vec![a])
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = slice(self.value(a)).iter().sum();
        self.push(from_vec(&[], vec![total]), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len();
        assert!(n > 0);
        let total: f64 = slice(self.value(a)).iter().sum();
        self.push(from_vec(&[], vec![total / n as f64]), Op::MeanAll, vec![a])
    }

    // ---- backward ----

    pub fn backward(&self, root: TensorId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(IxDyn(self.shape(root))));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.backprop_node(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn parent_value(&self, id: usize, which: usize) -> &ArrayD<f64> {
        self.value(self.nodes[id].parents[which])
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], id: usize, which: usize, delta: ArrayD<f64>) {
        let p = self.nodes[id].parents[which];
        if !self.nodes[p.0].requires_grad {
            return;
        }
        match &mut grads[p.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[id];
        let gs = slice(g);
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.acc(grads, id, 0, g.clone());
                self.acc(grads, id, 1, g.clone());
            }
            Op::Sub => {
                self.acc(grads, id, 0, g.clone());
                self.acc(grads, id, 1, -g.clone());
            }
            Op::Mul => {
                let da = g * self.parent_value(id, 1);
                let db = g * self.parent_value(id, 0);
                self.acc(grads, id, 0, da);
                self.acc(grads, id, 1, db);
            }
            Op::MulBcast => {
                let sa = self.parent_value(id, 0).shape().to_vec();
                let sb = self.parent_value(id, 1).shape().to_vec();
                let vb = self.parent_value(id, 1).broadcast(IxDyn(&sa)).unwrap().to_owned();
                self.acc(grads, id, 0, g * &vb);
                let mut db = g * self.parent_value(id, 0);
                for (axis, (&da_len, &db_len)) in sa.iter().zip(&sb).enumerate() {
                    if db_len == 1 && da_len != 1 {
                        db = db.sum_axis(ndarray::Axis(axis)).insert_axis(ndarray::Axis(axis));
                    }
                }
                self.acc(grads, id, 1, db);
            }
            Op::AddSuffix => {
                self.acc(grads, id, 0, g.clone());
                let sb = self.parent_value(id, 1).shape().to_vec();
                let suffix: usize = sb.iter().product::<usize>().max(1);
                let mut db = vec![0.0; suffix];
                for row in gs.chunks(suffix) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc(grads, id, 1, from_vec(&sb, db));
            }
            Op::Neg => self.acc(grads, id, 0, -g.clone()),
            Op::Exp => {
                let da = g * &*node.value;
                self.acc(grads, id, 0, da);
            }
            Op::Ln => {
                let da = g / self.parent_value(id, 0);
                self.acc(grads, id, 0, da);
            }
            Op::Sqrt => {
                let da = g / &(&*node.value * 2.0);
                self.acc(grads, id, 0, da);
            }
            Op::Scale(c) => self.acc(grads, id, 0, g * *c),
            Op::AddConst => self.acc(grads, id, 0, g.clone()),
            Op::Clamp { lo, hi } => {
                let x = self.parent_value(id, 0);
                let mask = x.mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                self.acc(grads, id, 0, g * &mask);
            }
            Op::Relu => {
                let x = self.parent_value(id, 0);
                let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, id, 0, g * &mask);
            }
            Op::Gelu => {
                let x = self.parent_value(id, 0);
                let dda = x.mapv(gelu_tanh_grad);
                self.acc(grads, id, 0, g * &dda);
            }
            Op::Sigmoid => {
                let y = &*node.value;
                let da = g * &(y * &y.mapv(|v| 1.0 - v));
                self.acc(grads, id, 0, da);
            }
            Op::Matmul { m, k: kk, n } => {
                let (a, b) = (self.parent_value(id, 0), self.parent_value(id, 1));
                let mut da = vec![0.0; m * kk];
                k::matmul_tb(gs, slice(b), *m, *n, *kk, &mut da);
                self.acc(grads, id, 0, from_vec(&[*m, *kk], da));
                let mut db = vec![0.0; kk * n];
                k::matmul_ta(slice(a), gs, *m, *kk, *n, &mut db);
                self.acc(grads, id, 1, from_vec(&[*kk, *n], db));
            }
            Op::MatmulTb { m, k: kk, n } => {
                let (a, b) = (self.parent_value(id, 0), self.parent_value(id, 1));
                let mut da = vec![0.0; m * kk];
                k::matmul(gs, slice(b), *m, *n, *kk, &mut da);
                self.acc(grads, id, 0, from_vec(&[*m, *kk], da));
                let mut db = vec![0.0; n * kk];
                k::matmul_ta(gs, slice(a), *m, *n, *kk, &mut db);
                self.acc(grads, id, 1, from_vec(&[*n, *kk], db));
            }
            Op::BatchMatmul { bs, m, k: kk, n } => {
                let (a, b) = (self.parent_value(id, 0), self.parent_value(id, 1));
                let (va, vb) = (slice(a), slice(b));
                let mut da = vec![0.0; bs * m * kk];
                let mut db = vec![0.0; bs * kk * n];
                k::fill_rows(&mut da, m * kk, |s, out_s| {
                    let g_s = &gs[s * m * n..(s + 1) * m * n];
                    let b_s = &vb[s * kk * n..(s + 1) * kk * n];
                    k_matmul_tb_seq(g_s, b_s, *m, *n, *kk, out_s);
                });
                k::fill_rows(&mut db, kk * n, |s, out_s| {
                    let g_s = &gs[s * m * n..(s + 1) * m * n];
                    let a_s = &va[s * m * kk..(s + 1) * m * kk];
                    k_matmul_ta_seq(a_s, g_s, *m, *kk, *n, out_s);
                });
                self.acc(grads, id, 0, from_vec(&[*bs, *m, *kk], da));
                self.acc(grads, id, 1, from_vec(&[*bs, *kk, *n], db));
            }
            Op::BatchMatmulTb { bs, m, k: kk, n } => {
                let (a, b) = (self.parent_value(id, 0), self.parent_value(id, 1));
                let (va, vb) = (slice(a), slice(b));
                let mut da = vec![0.0; bs * m * kk];
                let mut db = vec![0.0; bs * n * kk];
                k::fill_rows(&mut da, m * kk, |s, out_s| {
                    let g_s = &gs[s * m * n..(s + 1) * m * n];
                    let b_s = &vb[s * n * kk..(s + 1) * n * kk];
                    k_matmul_seq(g_s, b_s, *m, *n, *kk, out_s);
                });
                k::fill_rows(&mut db, n * kk, |s, out_s| {
                    let g_s = &gs[s * m * n..(s + 1) * m * n];
                    let a_s = &va[s * m * kk..(s + 1) * m * kk];
                    k_matmul_ta_seq(g_s, a_s, *m, *n, *kk, out_s);
                });
                self.acc(grads, id, 0, from_vec(&[*bs, *m, *kk], da));
                self.acc(grads, id, 1, from_vec(&[*bs, *n, *kk], db));
            }
            Op::Reshape { from } => {
                let da = from_vec(from, gs.to_vec());
                self.acc(grads, id, 0, da);
            }
            Op::Permute { axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let da = g.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                self.acc(grads, id, 0, da);
            }
            Op::RollHw { sh, sw } => {
                let s = node.value.shape().to_vec();
                let da = roll_nhwc(gs, &s, -sh, -sw);
                self.acc(grads, id, 0, from_vec(&s, da));
            }
            Op::SpaceToDepth { block } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (b, h, w, c) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let (oh, ow) = (h.div_ceil(*block), w.div_ceil(*block));
                let oc = block * block * c;
                let block = *block;
                let mut da = vec![0.0; b * h * w * c];
                k::fill_rows(&mut da, c, |pix, px| {
                    let bi = pix / (h * w);
                    let y = (pix / w) % h;
                    let x = pix % w;
                    let (oy, dy) = (y / block, y % block);
                    let (ox, dx) = (x / block, x % block);
                    let off = ((bi * oh + oy) * ow + ox) * oc + (dy * block + dx) * c;
                    px.copy_from_slice(&gs[off..off + c]);
                });
                self.acc(grads, id, 0, from_vec(&s_in, da));
            }
            Op::Concat { axis, splits } => {
                let mut start = 0;
                for (which, &len) in splits.iter().enumerate() {
                    let sl = g
                        .slice_axis(ndarray::Axis(*axis), ndarray::Slice::from(start as isize..(start + len) as isize))
                        .as_standard_layout()
                        .to_owned();
                    self.acc(grads, id, which, sl);
                    start += len;
                }
            }
            Op::AdaptiveAvgPool => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let s_out = node.value.shape().to_vec();
                let mut da = vec![0.0; self.parent_value(id, 0).len()];
                k::adaptive_avg_pool_backward(gs, s_in[0], s_in[1], s_in[2], s_in[3], s_out[1], s_out[2], &mut da);
                self.acc(grads, id, 0, from_vec(&s_in, da));
            }
            Op::GlobalAvgPool => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (_, h, w, c) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let scale = 1.0 / (h * w) as f64;
                let mut da = vec![0.0; self.parent_value(id, 0).len()];
                k::fill_rows(&mut da, c, |pix, px| {
                    let bi = pix / (h * w);
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = gs[bi * c + j] * scale;
                    }
                });
                self.acc(grads, id, 0, from_vec(&s_in, da));
            }
            Op::GlobalMaxPool { argmax } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (b, h, w, c) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let mut da = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for ch in 0..c {
                        let p = argmax[bi * c + ch];
                        da[(bi * h * w + p) * c + ch] += gs[bi * c + ch];
                    }
                }
                self.acc(grads, id, 0, from_vec(&s_in, da));
            }
            Op::Conv3x3 => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (bs, h, w, cin) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let cout = node.value.shape()[3];
                let rows = bs * h * w;
                let mut cols = vec![0.0; rows * 9 * cin];
                k::im2col_3x3(slice(self.parent_value(id, 0)), bs, h, w, cin, &mut cols);
                // dW = cols^T . g
                let mut dw = vec![0.0; 9 * cin * cout];
                k::matmul_ta(&cols, gs, rows, 9 * cin, cout, &mut dw);
                drop(cols);
                self.acc(grads, id, 1, from_vec(&[9 * cin, cout], dw));
                // db = column sums of g
                let mut dbias = vec![0.0; cout];
                for row in gs.chunks(cout) {
                    for (o, &v) in dbias.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc(grads, id, 2, from_vec(&[cout], dbias));
                // dx = col2im(g . W^T)
                let wv = self.parent_value(id, 1);
                let mut dcols = vec![0.0; rows * 9 * cin];
                k::matmul_tb(gs, slice(wv), rows, cout, 9 * cin, &mut dcols);
                let mut dx = vec![0.0; bs * h * w * cin];
                k::col2im_3x3(&dcols, bs, h, w, cin, &mut dx);
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::LayerNorm { xhat, inv_std } => {
                let sg = self.parent_value(id, 1).shape().to_vec();
                let d = sg[0];
                let rows = gs.len() / d;
                let vgamma_owned = self.value_rc(self.nodes[id].parents[1]);
                let vgamma = slice(&vgamma_owned);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let grow = &gs[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.acc(grads, id, 1, from_vec(&[d], dgamma));
                self.acc(grads, id, 2, from_vec(&[d], dbeta));
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, d, |r, px| {
                    let grow = &gs[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..d {
                        let gg = grow[j] * vgamma[j];
                        mean_gg += gg;
                        mean_ggx += gg * xh[j];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for (j, o) in px.iter_mut().enumerate() {
                        let gg = grow[j] * vgamma[j];
                        *o = inv_std[r] * (gg - mean_gg - xh[j] * mean_ggx);
                    }
                });
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (n, c) = (s_in[0], s_in[1]);
                let vgamma_owned = self.value_rc(self.nodes[id].parents[1]);
                let vgamma = slice(&vgamma_owned);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut mean_g = vec![0.0; c];
                let mut mean_gx = vec![0.0; c];
                for r in 0..n {
                    let grow = &gs[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                        mean_g[j] += grow[j];
                        mean_gx[j] += grow[j] * xh[j];
                    }
                }
                for j in 0..c {
                    mean_g[j] /= n as f64;
                    mean_gx[j] /= n as f64;
                }
                self.acc(grads, id, 1, from_vec(&[c], dgamma));
                self.acc(grads, id, 2, from_vec(&[c], dbeta));
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, c, |r, px| {
                    let grow = &gs[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = vgamma[j] * inv_std[j] * (grow[j] - mean_g[j] - xh[j] * mean_gx[j]);
                    }
                });
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::BatchNormEval { mean, var, eps } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let (n, c) = (s_in[0], s_in[1]);
                let vx = slice(self.parent_value(id, 0));
                let vgamma_owned = self.value_rc(self.nodes[id].parents[1]);
                let vgamma = slice(&vgamma_owned);
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..n {
                    let grow = &gs[r * c..(r + 1) * c];
                    let xrow = &vx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dgamma[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.acc(grads, id, 1, from_vec(&[c], dgamma));
                self.acc(grads, id, 2, from_vec(&[c], dbeta));
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, c, |r, px| {
                    let grow = &gs[r * c..(r + 1) * c];
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = grow[j] * vgamma[j] * inv_std[j];
                    }
                });
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::Softmax => {
                let s = node.value.shape().to_vec();
                let d = *s.last().unwrap();
                let sv = slice(&node.value);
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, d, |r, px| {
                    let grow = &gs[r * d..(r + 1) * d];
                    let srow = &sv[r * d..(r + 1) * d];
                    let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = srow[j] * (grow[j] - dot);
                    }
                });
                self.acc(grads, id, 0, from_vec(&s, dx));
            }
            Op::LogSoftmax => {
                let s = node.value.shape().to_vec();
                let d = *s.last().unwrap();
                let lv = slice(&node.value);
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, d, |r, px| {
                    let grow = &gs[r * d..(r + 1) * d];
                    let lrow = &lv[r * d..(r + 1) * d];
                    let gsum: f64 = grow.iter().sum();
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = grow[j] - lrow[j].exp() * gsum;
                    }
                });
                self.acc(grads, id, 0, from_vec(&s, dx));
            }
            Op::PickPerRow { idx } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let mut dx = vec![0.0; self.parent_value(id, 0).len()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * s_in[1] + j] += gs[i];
                }
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::GatherRows { idx } => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let row_len: usize = s_in[1..].iter().product::<usize>().max(1);
                let mut dx = vec![0.0; self.parent_value(id, 0).len()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dx[i * row_len..(i + 1) * row_len];
                    let src = &gs[r * row_len..(r + 1) * row_len];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.acc(grads, id, 0, from_vec(&s_in, dx));
            }
            Op::L2NormRows { inv_norm } => {
                let s = node.value.shape().to_vec();
                let d = s[1];
                let yv = slice(&node.value);
                let mut dx = vec![0.0; gs.len()];
                k::fill_rows(&mut dx, d, |r, px| {
                    let grow = &gs[r * d..(r + 1) * d];
                    let yrow = &yv[r * d..(r + 1) * d];
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (j, o) in px.iter_mut().enumerate() {
                        *o = inv_norm[r] * (grow[j] - yrow[j] * dot);
                    }
                });
                self.acc(grads, id, 0, from_vec(&s, dx));
            }
            Op::SumAll => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let gv = gs[0];
                self.acc(grads, id, 0, ArrayD::from_elem(IxDyn(&s_in), gv));
            }
            Op::MeanAll => {
                let s_in = self.parent_value(id, 0).shape().to_vec();
                let n = self.parent_value(id, 0).len();
                let gv = gs[0] / n as f64;
                self.acc(grads, id, 0, ArrayD::from_elem(IxDyn(&s_in), gv));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn roll_nhwc(x: &[f64], shape: &[usize], sh: isize, sw: isize) -> Vec<f64> {
    let (_b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    k::fill_rows(&mut out, c, |pix, px| {
        let bi = pix / (h * w);
        let y = (pix / w) % h;
        let xx = pix % w;
        // out[y][x] = in[y - sh mod h][x - sw mod w]
        let sy = (y as isize - sh).rem_euclid(h as isize) as usize;
        let sx = (xx as isize - sw).rem_euclid(w as isize) as usize;
        let off = ((bi * h + sy) * w + sx) * c;
        px.copy_from_slice(&x[off..off + c]);
    });
    out
}

// Sequential single-slice matmul helpers used inside batched backward loops
// (the outer loop already parallelizes over slices).

fn k_matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        for kk in 0..k {
            let aik = a[i * k + kk];
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
}

fn k_matmul_tb_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

fn k_matmul_ta_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
}
