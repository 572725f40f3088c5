//! A small define-by-run reverse-mode engine over 5-D `[batch, channel, x, y, z]`
//! tensors, covering exactly the operations the segmentation network needs.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and returns the gradient of a scalar with respect to each
//! node that requires one. The engine is generic over `f32` (training) and
//! `f64` (gradient verification).

mod conv;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{ArrayD, IxDyn, NdFloat};

use conv::{col2im, gemm, im2col, rows_view, rows_view_mut, Geom};

pub trait Real: NdFloat + Sum + Default + Display + Debug {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution hyper-parameters. Kernels are cubic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Kernel 3, stride 1, padding 1.
    pub const fn same3(groups: usize) -> Self {
        ConvSpec {
            kernel: 3,
            stride: 1,
            padding: 1,
            groups,
        }
    }

    pub const fn pointwise() -> Self {
        ConvSpec {
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    /// Kernel 2, stride 2: halves (or, transposed, doubles) every spatial axis.
    pub const fn down2(groups: usize) -> Self {
        ConvSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
            groups,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        groups: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        groups: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    GroupMax {
        x: Var,
        groups: usize,
        winner: Vec<u8>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Softmax {
        x: Var,
    },
    Dice {
        probs: Var,
        target: ArrayD<T>,
        numer: Vec<T>,
        denom: Vec<T>,
        k: T,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn dims5(shape: &[usize]) -> [usize; 5] {
    assert_eq!(shape.len(), 5, "expected a [batch, channel, x, y, z] tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3], shape[4]]
}

fn slice<T>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("tape tensors are contiguous")
}

fn slice_mut<T>(a: &mut ArrayD<T>) -> &mut [T] {
    a.as_slice_mut().expect("tape tensors are contiguous")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input: gradients are computed for it.
    pub fn param(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Grouped 3-D convolution. `w` is `[c_out, c_in / groups, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let [n, cin, d, h, wd] = dims5(self.shape(x));
        let [cout, cin_g, k0, k1, k2] = dims5(self.shape(w));
        let groups = spec.groups;
        assert!(k0 == spec.kernel && k1 == spec.kernel && k2 == spec.kernel, "kernel shape");
        assert!(cin % groups == 0 && cout % groups == 0, "channels not divisible by groups");
        assert_eq!(cin / groups, cin_g, "weight input channels");
        let geom = Geom::conv([d, h, wd], spec.kernel, spec.stride, spec.padding)
            .expect("kernel larger than padded input");
        let cout_g = cout / groups;
        let taps = geom.taps();
        let rows = cin_g * taps;
        let (big_len, small_len) = (geom.big_len(), geom.small_len());
        let mut out = vec![T::zero(); n * cout * small_len];
        {
            let xs = slice(self.value(x));
            let ws = slice(self.value(w));
            let mut cols = Vec::new();
            for s in 0..n {
                for g in 0..groups {
                    let src = &xs[(s * cin + g * cin_g) * big_len..][..cin_g * big_len];
                    let wg = rows_view(ws, g * cout_g * rows, cout_g, rows, rows);
                    for range in geom.chunks(rows) {
                        let len = (range.1 - range.0) * geom.small[1] * geom.small[2];
                        cols.resize(rows * len, T::zero());
                        im2col(src, cin_g, &geom, range, &mut cols);
                        let colv = rows_view(&cols, 0, rows, len, len);
                        let offset = (s * cout + g * cout_g) * small_len
                            + range.0 * geom.small[1] * geom.small[2];
                        let mut dst = rows_view_mut(&mut out, offset, cout_g, small_len, len);
                        gemm(T::one(), &wg, &colv, T::zero(), &mut dst);
                    }
                }
            }
            if let Some(b) = b {
                let bs = slice(self.value(b));
                assert_eq!(bs.len(), cout, "bias length");
                for (i, chunk) in out.chunks_mut(small_len).enumerate() {
                    let bias = bs[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let shape = [n, cout, geom.small[0], geom.small[1], geom.small[2]];
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                groups,
            },
            &inputs,
        )
    }

    /// Grouped 3-D transposed convolution. `w` is `[c_in, c_out / groups, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let [n, cin, d, h, wd] = dims5(self.shape(x));
        let [wcin, cout_g, k0, k1, k2] = dims5(self.shape(w));
        let groups = spec.groups;
        assert!(k0 == spec.kernel && k1 == spec.kernel && k2 == spec.kernel, "kernel shape");
        assert_eq!(wcin, cin, "weight input channels");
        assert!(cin % groups == 0, "channels not divisible by groups");
        let cin_g = cin / groups;
        let cout = cout_g * groups;
        let geom = Geom::transposed([d, h, wd], spec.kernel, spec.stride, spec.padding)
            .expect("degenerate transposed convolution");
        let taps = geom.taps();
        let rows = cout_g * taps;
        let (big_len, small_len) = (geom.big_len(), geom.small_len());
        let mut out = vec![T::zero(); n * cout * big_len];
        {
            let xs = slice(self.value(x));
            let ws = slice(self.value(w));
            let mut cols = Vec::new();
            for s in 0..n {
                for g in 0..groups {
                    let wg = rows_view(ws, g * cin_g * rows, cin_g, rows, rows);
                    let dst = &mut out[(s * cout + g * cout_g) * big_len..][..cout_g * big_len];
                    for range in geom.chunks(rows) {
                        let len = (range.1 - range.0) * geom.small[1] * geom.small[2];
                        let offset = (s * cin + g * cin_g) * small_len
                            + range.0 * geom.small[1] * geom.small[2];
                        let xv = rows_view(xs, offset, cin_g, small_len, len);
                        cols.resize(rows * len, T::zero());
                        let mut colv = rows_view_mut(&mut cols, 0, rows, len, len);
                        gemm(T::one(), &wg.t(), &xv, T::zero(), &mut colv);
                        col2im(&cols, cout_g, &geom, range, dst);
                    }
                }
            }
            if let Some(b) = b {
                let bs = slice(self.value(b));
                assert_eq!(bs.len(), cout, "bias length");
                for (i, chunk) in out.chunks_mut(big_len).enumerate() {
                    let bias = bs[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let shape = [n, cout, geom.big[0], geom.big[1], geom.big[2]];
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                groups,
            },
            &inputs,
        )
    }

    /// Per-sample, per-channel normalisation over space with affine `gamma`, `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let xs = slice(self.value(x));
        let gs = slice(self.value(gamma));
        let bs = slice(self.value(beta));
        assert_eq!(gs.len(), c, "gamma length");
        assert_eq!(bs.len(), c, "beta length");
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (i, chunk) in xs.chunks(spatial).enumerate() {
            let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64;
            let var = chunk
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / spatial as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = T::of(inv);
            let (gamma, beta) = (gs[i % c], bs[i % c]);
            let base = i * spatial;
            for (j, v) in chunk.iter().enumerate() {
                let h = T::of((v.as_f64() - mean) * inv);
                xhat[base + j] = h;
                out[base + j] = gamma * h + beta;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).mapv(|v| v * k);
        self.push(value, Op::Scale { x, k }, &[x])
    }

    /// Element-wise maximum across `groups` equal channel blocks:
    /// `[n, groups * f, ...] -> [n, f, ...]`. Ties go to the lowest block.
    pub fn group_max(&mut self, x: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert!(groups > 0 && c % groups == 0, "group_max: {c} channels, {groups} groups");
        assert!(groups <= u8::MAX as usize);
        let f = c / groups;
        let spatial: usize = shape[2..].iter().product();
        let xs = slice(self.value(x));
        let mut out = vec![T::zero(); n * f * spatial];
        let mut winner = vec![0u8; out.len()];
        for s in 0..n {
            for ch in 0..f {
                let o = (s * f + ch) * spatial;
                let first = (s * c + ch) * spatial;
                out[o..o + spatial].copy_from_slice(&xs[first..first + spatial]);
                for g in 1..groups {
                    let src = &xs[(s * c + g * f + ch) * spatial..][..spatial];
                    for j in 0..spatial {
                        if src[j] > out[o + j] {
                            out[o + j] = src[j];
                            winner[o + j] = g as u8;
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = f;
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        self.push(value, Op::GroupMax { x, groups, winner }, &[x])
    }

    /// Nearest-neighbour upsampling of every spatial axis by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let [n, c, d, h, w] = dims5(self.shape(x));
        let r = factor;
        let xs = slice(self.value(x));
        let (od, oh, ow) = (d * r, h * r, w * r);
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for (plane, src) in out.chunks_mut(od * oh * ow).zip(xs.chunks(d * h * w)) {
            for z in 0..od {
                for y in 0..oh {
                    let row = &mut plane[(z * oh + y) * ow..][..ow];
                    let from = &src[((z / r) * h + y / r) * w..][..w];
                    for (xi, v) in row.iter_mut().enumerate() {
                        *v = from[xi / r];
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, od, oh, ow]), out).unwrap();
        self.push(value, Op::Upsample { x, factor }, &[x])
    }

    /// Softmax across the channel axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let xs = slice(self.value(x));
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            let base = s * c * spatial;
            for j in 0..spatial {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(xs[base + ch * spatial + j]);
                }
                let mut sum = T::zero();
                for ch in 0..c {
                    let e = (xs[base + ch * spatial + j] - m).exp();
                    out[base + ch * spatial + j] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[base + ch * spatial + j] /= sum;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// `1 - mean over (sample, channel) of (k*I + k*smooth/2) / (P + G + smooth)`
    /// where `I = sum p*g`, `P = sum p`, `G = sum g` over space.
    pub fn dice_loss(&mut self, probs: Var, target: ArrayD<T>, k: T, smooth: T) -> Var {
        let shape = self.shape(probs).to_vec();
        assert_eq!(shape.as_slice(), target.shape(), "dice: target shape");
        let target = target.as_standard_layout().into_owned();
        let spatial: usize = shape[2..].iter().product();
        let pairs = shape[0] * shape[1];
        let ps = slice(self.value(probs));
        let gs = slice(&target);
        let half = T::of(0.5);
        let mut numer = vec![T::zero(); pairs];
        let mut denom = vec![T::zero(); pairs];
        let mut total = T::zero();
        for i in 0..pairs {
            let p = &ps[i * spatial..(i + 1) * spatial];
            let g = &gs[i * spatial..(i + 1) * spatial];
            let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let psum: T = p.iter().copied().sum();
            let gsum: T = g.iter().copied().sum();
            numer[i] = k * inter + k * smooth * half;
            denom[i] = psum + gsum + smooth;
            total += numer[i] / denom[i];
        }
        let loss = T::one() - total / T::of(pairs as f64);
        let value = ArrayD::from_elem(IxDyn(&[1]), loss);
        self.push(
            value,
            Op::Dice {
                probs,
                target,
                numer,
                denom,
                k,
            },
            &[probs],
        )
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let mut acc = |v: Var, delta: ArrayD<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero()
                        }
                    });
                acc(*x, d);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, k } => acc(*x, g.mapv(|v| v * *k)),
            Op::GroupMax { x, groups, winner } => {
                let shape = self.shape(*x).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let f = c / groups;
                let spatial: usize = shape[2..].iter().product();
                let mut d = ArrayD::<T>::zeros(IxDyn(&shape));
                let ds = slice_mut(&mut d);
                let gs = slice(g);
                for s in 0..n {
                    for ch in 0..f {
                        let o = (s * f + ch) * spatial;
                        for j in 0..spatial {
                            let grp = winner[o + j] as usize;
                            ds[(s * c + grp * f + ch) * spatial + j] = gs[o + j];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Upsample { x, factor } => {
                let [n, c, d, h, w] = dims5(self.shape(*x));
                let r = *factor;
                let (oh, ow) = (h * r, w * r);
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, c, d, h, w]));
                let dxs = slice_mut(&mut dx);
                let gs = slice(g);
                for (dst, src) in dxs.chunks_mut(d * h * w).zip(gs.chunks(d * r * oh * ow)) {
                    for z in 0..d * r {
                        for y in 0..oh {
                            let row = &src[(z * oh + y) * ow..][..ow];
                            let into = &mut dst[((z / r) * h + y / r) * w..][..w];
                            for (xi, v) in row.iter().enumerate() {
                                into[xi / r] += *v;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let ys = slice(&node.value);
                let gs = slice(g);
                let mut d = vec![T::zero(); ys.len()];
                for s in 0..n {
                    let base = s * c * spatial;
                    for j in 0..spatial {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let idx = base + ch * spatial + j;
                            dot += gs[idx] * ys[idx];
                        }
                        for ch in 0..c {
                            let idx = base + ch * spatial + j;
                            d[idx] = ys[idx] * (gs[idx] - dot);
                        }
                    }
                }
                acc(*x, ArrayD::from_shape_vec(IxDyn(shape), d).unwrap());
            }
            Op::Dice {
                probs,
                target,
                numer,
                denom,
                k,
            } => {
                let upstream = slice(g)[0];
                let shape = target.shape();
                let spatial: usize = shape[2..].iter().product();
                let pairs = numer.len();
                let scale = -upstream / T::of(pairs as f64);
                let gs = slice(target);
                let mut d = vec![T::zero(); gs.len()];
                for i in 0..pairs {
                    let a = *k / denom[i];
                    let b = numer[i] / (denom[i] * denom[i]);
                    for j in i * spatial..(i + 1) * spatial {
                        d[j] = scale * (a * gs[j] - b);
                    }
                }
                acc(*probs, ArrayD::from_shape_vec(IxDyn(shape), d).unwrap());
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let gs = slice(g);
                let gam = slice(self.value(*gamma));
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gs.len()];
                for (i, (gy, h)) in gs.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = i % c;
                    let mut sum_g = 0.0f64;
                    let mut sum_gh = 0.0f64;
                    for (a, b) in gy.iter().zip(h) {
                        sum_g += a.as_f64();
                        sum_gh += (*a * *b).as_f64();
                    }
                    dgamma[ch] += T::of(sum_gh);
                    dbeta[ch] += T::of(sum_g);
                    let gm = gam[ch].as_f64();
                    let inv = inv_std[i].as_f64();
                    let mean_g = gm * sum_g / spatial as f64;
                    let mean_gh = gm * sum_gh / spatial as f64;
                    let out = &mut dx[i * spatial..(i + 1) * spatial];
                    for j in 0..spatial {
                        let dxh = gm * gy[j].as_f64();
                        out[j] = T::of(inv * (dxh - mean_g - h[j].as_f64() * mean_gh));
                    }
                }
                acc(*x, ArrayD::from_shape_vec(IxDyn(shape), dx).unwrap());
                acc(*gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                acc(*beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                groups,
            } => {
                let [n, cin, ..] = dims5(self.shape(*x));
                let wshape = self.shape(*w).to_vec();
                let cout = wshape[0];
                let cin_g = wshape[1];
                let groups = *groups;
                let cout_g = cout / groups;
                let rows = cin_g * geom.taps();
                let (big_len, small_len) = (geom.big_len(), geom.small_len());
                let xs = slice(self.value(*x));
                let ws = slice(self.value(*w));
                let gs = slice(g);
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dw = vec![T::zero(); ws.len()];
                let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                let mut cols = Vec::new();
                for s in 0..n {
                    for grp in 0..groups {
                        let src = &xs[(s * cin + grp * cin_g) * big_len..][..cin_g * big_len];
                        let wg = rows_view(ws, grp * cout_g * rows, cout_g, rows, rows);
                        for range in geom.chunks(rows) {
                            let len = (range.1 - range.0) * geom.small[1] * geom.small[2];
                            let offset = (s * cout + grp * cout_g) * small_len
                                + range.0 * geom.small[1] * geom.small[2];
                            let dy = rows_view(gs, offset, cout_g, small_len, len);
                            cols.resize(rows * len, T::zero());
                            if need_w {
                                im2col(src, cin_g, geom, range, &mut cols);
                                let colv = rows_view(&cols, 0, rows, len, len);
                                let mut dwg =
                                    rows_view_mut(&mut dw, grp * cout_g * rows, cout_g, rows, rows);
                                gemm(T::one(), &dy, &colv.t(), T::one(), &mut dwg);
                            }
                            if need_x {
                                let mut colv = rows_view_mut(&mut cols, 0, rows, len, len);
                                gemm(T::one(), &wg.t(), &dy, T::zero(), &mut colv);
                                let dst = &mut dx[(s * cin + grp * cin_g) * big_len..]
                                    [..cin_g * big_len];
                                col2im(&cols, cin_g, geom, range, dst);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in gs.chunks(small_len).enumerate() {
                        db[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
                }
                if need_w {
                    acc(*w, ArrayD::from_shape_vec(IxDyn(&wshape), dw).unwrap());
                }
                if need_x {
                    let shape = self.shape(*x).to_vec();
                    acc(*x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                groups,
            } => {
                let [n, cin, ..] = dims5(self.shape(*x));
                let wshape = self.shape(*w).to_vec();
                let cout_g = wshape[1];
                let groups = *groups;
                let cin_g = cin / groups;
                let cout = cout_g * groups;
                let rows = cout_g * geom.taps();
                let (big_len, small_len) = (geom.big_len(), geom.small_len());
                let xs = slice(self.value(*x));
                let ws = slice(self.value(*w));
                let gs = slice(g);
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dw = vec![T::zero(); ws.len()];
                let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                let mut cols = Vec::new();
                if need_x || need_w {
                    for s in 0..n {
                        for grp in 0..groups {
                            let src = &gs[(s * cout + grp * cout_g) * big_len..][..cout_g * big_len];
                            let wg = rows_view(ws, grp * cin_g * rows, cin_g, rows, rows);
                            for range in geom.chunks(rows) {
                                let len = (range.1 - range.0) * geom.small[1] * geom.small[2];
                                let offset = (s * cin + grp * cin_g) * small_len
                                    + range.0 * geom.small[1] * geom.small[2];
                                cols.resize(rows * len, T::zero());
                                im2col(src, cout_g, geom, range, &mut cols);
                                let colv = rows_view(&cols, 0, rows, len, len);
                                if need_x {
                                    let mut dxv = rows_view_mut(&mut dx, offset, cin_g, small_len, len);
                                    gemm(T::one(), &wg, &colv, T::zero(), &mut dxv);
                                }
                                if need_w {
                                    let xv = rows_view(xs, offset, cin_g, small_len, len);
                                    let mut dwg =
                                        rows_view_mut(&mut dw, grp * cin_g * rows, cin_g, rows, rows);
                                    gemm(T::one(), &xv, &colv.t(), T::one(), &mut dwg);
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in gs.chunks(big_len).enumerate() {
                        db[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
                }
                if need_w {
                    acc(*w, ArrayD::from_shape_vec(IxDyn(&wshape), dw).unwrap());
                }
                if need_x {
                    let shape = self.shape(*x).to_vec();
                    acc(*x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
