//! Differentiable tensor operations.

use super::{numel, Tensor};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast shapes {a:?} and {b:?}"),
        };
    }
    out
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every index of `out` together with the matching offsets into two
/// broadcast operands, in row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return (data, a.shape().to_vec());
    }
    if b.numel() == 1 && b.rank() <= a.rank() {
        let y = b.data()[0];
        return (a.data().iter().map(|&x| f(x, y)).collect(), a.shape().to_vec());
    }
    let out = broadcast_shapes(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    (data, out)
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Tensor {
    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (data, shape) = binary_data(self, other, |x, y| x + y);
        Tensor::from_op(data, shape, "add", vec![self.clone(), other.clone()], |inp, _, g| {
            vec![Some(g.sum_to(inp[0].shape())), Some(g.sum_to(inp[1].shape()))]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (data, shape) = binary_data(self, other, |x, y| x - y);
        Tensor::from_op(data, shape, "sub", vec![self.clone(), other.clone()], |inp, _, g| {
            vec![Some(g.sum_to(inp[0].shape())), Some(g.neg().sum_to(inp[1].shape()))]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (data, shape) = binary_data(self, other, |x, y| x * y);
        Tensor::from_op(data, shape, "mul", vec![self.clone(), other.clone()], |inp, _, g| {
            let ga = inp[0].requires_grad().then(|| g.mul(&inp[1]).sum_to(inp[0].shape()));
            let gb = inp[1].requires_grad().then(|| g.mul(&inp[0]).sum_to(inp[1].shape()));
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (data, shape) = binary_data(self, other, |x, y| x / y);
        Tensor::from_op(data, shape, "div", vec![self.clone(), other.clone()], |inp, out, g| {
            let ga = inp[0].requires_grad().then(|| g.div(&inp[1]).sum_to(inp[0].shape()));
            let gb = inp[1].requires_grad().then(|| g.mul(out).div(&inp[1]).neg().sum_to(inp[1].shape()));
            vec![ga, gb]
        })
    }

    // ---- elementwise with constants ----

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), "add_scalar", vec![self.clone()], |_, _, g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), "mul_scalar", vec![self.clone()], move |_, _, g| {
            vec![Some(g.mul_scalar(c))]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.neg().add_scalar(c)
    }

    // ---- elementwise unary ----

    fn unary<F>(&self, op: &'static str, f: impl Fn(f64) -> f64, backward: F) -> Tensor
    where
        F: Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()], move |inp, out, g| {
            vec![Some(backward(&inp[0], out, g))]
        })
    }

    /// Multiplies by a constant computed elementwise from this tensor's
    /// values; used for piecewise-linear derivatives.
    fn constant_like(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.data().iter().map(|&x| f(x)).collect(), self.shape())
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, out, g| g.mul(out))
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _, g| g.div(x))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, out, g| g.div(out).mul_scalar(0.5))
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _, g| g.mul(x).mul_scalar(2.0))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _, g| g.mul(&x.sigmoid()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, out, g| g.mul(&out.mul(&out.rsub_scalar(1.0))))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _, g| g.mul(&x.constant_like(|v| if v > 0.0 { 1.0 } else { slope })),
        )
    }

    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _, g| {
            g.mul(&x.constant_like(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _, g| g.mul(&x.constant_like(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 })),
        )
    }

    // ---- reductions and broadcasting ----

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], "sum", vec![self.clone()], |inp, _, g| {
            vec![Some(g.broadcast_to(inp[0].shape()))]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let mut target = self.shape().to_vec();
        target[axis] = 1;
        self.sum_to(&target)
    }

    /// Reduces a broadcast result back to `shape` by summing over the
    /// broadcast axes.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let src = self.shape();
        assert_eq!(broadcast_shapes(shape, src), src, "cannot sum {src:?} to {shape:?}");
        let st = broadcast_strides(shape, src);
        let zero = vec![0; src.len()];
        let mut data = vec![0.0; numel(shape)];
        let sd = self.data();
        for_each_broadcast(src, &st, &zero, |o, t, _| data[t] += sd[o]);
        Tensor::from_op(data, shape.to_vec(), "sum_to", vec![self.clone()], |inp, _, g| {
            vec![Some(g.broadcast_to(inp[0].shape()))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert_eq!(broadcast_shapes(self.shape(), shape), shape, "cannot broadcast {:?} to {shape:?}", self.shape());
        let ss = broadcast_strides(self.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![0.0; numel(shape)];
        let sd = self.data();
        for_each_broadcast(shape, &ss, &zero, |o, s, _| data[o] = sd[s]);
        Tensor::from_op(data, shape.to_vec(), "broadcast_to", vec![self.clone()], |inp, _, g| {
            vec![Some(g.sum_to(inp[0].shape()))]
        })
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "cannot reshape {:?} to {shape:?}", self.shape());
        if shape == self.shape() {
            return self.clone();
        }
        Tensor::from_op_shared(self.shared_data(), shape.to_vec(), "reshape", vec![self.clone()], |inp, _, g| {
            vec![Some(g.reshape(inp[0].shape()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permutation rank");
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let in_shape = self.shape();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0; rank];
        let mut data = vec![0.0; self.numel()];
        let sd = self.data();
        for_each_broadcast(&out_shape, &strides, &zero, |o, s, _| data[o] = sd[s]);
        let inv = inverse_permutation(perm);
        Tensor::from_op(data, out_shape, "permute", vec![self.clone()], move |_, _, g| vec![Some(g.permute(&inv))])
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "t() needs a matrix");
        self.permute(&[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow {start}+{len} out of range for {shape:?} axis {axis}");
        if start == 0 && len == shape[axis] {
            return self.clone();
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        let sd = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&sd[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(data, out_shape, "narrow", vec![self.clone()], move |_, _, g| {
            vec![Some(g.pad_axis(axis, start, full))]
        })
    }

    /// Embeds this tensor at `start` inside a zero tensor of length `full`
    /// along `axis`. Adjoint of [`Tensor::narrow`].
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let shape = self.shape();
        let len = shape[axis];
        assert!(start + len <= full);
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = vec![0.0; outer * full * inner];
        let sd = self.data();
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&sd[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = full;
        Tensor::from_op(data, out_shape, "pad_axis", vec![self.clone()], move |_, _, g| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat rank mismatch");
            for (d, (&x, &y)) in p.shape().iter().zip(first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let full: usize = lens.iter().sum();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * full * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let src = o * len * inner;
                data.extend_from_slice(&p.data()[src..src + len * inner]);
            }
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = full;
        Tensor::from_op(data, out_shape, "concat", parts.to_vec(), move |_, _, g| {
            let mut start = 0;
            lens.iter()
                .map(|&len| {
                    let piece = g.narrow(axis, start, len);
                    start += len;
                    Some(piece)
                })
                .collect()
        })
    }

    // ---- linear algebra ----

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() == 2 && other.rank() == 2, "matmul needs matrices");
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dimension {:?} x {:?}", self.shape(), other.shape());
        let data = matmul_kernel(self.data(), other.data(), m, k, n);
        Tensor::from_op(data, vec![m, n], "matmul", vec![self.clone(), other.clone()], |inp, _, g| {
            let ga = inp[0].requires_grad().then(|| g.matmul(&inp[1].t()));
            let gb = inp[1].requires_grad().then(|| inp[0].t().matmul(g));
            vec![ga, gb]
        })
    }

    // ---- scans ----

    /// Exclusive prefix sum along the last axis: `out[i] = sum_{j<i} x[j]`.
    pub fn cumsum_exclusive(&self) -> Tensor {
        let data = scan_last(self, false);
        Tensor::from_op(data, self.shape().to_vec(), "cumsum_exclusive", vec![self.clone()], |_, _, g| {
            vec![Some(g.rev_cumsum_exclusive())]
        })
    }

    /// Exclusive suffix sum along the last axis: `out[i] = sum_{j>i} x[j]`.
    pub fn rev_cumsum_exclusive(&self) -> Tensor {
        let data = scan_last(self, true);
        Tensor::from_op(data, self.shape().to_vec(), "rev_cumsum_exclusive", vec![self.clone()], |_, _, g| {
            vec![Some(g.cumsum_exclusive())]
        })
    }
}

fn scan_last(t: &Tensor, reverse: bool) -> Vec<f64> {
    let n = *t.shape().last().expect("scan needs rank >= 1");
    let mut out = vec![0.0; t.numel()];
    if n == 0 {
        return out;
    }
    for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
        let mut acc = 0.0;
        if reverse {
            for i in (0..n).rev() {
                dst[i] = acc;
                acc += src[i];
            }
        } else {
            for i in 0..n {
                dst[i] = acc;
                acc += src[i];
            }
        }
    }
    out
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
