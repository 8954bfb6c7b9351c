//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the reverse sweep in [`Graph::backward`] is a plain
//! walk from the end of the tape.

use super::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    PowConst(Var, T),
    LogFloor(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    Softmax(Var),
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Upsample2(Var),
    BoxFilter(Var, usize),
    PsnrCapped { mse: Var, max_sq: T, cap: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of tensor operations supporting one reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn conv_out(size: usize, k: usize, g: ConvGeometry) -> usize {
    (size + 2 * g.pad - k) / g.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..][..w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid-mode k x k mean filter over each trailing `h x w` plane.
fn box_filter<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let scale = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut horiz = vec![T::zero(); h * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for ox in 0..wo {
                let mut s = T::zero();
                for dx in 0..k {
                    s = s + src[y * w + ox + dx];
                }
                horiz[y * wo + ox] = s;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..k {
                    s = s + horiz[(oy + dy) * wo + ox];
                }
                dst[oy * wo + ox] = s * scale;
            }
        }
    }
    out
}

fn box_filter_backward<T: Scalar>(gout: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let scale = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut vert = vec![T::zero(); h * wo];
    for p in 0..planes {
        let g = &gout[p * ho * wo..(p + 1) * ho * wo];
        vert.fill(T::zero());
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * scale;
                for dy in 0..k {
                    vert[(oy + dy) * wo + ox] = vert[(oy + dy) * wo + ox] + v;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for ox in 0..wo {
                let v = vert[y * wo + ox];
                for d in 0..k {
                    dst[y * w + ox + d] = dst[y * w + ox + d] + v;
                }
            }
        }
    }
    dx
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a rank-0 node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data);
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape(), "add_const shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::AddConst(a))
    }

    /// `a * c` for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape(), "mul_const shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `x^p` for `x >= 0`.
    pub fn pow_const(&mut self, a: Var, p: T) -> Var {
        self.map(a, |x| x.max(T::zero()).powf(p), Op::PowConst(a, p))
    }

    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    pub fn log_floor(&mut self, a: Var, floor: T) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogFloor(a, floor))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Per-sample sum over every non-leading axis: `[n, ...] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| t.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![t.rows()], data);
        self.push(value, Op::SumRows(a))
    }

    /// Per-sample mean over every non-leading axis: `[n, ...] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let w = T::of(t.row_len() as f64);
        let data = (0..t.rows()).map(|i| t.row(i).iter().copied().sum::<T>() / w).collect();
        let value = Tensor::new(vec![t.rows()], data);
        self.push(value, Op::MeanRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        self.push(value, Op::Reshape(a))
    }

    /// Columns `start..start + len` of a rank-2 node.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "slice_cols expects a matrix");
        let (n, w) = (t.shape()[0], t.shape()[1]);
        assert!(start + len <= w, "column slice out of range");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * w + start..i * w + start + len]);
        }
        self.push(Tensor::new(vec![n, len], data), Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        assert_eq!(ta.shape()[0], tb.shape()[0], "concat_cols row mismatch");
        let (n, wa, wb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        self.push(Tensor::new(vec![n, wa + wb], data), Op::ConcatCols(a, b))
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "softmax expects a matrix");
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            data.extend(e.into_iter().map(|v| v / z));
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::Softmax(a))
    }

    /// `x W^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.shape().len(), 2, "dense input must be a matrix");
        let (n, fan_in) = (tx.shape()[0], tx.shape()[1]);
        let fan_out = tw.shape()[0];
        assert_eq!(tw.shape(), &[fan_out, fan_in], "dense weight shape mismatch");
        assert_eq!(tb.shape(), &[fan_out], "dense bias shape mismatch");
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            tx.data(),
            (fan_in as isize, 1),
            tw.data(),
            (1, fan_in as isize),
            T::one(),
            &mut out,
            (fan_out as isize, 1),
        );
        self.push(Tensor::new(vec![n, fan_out], out), Op::Dense { x, w, b })
    }

    /// 2-D convolution: `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape();
        let ws = tw.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch");
        assert_eq!(tb.shape(), &[o], "conv2d bias shape mismatch");
        let (ho, wo) = (conv_out(h, k, geom), conv_out(wd, k, geom));
        let ckk = c * k * k;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); ckk * plane];
        let mut out = vec![T::zero(); n * o * plane];
        for s in 0..n {
            im2col(
                &tx.data()[s * c * h * wd..][..c * h * wd],
                c,
                h,
                wd,
                k,
                geom,
                ho,
                wo,
                &mut cols,
            );
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(tb.data()[oc]);
            }
            T::gemm(
                o,
                ckk,
                plane,
                T::one(),
                tw.data(),
                (ckk as isize, 1),
                &cols,
                (plane as isize, 1),
                T::one(),
                dst,
                (plane as isize, 1),
            );
        }
        let value = Tensor::new(vec![n, o, ho, wo], out);
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.shape();
        assert_eq!(s.len(), 4, "upsample2 expects rank 4");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out);
        self.push(value, Op::Upsample2(a))
    }

    /// Valid-mode `k x k` uniform mean filter over the trailing two axes.
    pub fn box_filter(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let s = t.shape().to_vec();
        assert!(s.len() >= 2, "box_filter needs spatial axes");
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert!(k >= 1 && k <= h && k <= w, "window larger than plane");
        let planes = t.len() / (h * w);
        let data = box_filter(t.data(), planes, h, w, k);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = h - k + 1;
        shape[r - 1] = w - k + 1;
        self.push(Tensor::new(shape, data), Op::BoxFilter(a, k))
    }

    /// `min(cap, 10 log10(max_value^2 / mse))` elementwise; zero gradient at the cap.
    pub fn psnr_capped(&mut self, mse: Var, max_value: T, cap: T) -> Var {
        let max_sq = max_value * max_value;
        let ten = T::of(10.0);
        self.map(
            mse,
            |m| {
                if m <= T::zero() {
                    cap
                } else {
                    (ten * (max_sq / m).log10()).min(cap)
                }
            },
            Op::PsnrCapped { mse, max_sq, cap },
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect());
                acc(grads, *b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(grads, *a, g.iter().zip(vb).map(|(&gi, &y)| gi / y).collect());
                let gb = g.iter().zip(out).zip(vb).map(|((&gi, &q), &y)| -gi * q / y).collect();
                acc(grads, *b, gb);
            }
            Op::AddConst(a) => acc(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => acc(grads, *a, g.iter().zip(c.data()).map(|(&gi, &y)| gi * y).collect()),
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|&gi| gi * *s).collect()),
            Op::Offset(a) => acc(grads, *a, g.to_vec()),
            Op::Square(a) => {
                let two = T::of(2.0);
                acc(grads, *a, g.iter().zip(val(*a)).map(|(&gi, &x)| gi * two * x).collect())
            }
            Op::PowConst(a, p) => {
                let p = *p;
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| {
                        if x <= T::zero() {
                            if p == T::one() {
                                gi
                            } else {
                                T::zero()
                            }
                        } else {
                            gi * p * x.powf(p - T::one())
                        }
                    })
                    .collect();
                acc(grads, *a, ga);
            }
            Op::LogFloor(a, floor) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| if x > *floor { gi / x } else { T::zero() })
                    .collect();
                acc(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| {
                        let s = sigmoid(x);
                        gi * (s + x * s * (T::one() - s))
                    })
                    .collect();
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                acc(grads, *a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                acc(grads, *a, vec![g[0] / T::of(len as f64); len]);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let src = &self.nodes[a.0].value;
                let w = src.row_len();
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    T::one() / T::of(w as f64)
                } else {
                    T::one()
                };
                let mut ga = Vec::with_capacity(src.len());
                for &gi in g {
                    ga.extend(std::iter::repeat_n(gi * scale, w));
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::SliceCols(a, start) => {
                let src = &self.nodes[a.0].value;
                let (n, w) = (src.shape()[0], src.shape()[1]);
                let len = node.value.shape()[1];
                let mut ga = vec![T::zero(); n * w];
                for i in 0..n {
                    ga[i * w + start..i * w + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let wa = self.nodes[a.0].value.shape()[1];
                let wb = self.nodes[b.0].value.shape()[1];
                let n = node.value.shape()[0];
                let mut ga = Vec::with_capacity(n * wa);
                let mut gb = Vec::with_capacity(n * wb);
                for i in 0..n {
                    let row = &g[i * (wa + wb)..(i + 1) * (wa + wb)];
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Softmax(a) => {
                let w = node.value.shape()[1];
                let mut ga = Vec::with_capacity(out.len());
                for (prow, grow) in out.chunks(w).zip(g.chunks(w)) {
                    let dot: T = prow.iter().zip(grow).map(|(&p, &gi)| p * gi).sum();
                    ga.extend(prow.iter().zip(grow).map(|(&p, &gi)| p * (gi - dot)));
                }
                acc(grads, *a, ga);
            }
            Op::Dense { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (n, fan_in) = (tx.shape()[0], tx.shape()[1]);
                let fan_out = tw.shape()[0];
                let mut gx = vec![T::zero(); n * fan_in];
                T::gemm(
                    n,
                    fan_out,
                    fan_in,
                    T::one(),
                    g,
                    (fan_out as isize, 1),
                    tw.data(),
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut gx,
                    (fan_in as isize, 1),
                );
                let mut gw = vec![T::zero(); fan_out * fan_in];
                T::gemm(
                    fan_out,
                    n,
                    fan_in,
                    T::one(),
                    g,
                    (1, fan_out as isize),
                    tx.data(),
                    (fan_in as isize, 1),
                    T::zero(),
                    &mut gw,
                    (fan_in as isize, 1),
                );
                let mut gb = vec![T::zero(); fan_out];
                for row in g.chunks(fan_out) {
                    for (acc_b, &gi) in gb.iter_mut().zip(row) {
                        *acc_b = *acc_b + gi;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let xs = tx.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (tw.shape()[0], tw.shape()[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let ckk = c * k * k;
                let plane = ho * wo;
                let mut cols = vec![T::zero(); ckk * plane];
                let mut dcols = vec![T::zero(); ckk * plane];
                let mut gx = vec![T::zero(); tx.len()];
                let mut gw = vec![T::zero(); tw.len()];
                let mut gb = vec![T::zero(); o];
                for s in 0..n {
                    let gs = &g[s * o * plane..(s + 1) * o * plane];
                    im2col(
                        &tx.data()[s * c * h * wd..][..c * h * wd],
                        c,
                        h,
                        wd,
                        k,
                        *geom,
                        ho,
                        wo,
                        &mut cols,
                    );
                    T::gemm(
                        o,
                        plane,
                        ckk,
                        T::one(),
                        gs,
                        (plane as isize, 1),
                        &cols,
                        (1, plane as isize),
                        T::one(),
                        &mut gw,
                        (ckk as isize, 1),
                    );
                    T::gemm(
                        ckk,
                        o,
                        plane,
                        T::one(),
                        tw.data(),
                        (1, ckk as isize),
                        gs,
                        (plane as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (plane as isize, 1),
                    );
                    col2im_add(
                        &dcols,
                        c,
                        h,
                        wd,
                        k,
                        *geom,
                        ho,
                        wo,
                        &mut gx[s * c * h * wd..(s + 1) * c * h * wd],
                    );
                    for (oc, chunk) in gs.chunks(plane).enumerate() {
                        gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut ga = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ga[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let d = (y / 2) * w + x / 2;
                            dst[d] = dst[d] + src[y * 2 * w + x];
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::BoxFilter(a, k) => {
                let s = self.nodes[a.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.nodes[a.0].value.len() / (h * w);
                acc(grads, *a, box_filter_backward(g, planes, h, w, *k));
            }
            Op::PsnrCapped { mse, max_sq, cap } => {
                let coef = T::of(-10.0 / std::f64::consts::LN_10);
                let ga = g
                    .iter()
                    .zip(val(*mse))
                    .map(|(&gi, &m)| {
                        if m <= T::zero() {
                            return T::zero();
                        }
                        let p = T::of(10.0) * (*max_sq / m).log10();
                        if p >= *cap {
                            T::zero()
                        } else {
                            gi * coef / m
                        }
                    })
                    .collect();
                acc(grads, *mse, ga);
            }
        }
    }
}
