//! Minimal reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation in evaluation order; node ids are
//! therefore a topological order and the backward sweep is a single reverse
//! pass. Values can borrow parameter storage so binding a parameter set to a
//! tape does not copy it.

use std::ops::Deref;
use std::sync::Arc;

use crate::tensor::{Mat, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(1 + tanh(u)) / 2 = sigmoid(2u)` for the tanh-approximate GELU; one
/// `exp` is much cheaper than `tanh`.
#[inline]
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u2 = T::of(2.0 * GELU_C) * (x + T::of(GELU_A) * x * x * x);
    sigmoid(u2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, T> {
    Owned(Mat<T>),
    Borrowed(&'a Mat<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Mat<T>;

    fn deref(&self) -> &Mat<T> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

/// Sparse linear resampling: output row `o` is `sum(w * input[i])` over
/// `taps[o]`. Used for bilinear resizing of a per-pixel column.
#[derive(Debug, Clone)]
pub struct ResampleMap {
    pub in_rows: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    RowSlice(Var, usize),
    ConcatRows(Vec<Var>),
    PixelShuffle {
        x: Var,
        side: usize,
        channels: usize,
    },
    Resample(Var, Arc<ResampleMap>),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers borrowed storage as a leaf.
    pub fn bind(&mut self, value: &'a Mat<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), g)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let g = self.any_grad(&[a, row]);
        self.push(out, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::of(s);
        let out = self.value(a).map(|x| x * st);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv[c] + bv[c]);
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).fast_exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * gelu_gate(x));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), g)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Mat::from_vec(av.rows(), len, data);
        let g = self.any_grad(&[a]);
        self.push(out, Op::ColSlice(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let g = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "row slice out of range");
        let c = av.cols();
        let out = Mat::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let g = self.any_grad(&[a]);
        self.push(out, Op::RowSlice(a, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let g = self.any_grad(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    /// Rearranges a `side^2 x 4c` grid (row-major pixels, columns ordered
    /// `(ky*2+kx)*c + ch`) into the `(2 side)^2 x c` grid it describes.
    pub fn pixel_shuffle(&mut self, x: Var, side: usize, channels: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), (side * side, 4 * channels), "pixel_shuffle shape");
        let out_side = 2 * side;
        let mut out = Mat::zeros(out_side * out_side, channels);
        for y in 0..side {
            for xx in 0..side {
                let src = xv.row(y * side + xx);
                for ky in 0..2 {
                    for kx in 0..2 {
                        let o = (2 * y + ky) * out_side + 2 * xx + kx;
                        let k = (ky * 2 + kx) * channels;
                        out.row_mut(o).copy_from_slice(&src[k..k + channels]);
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        self.push(
            out,
            Op::PixelShuffle { x, side, channels },
            g,
        )
    }

    pub fn resample(&mut self, a: Var, map: Arc<ResampleMap>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), map.in_rows, "resample input rows");
        let cols = av.cols();
        let mut out = Mat::zeros(map.taps.len(), cols);
        let src = av.data();
        for (dst, taps) in out.data_mut().chunks_exact_mut(cols).zip(&map.taps) {
            for &(i, w) in taps {
                let w = T::of(w);
                for (d, &s) in dst.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        let g = self.any_grad(&[a]);
        self.push(out, Op::Resample(a, map), g)
    }

    /// Reverse sweep seeded with `(node, d output / d node)` pairs.
    /// Returns per-node gradients (`None` where nothing flowed).
    pub fn backward(&self, seeds: Vec<(Var, Mat<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Mat<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*r) {
                    accumulate(grads, *r, g.col_sums());
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let s = T::of(*s);
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                if self.needs(*gamma) {
                    let mut gg = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let v = gg.get(0, c) + g.get(r, c) * xhat.get(r, c);
                            gg.set(0, c, v);
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, g.col_sums());
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma).data();
                    let n = T::of(cols as f64);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat.get(r, c);
                        }
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            let d = g.get(r, c) * gv[c];
                            gx.set(r, c, k * (n * d - sum_d - xhat.get(r, c) * sum_dx));
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let mut gx = Mat::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: T = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for (o, (&y, &g)) in gx.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(grads, *a, gx);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xv = self.value(*a);
                    let c2 = T::of(2.0 * GELU_C);
                    let k3 = T::of(3.0 * GELU_A);
                    let mut gx = g.clone();
                    for (o, &x) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let s = gelu_gate(x);
                        *o *= s + x * s * (T::one() - s) * c2 * (T::one() + k3 * x * x);
                    }
                    accumulate(grads, *a, gx);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let mut gx = g.clone();
                    for (o, &y) in gx.data_mut().iter_mut().zip(out.data()) {
                        *o *= y * (T::one() - y);
                    }
                    accumulate(grads, *a, gx);
                }
            }
            Op::ColSlice(a, start) => {
                if self.needs(*a) {
                    let (rows, cols) = self.value(*a).shape();
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *a, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let gp = Mat::from_fn(g.rows(), pc, |r, c| g.get(r, off + c));
                        accumulate(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::RowSlice(a, start) => {
                if self.needs(*a) {
                    let (rows, cols) = self.value(*a).shape();
                    let mut gx = Mat::zeros(rows, cols);
                    gx.data_mut()[start * cols..(start + g.rows()) * cols]
                        .copy_from_slice(g.data());
                    accumulate(grads, *a, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let gp = Mat::from_vec(
                            pr,
                            cols,
                            g.data()[off * cols..(off + pr) * cols].to_vec(),
                        );
                        accumulate(grads, p, gp);
                    }
                    off += pr;
                }
            }
            Op::PixelShuffle { x, side, channels } => {
                if self.needs(*x) {
                    let (side, channels) = (*side, *channels);
                    let out_side = 2 * side;
                    let mut gx = Mat::zeros(side * side, 4 * channels);
                    for y in 0..side {
                        for xx in 0..side {
                            let dst = gx.row_mut(y * side + xx);
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let o = (2 * y + ky) * out_side + 2 * xx + kx;
                                    let k = (ky * 2 + kx) * channels;
                                    dst[k..k + channels].copy_from_slice(g.row(o));
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Resample(a, map) => {
                if self.needs(*a) {
                    let cols = g.cols();
                    let mut gx = Mat::zeros(map.in_rows, cols);
                    for (o, taps) in map.taps.iter().enumerate() {
                        for &(i, w) in taps {
                            let w = T::of(w);
                            let src = g.row(o).to_vec();
                            for (dst, s) in gx.row_mut(i).iter_mut().zip(src) {
                                *dst += w * s;
                            }
                        }
                    }
                    accumulate(grads, *a, gx);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(w .* f(x)))/dx for a unary graph.
    fn check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Mat<f64>) {
        let (rows, cols) = x0.shape();
        let eval = |x: &Mat<f64>| -> (f64, Mat<f64>) {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            let yv = t.value(y).clone();
            let wy = Mat::from_fn(yv.rows(), yv.cols(), |r, c| {
                ((r * 5 + c) as f64 * 0.21).cos()
            });
            let loss: f64 = yv.data().iter().zip(wy.data()).map(|(a, b)| a * b).sum();
            let mut g = t.backward(vec![(y, wy)]);
            (loss, g.take(v).unwrap_or_else(|| Mat::zeros(rows, cols)))
        };
        let (_, analytic) = eval(&x0);
        let h = 1e-6;
        for i in 0..rows * cols {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs()),
                "element {i}: analytic {a} numeric {num}"
            );
        }
    }

    fn probe(rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_fn(rows, cols, |r, c| ((r * 11 + c * 7) as f64 * 0.53).sin() * 1.3)
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(|t, v| t.gelu(v), probe(3, 4));
        check_unary(|t, v| t.sigmoid(v), probe(3, 4));
        check_unary(|t, v| t.softmax(v), probe(3, 5));
        check_unary(|t, v| t.scale(v, -0.7), probe(2, 2));
        check_unary(
            |t, v| {
                let g = t.constant(Mat::from_fn(1, 5, |_, c| 0.5 + c as f64 * 0.2));
                let b = t.constant(Mat::from_fn(1, 5, |_, c| c as f64 * 0.1));
                t.layer_norm(v, g, b)
            },
            probe(3, 5),
        );
        check_unary(
            |t, v| {
                let s = t.col_slice(v, 1, 2);
                let r = t.row_slice(v, 1, 1);
                let r2 = t.concat_cols(&[r, r]);
                let s2 = t.concat_rows(&[s, s]);
                let a = t.matmul_nt(s2, s2);
                let a = t.scale(a, 0.5);
                let a = t.add(a, a);
                let b = t.matmul(a, s2);
                let c = t.matmul_nt(r2, r2);
                let c2 = t.concat_cols(&[c, c]);
                t.add_row(b, c2)
            },
            probe(3, 4),
        );
        check_unary(|t, v| t.pixel_shuffle(v, 2, 2), probe(4, 8));
        check_unary(
            |t, v| {
                let map = Arc::new(ResampleMap {
                    in_rows: 3,
                    taps: vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(2, 0.25)]],
                });
                t.resample(v, map)
            },
            probe(3, 2),
        );
    }

    #[test]
    fn binary_ops_route_gradients_to_both_operands() {
        let a0 = probe(2, 3);
        let b0 = Mat::from_fn(3, 2, |r, c| (r + 2 * c) as f64 * 0.1 - 0.2);
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.leaf(b0.clone());
        let c = t.matmul(a, b);
        let row = t.leaf(Mat::from_vec(1, 2, vec![0.3, -0.1]));
        let d = t.add_row(c, row);
        let ones = Mat::filled(2, 2, 1.0);
        let g = t.backward(vec![(d, ones.clone())]);
        assert_eq!(g.get(a).unwrap(), &ones.matmul_nt(&b0));
        assert_eq!(g.get(b).unwrap(), &a0.matmul_tn(&ones));
        assert_eq!(g.get(row).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(probe(2, 2));
        let b = t.gelu(a);
        assert!(!t.requires_grad(b));
    }
}
