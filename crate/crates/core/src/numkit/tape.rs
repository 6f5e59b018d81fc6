//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every forward op appends a node holding its value and the handles of its
//! operands; `backward` walks the tape in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers. Nodes that do not
//! depend on any gradient-carrying leaf are skipped entirely.

use crate::error::{Error, Result};
use crate::numkit::special::{normal_cdf, normal_pdf};
use crate::numkit::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    NormalCdf(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `c = a · b` for row-major `a[m,k]`, `b[k,n]`, accumulating when `acc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    acc: bool,
) {
    // a is stored [m,k] (or [k,m] when transposed); b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers against m, k, n and
    // the strides above address only elements inside those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Input position feeding output `(oy, ox)` through tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky)
            .checked_sub(self.pad)
            .filter(|&v| v < self.h)?;
        let ix = (ox * self.stride + kx)
            .checked_sub(self.pad)
            .filter(|&v| v < self.w)?;
        Some((iy, ix))
    }

    /// `[C·K·K, OH·OW]` patch matrix; padding reads as zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.k * self.k * n];
        for ic in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ic * self.k + ky) * self.k + kx) * n;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                cols[row + oy * self.ow + ox] = x[(ic * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`].
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ic in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ic * self.k + ky) * self.k + kx) * n;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                x[(ic * self.h + iy) * self.w + ix] +=
                                    cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.push(value, op, parents)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            Error::contract(format!("{op}: expected a matrix, got {:?}", self.shape(v)))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push_raw(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bb) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push_raw(vec![m, n], out, Op::AddBias(x, b), &[x, b]))
    }

    /// `x[m,n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_row")?;
        if self.value(g).len() != n {
            return Err(shape_err("mul_row", self.shape(x), self.shape(g)));
        }
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, gg) in out[r * n..(r + 1) * n].iter_mut().zip(gv) {
                *o *= gg;
            }
        }
        Ok(self.push_raw(vec![m, n], out, Op::MulRow(x, g), &[x, g]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_raw(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every element of `a` by the single-element `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar_var", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        Ok(self.push(t, Op::MulScalarVar(a, s), &[a, s]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; the operand must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return Err(Error::contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x < 0.0 || x.is_nan())
        {
            return Err(Error::contract(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Standard normal CDF applied elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, Op::NormalCdf(a), normal_cdf)
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums a matrix along its columns: `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let v = self.value(a).data();
        let out = (0..m).map(|r| v[r * n..(r + 1) * n].iter().sum()).collect();
        Ok(self.push_raw(vec![m], out, Op::SumRows(a), &[a]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "mean_rows")?;
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax")?;
        let v = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - mx).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|oi| *oi /= z);
        }
        Ok(self.push_raw(vec![m, n], out, Op::Softmax(a), &[a]))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(a, "layer_norm")?;
        let v = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        Ok(self.push_raw(vec![m, n], out, Op::LayerNorm(a, eps), &[a]))
    }

    /// Column-wise concatenation `[m,p] ++ [m,q] -> [m,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "concat")?;
        let (m2, q) = self.dims2(b, "concat")?;
        if m != m2 {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        Ok(self.push_raw(vec![m, p + q], out, Op::Concat(a, b), &[a, b]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + end]);
        }
        Ok(self.push_raw(
            vec![m, end - start],
            out,
            Op::SliceCols(a, start, end),
            &[a],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let v = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = v[r * n + c];
            }
        }
        Ok(self.push_raw(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// 2-D convolution of a single `[C,H,W]` map with `[O,C,K,K]` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (c, h, wd) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        let (o, k) = match ws.as_slice() {
            [o, ci, k, k2] if *ci == c && k == k2 => (*o, *k),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        if self.value(b).len() != o || stride == 0 {
            return Err(shape_err("conv2d", &ws, self.shape(b)));
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = geo.im2col(self.value(x).data());
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let n = oh * ow;
        let mut out: Vec<f64> = bv
            .iter()
            .flat_map(|&bi| std::iter::repeat_n(bi, n))
            .collect();
        gemm(o, c * k * k, n, wv, false, &cols, false, &mut out, true);
        Ok(self.push_raw(
            vec![o, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` map.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::contract(format!(
                    "upsample2: expected [C,H,W], got {s:?}"
                )))
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push_raw(vec![c, 2 * h, 2 * w], out, Op::Upsample2(x), &[x]))
    }

    /// Selects rows of `table[n,d]`; gradients scatter back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows: empty index list"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push_raw(
            vec![idx.len(), d],
            out,
            Op::GatherRows(table, idx.to_vec()),
            &[table],
        ))
    }

    /// Single-head scaled dot-product attention `softmax(q kᵀ / √d) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.dims2(q, "attention")?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = self.softmax(scores)?;
        self.matmul(attn, v)
    }

    /// Sum of squared differences.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates into an operand's gradient buffer, allocating on demand.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if needs(v) {
                    let n = self.nodes[v.0].value.len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body;
                }
            }};
        }
        macro_rules! elementwise {
            ($a:expr, |$x:ident, $y:ident| $d:expr) => {{
                let av = val($a);
                acc!(
                    $a,
                    |buf| for (((b, &gi), &$x), &$y) in buf.iter_mut().zip(g).zip(av).zip(out) {
                        *b += gi * $d;
                    }
                );
            }};
        }
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                let (av, bv) = (val(a), val(b));
                acc!(a, |buf| gemm(m, n, k, g, false, bv, true, buf, true));
                acc!(b, |buf| gemm(k, m, n, av, true, g, false, buf, true));
            }
            Op::AddBias(x, b) => {
                let n = self.nodes[b.0].value.len();
                acc!(x, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi));
                acc!(b, |buf| for (i, gi) in g.iter().enumerate() {
                    buf[i % n] += gi;
                });
            }
            Op::MulRow(x, gv) => {
                let n = self.nodes[gv.0].value.len();
                let (xv, gvv) = (val(x), val(gv));
                acc!(x, |buf| for (i, b) in buf.iter_mut().enumerate() {
                    *b += g[i] * gvv[i % n];
                });
                acc!(gv, |buf| for (i, gi) in g.iter().enumerate() {
                    buf[i % n] += gi * xv[i];
                });
            }
            Op::Add(a, b) => {
                acc!(a, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi));
                acc!(b, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi));
            }
            Op::Sub(a, b) => {
                acc!(a, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi));
                acc!(b, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc!(a, |buf| for ((x, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                    *x += gi * y;
                });
                acc!(b, |buf| for ((x, gi), y) in buf.iter_mut().zip(g).zip(av) {
                    *x += gi * y;
                });
            }
            Op::MulScalarVar(a, s) => {
                let (av, sv) = (val(a), val(s)[0]);
                acc!(a, |buf| buf
                    .iter_mut()
                    .zip(g)
                    .for_each(|(b, gi)| *b += gi * sv));
                acc!(s, |buf| buf[0] +=
                    g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>());
            }
            Op::Scale(a, c) => acc!(a, |buf| buf
                .iter_mut()
                .zip(g)
                .for_each(|(b, gi)| *b += gi * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc!(a, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi))
            }
            Op::Relu(a) => elementwise!(a, |x, _y| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(a) => elementwise!(a, |x, _y| gelu_grad(x)),
            Op::Sigmoid(a) => elementwise!(a, |_x, y| y * (1.0 - y)),
            Op::Tanh(a) => elementwise!(a, |_x, y| 1.0 - y * y),
            Op::Softplus(a) => elementwise!(a, |x, _y| sigmoid(x)),
            Op::Exp(a) => elementwise!(a, |_x, y| y),
            Op::Log(a) => elementwise!(a, |x, _y| 1.0 / x),
            Op::Sqrt(a) => elementwise!(a, |_x, y| if y > 0.0 { 0.5 / y } else { 0.0 }),
            Op::Abs(a) => elementwise!(a, |x, _y| if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }),
            Op::NormalCdf(a) => elementwise!(a, |x, _y| normal_pdf(x)),
            Op::ClampMin(a, floor) => elementwise!(a, |x, _y| if x >= floor { 1.0 } else { 0.0 }),
            Op::Sum(a) => acc!(a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::SumRows(a) => {
                let n = self.nodes[a.0].value.dims2().unwrap().1;
                acc!(a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                    *b += g[i / n];
                });
            }
            Op::Softmax(a) => {
                let (m, n) = node.value.dims2().unwrap();
                acc!(a, |buf| for r in 0..m {
                    let (s, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        buf[r * n + j] += s[j] * (gr[j] - dot);
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let (m, n) = node.value.dims2().unwrap();
                let av = val(a);
                acc!(a, |buf| for r in 0..m {
                    let row = &av[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (y, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        buf[r * n + j] += inv * (gr[j] - gm - y[j] * gy);
                    }
                });
            }
            Op::Concat(a, b) => {
                let (m, p) = self.nodes[a.0].value.dims2().unwrap();
                let q = self.nodes[b.0].value.dims2().unwrap().1;
                acc!(a, |buf| for r in 0..m {
                    for j in 0..p {
                        buf[r * p + j] += g[r * (p + q) + j];
                    }
                });
                acc!(b, |buf| for r in 0..m {
                    for j in 0..q {
                        buf[r * q + j] += g[r * (p + q) + p + j];
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let w = end - start;
                acc!(a, |buf| for r in 0..m {
                    for j in 0..w {
                        buf[r * n + start + j] += g[r * w + j];
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                acc!(a, |buf| for r in 0..m {
                    for c in 0..n {
                        buf[r * n + c] += g[c * m + r];
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(node, g, x, w, b, stride, pad, grads),
            Op::Upsample2(x) => {
                let (c, h, w) = match self.nodes[x.0].value.shape() {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                acc!(x, |buf| for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            buf[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                });
            }
            Op::GatherRows(table, ref idx) => {
                let d = self.nodes[table.0].value.dims2().unwrap().1;
                acc!(table, |buf| for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        buf[i * d + j] += g[r * d + j];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (c, h, wd) = match self.nodes[x.0].value.shape() {
            [c, h, w] => (*c, *h, *w),
            _ => unreachable!(),
        };
        let (o, k) = match self.nodes[w.0].value.shape() {
            [o, _, k, _] => (*o, *k),
            _ => unreachable!(),
        };
        let (oh, ow) = match node.value.shape() {
            [_, a, b] => (*a, *b),
            _ => unreachable!(),
        };
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let (ckk, n) = (c * k * k, oh * ow);
        let wv = self.nodes[w.0].value.data();
        let gw = self.nodes[w.0].requires_grad.then(|| {
            let cols = geo.im2col(self.nodes[x.0].value.data());
            let mut gw = vec![0.0; o * ckk];
            gemm(o, n, ckk, g, false, &cols, true, &mut gw, false);
            gw
        });
        let gx = self.nodes[x.0].requires_grad.then(|| {
            let mut gcols = vec![0.0; ckk * n];
            gemm(ckk, o, n, wv, true, g, false, &mut gcols, false);
            geo.col2im(&gcols)
        });
        let gb = self.nodes[b.0]
            .requires_grad
            .then(|| g.chunks(n).map(|r| r.iter().sum()).collect::<Vec<f64>>());
        for (v, part) in [(x, gx), (w, gw), (b, gb)] {
            if let Some(part) = part {
                match grads[v.0].as_mut() {
                    Some(buf) => buf.iter_mut().zip(&part).for_each(|(a, p)| *a += p),
                    None => grads[v.0] = Some(part),
                }
            }
        }
    }
}
