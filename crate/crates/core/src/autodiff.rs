//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! the gradient of a scalar output with respect to every recorded value.
//! Tapes are cheap and single-use: build one per forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, resize_taps, ConvGeometry, LerpTap, Tensor};

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Sum(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    ChannelBias {
        x: usize,
        bias: usize,
    },
    Conv2d {
        x: usize,
        weight: usize,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Upsample {
        x: usize,
        rows: Vec<LerpTap>,
        cols: Vec<LerpTap>,
    },
    Gate {
        w: usize,
        a: usize,
        b: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    SoftmaxRows(usize),
    SoftArgmax {
        h: usize,
        probs: Vec<f64>,
        argmax: Vec<usize>,
    },
    GridSample {
        feat: usize,
        coords: usize,
        taps: Vec<SampleTap>,
    },
}

/// Bilinear sampling footprint of one joint on a feature map.
#[derive(Clone, Copy, Debug)]
struct SampleTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// d(pixel x)/d(normalized x); zero when the coordinate was clamped.
    dx: f64,
    dy: f64,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::Offset(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Relu(a) => {
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            );
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
        }
        Op::Abs(a) => {
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            );
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = mat_dims(av, *ta);
            let n = if *tb { bv.shape()[0] } else { bv.shape()[1] };
            if nodes[*a].needs_grad {
                let mut da = Tensor::zeros(av.shape());
                if *ta {
                    // dA (k x m) = op(B) * dOut^T
                    gemm(k, n, m, bv.data(), *tb, g.data(), true, da.data_mut(), 0.0);
                } else {
                    // dA (m x k) = dOut * op(B)^T
                    gemm(m, n, k, g.data(), false, bv.data(), !*tb, da.data_mut(), 0.0);
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].needs_grad {
                let mut db = Tensor::zeros(bv.shape());
                if *tb {
                    // dB (n x k) = dOut^T * op(A)
                    gemm(n, m, k, g.data(), true, av.data(), *ta, db.data_mut(), 0.0);
                } else {
                    // dB (k x n) = op(A)^T * dOut
                    gemm(k, m, n, av.data(), !*ta, g.data(), false, db.data_mut(), 0.0);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ChannelBias { x, bias } => {
            accumulate(nodes, grads, *x, g.clone());
            if nodes[*bias].needs_grad {
                let c = val(*bias).len();
                let inner = g.len() / c;
                let db: Vec<f64> = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                accumulate(nodes, grads, *bias, Tensor::from_vec(&[c], db).unwrap());
            }
        }
        Op::Conv2d {
            x,
            weight,
            geom,
            cols,
        } => {
            let wv = val(*weight);
            let o = wv.shape()[0];
            let rows = geom.channels * geom.kernel * geom.kernel;
            let p = geom.out_height() * geom.out_width();
            if nodes[*weight].needs_grad {
                let mut dw = Tensor::zeros(wv.shape());
                gemm(o, p, rows, g.data(), false, cols, true, dw.data_mut(), 0.0);
                accumulate(nodes, grads, *weight, dw);
            }
            if nodes[*x].needs_grad {
                let mut dcols = vec![0.0; rows * p];
                gemm(rows, o, p, wv.data(), true, g.data(), false, &mut dcols, 0.0);
                let dx = col2im(&dcols, geom);
                accumulate(
                    nodes,
                    grads,
                    *x,
                    Tensor::from_vec(val(*x).shape(), dx).unwrap(),
                );
            }
        }
        Op::Upsample { x, rows, cols } => {
            let xs = val(*x).shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (oh, ow) = (rows.len(), cols.len());
            let mut dx = Tensor::zeros(xs);
            let d = dx.data_mut();
            let gd = g.data();
            for ch in 0..c {
                let base = ch * h * w;
                for (oy, ry) in rows.iter().enumerate() {
                    for (ox, rx) in cols.iter().enumerate() {
                        let gv = gd[(ch * oh + oy) * ow + ox];
                        let top = gv * (1.0 - ry.frac);
                        let bot = gv * ry.frac;
                        d[base + ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                        d[base + ry.lo * w + rx.hi] += top * rx.frac;
                        d[base + ry.hi * w + rx.lo] += bot * (1.0 - rx.frac);
                        d[base + ry.hi * w + rx.hi] += bot * rx.frac;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gate { w, a, b } => {
            let (wv, av, bv) = (val(*w), val(*a), val(*b));
            let plane = wv.len();
            if nodes[*w].needs_grad {
                let mut dw = vec![0.0; plane];
                for (i, ((gv, x), y)) in g.data().iter().zip(av.data()).zip(bv.data()).enumerate() {
                    dw[i % plane] += gv * (x - y);
                }
                accumulate(nodes, grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
            }
            if nodes[*a].needs_grad {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * wv.data()[i % plane])
                    .collect();
                accumulate(nodes, grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
            }
            if nodes[*b].needs_grad {
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * (1.0 - wv.data()[i % plane]))
                    .collect();
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = g.axis_extents(*axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if nodes[p].needs_grad {
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_vec(val(p).shape(), part).unwrap());
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, total, inner) = xv.axis_extents(*axis);
            let len = g.shape()[*axis];
            let mut dx = Tensor::zeros(xv.shape());
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                dx.data_mut()[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Transpose(a) => {
            accumulate(nodes, grads, *a, transpose2(g));
        }
        Op::SoftmaxRows(a) => {
            let cols = out.shape()[1];
            let mut dx = Tensor::zeros(out.shape());
            for ((dxr, yr), gr) in dx
                .data_mut()
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                for ((d, y), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (gv - dot);
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::SoftArgmax { h, probs, argmax } => {
            let hs = val(*h).shape();
            let (n, hh, ww) = (hs[0], hs[1], hs[2]);
            let plane = hh * ww;
            let mut dh = Tensor::zeros(hs);
            for k in 0..n {
                let (gx, gy, gc) = (g.get2(k, 0), g.get2(k, 1), g.get2(k, 2));
                let p = &probs[k * plane..(k + 1) * plane];
                let mut dp: Vec<f64> = (0..plane)
                    .map(|idx| gx * (idx % ww) as f64 + gy * (idx / ww) as f64)
                    .collect();
                dp[argmax[k]] += gc;
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (idx, d) in dh.data_mut()[k * plane..(k + 1) * plane]
                    .iter_mut()
                    .enumerate()
                {
                    *d = p[idx] * (dp[idx] - dot);
                }
            }
            accumulate(nodes, grads, *h, dh);
        }
        Op::GridSample { feat, coords, taps } => {
            let fv = val(*feat);
            let fs = fv.shape();
            let (c, h, w) = (fs[0], fs[1], fs[2]);
            let n = taps.len();
            let gd = g.data();
            if nodes[*feat].needs_grad {
                let mut df = Tensor::zeros(fs);
                let d = df.data_mut();
                for (j, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = gd[ch * n + j];
                        let base = ch * h * w;
                        d[base + t.y0 * w + t.x0] += gv * (1.0 - t.wx) * (1.0 - t.wy);
                        d[base + t.y0 * w + t.x1] += gv * t.wx * (1.0 - t.wy);
                        d[base + t.y1 * w + t.x0] += gv * (1.0 - t.wx) * t.wy;
                        d[base + t.y1 * w + t.x1] += gv * t.wx * t.wy;
                    }
                }
                accumulate(nodes, grads, *feat, df);
            }
            if nodes[*coords].needs_grad {
                let mut dc = Tensor::zeros(val(*coords).shape());
                let fd = fv.data();
                for (j, t) in taps.iter().enumerate() {
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = gd[ch * n + j];
                        let base = ch * h * w;
                        let v00 = fd[base + t.y0 * w + t.x0];
                        let v01 = fd[base + t.y0 * w + t.x1];
                        let v10 = fd[base + t.y1 * w + t.x0];
                        let v11 = fd[base + t.y1 * w + t.x1];
                        sx += gv * ((v01 - v00) * (1.0 - t.wy) + (v11 - v10) * t.wy);
                        sy += gv * ((v10 - v00) * (1.0 - t.wx) + (v11 - v01) * t.wx);
                    }
                    let cols = dc.shape()[1];
                    dc.data_mut()[j * cols] = sx * t.dx;
                    dc.data_mut()[j * cols + 1] = sy * t.dy;
                }
                accumulate(nodes, grads, *coords, dc);
            }
        }
    }
}

fn mat_dims(t: &Tensor, transposed: bool) -> (usize, usize) {
    let s = t.shape();
    if transposed {
        (s[1], s[0])
    } else {
        (s[0], s[1])
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sample_tap(x: f64, y: f64, h: usize, w: usize) -> SampleTap {
    // Normalized [-1, 1] spans the outer pixel edges; pixel centers sit at
    // (2i + 1) / size - 1.
    let (px, dx) = clamp_pixel((x + 1.0) * w as f64 / 2.0 - 0.5, w, w as f64 / 2.0);
    let (py, dy) = clamp_pixel((y + 1.0) * h as f64 / 2.0 - 0.5, h, h as f64 / 2.0);
    let x0 = (px.floor() as usize).min(w - 1);
    let y0 = (py.floor() as usize).min(h - 1);
    SampleTap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: px - x0 as f64,
        wy: py - y0 as f64,
        dx,
        dy,
    }
}

fn clamp_pixel(p: f64, size: usize, slope: f64) -> (f64, f64) {
    let hi = (size - 1) as f64;
    if p < 0.0 {
        (0.0, 0.0)
    } else if p > hi {
        (hi, 0.0)
    } else {
        (p, slope)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// `op(self) * op(other)` on 2D values, with optional transposes.
    pub fn matmul(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = mat_dims(&a, ta);
        let (k2, n) = mat_dims(&b, tb);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), ta, b.data(), tb, out.data_mut(), 0.0);
        Ok(self.binary(
            other,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (leading axis).
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if b.shape().len() != 1 || x.shape().first() != Some(&b.len()) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match leading axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let inner = x.len() / b.len();
        let mut out = (*x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[ch];
            for v in chunk {
                *v += bv;
            }
        }
        Ok(self.binary(
            bias,
            out,
            Op::ChannelBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Square-kernel convolution of a `C x H x W` input with an `O x C x k x k` weight.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let geom = ConvGeometry {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(Error::Shape(format!("conv2d kernel larger than padded input {xs:?}")));
        }
        let cols = im2col(x.data(), &geom);
        let (o, rows) = (ws[0], ws[1] * ws[2] * ws[3]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = Tensor::zeros(&[o, ho, wo]);
        gemm(o, rows, ho * wo, w.data(), false, &cols, false, out.data_mut(), 0.0);
        Ok(self.binary(
            weight,
            out,
            Op::Conv2d {
                x: self.id,
                weight: weight.id,
                geom,
                cols,
            },
        ))
    }

    /// Bilinear resize of a `C x H x W` value to `C x out_h x out_w`
    /// (half-pixel centers, edge-clamped).
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!("cannot resize {xs:?} to {out_h}x{out_w}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let rows = resize_taps(h, out_h);
        let cols = resize_taps(w, out_w);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        let src = x.data();
        let dst = out.data_mut();
        for ch in 0..c {
            let base = ch * h * w;
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let top = src[base + ry.lo * w + rx.lo] * (1.0 - rx.frac)
                        + src[base + ry.lo * w + rx.hi] * rx.frac;
                    let bot = src[base + ry.hi * w + rx.lo] * (1.0 - rx.frac)
                        + src[base + ry.hi * w + rx.hi] * rx.frac;
                    dst[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ry.frac) + bot * ry.frac;
                }
            }
        }
        Ok(self.unary(out, Op::Upsample { x: self.id, rows, cols }))
    }

    /// `w * a + (1 - w) * b` with a `1 x H x W` gate broadcast over channels.
    pub fn gate(w: Var<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (wv, av, bv) = (w.value(), a.value(), b.value());
        check_same_shape("gate", &av, &bv)?;
        if wv.shape().first() != Some(&1) || wv.shape()[1..] != av.shape()[1..] {
            return Err(Error::Shape(format!(
                "gate {:?} does not broadcast over {:?}",
                wv.shape(),
                av.shape()
            )));
        }
        let plane = wv.len();
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .enumerate()
            .map(|(i, (x, y))| {
                let g = wv.data()[i % plane];
                g * x + (1.0 - g) * y
            })
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let needs = w.tape.needs(&[w.id, a.id, b.id]);
        Ok(w.tape.push(
            out,
            Op::Gate {
                w: w.id,
                a: a.id,
                b: b.id,
            },
            needs,
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rank = values[0].shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut shape = values[0].shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != rank
                || s[..axis] != values[0].shape()[..axis]
                || s[axis + 1..] != values[0].shape()[axis + 1..]
            {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {s:?}",
                    values[0].shape()
                )));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat { parts: ids, axis },
            needs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape().len() || start + len > x.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                x.shape()
            )));
        }
        let (outer, total, inner) = x.axis_extents(axis);
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        Ok(self.unary(
            Tensor::from_vec(&shape, data)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2D, got {:?}", x.shape())));
        }
        Ok(self.unary(transpose2(&x), Op::Transpose(self.id)))
    }

    /// Softmax along the last axis of a 2D value.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("softmax_rows needs 2D, got {:?}", x.shape())));
        }
        let cols = x.shape()[1];
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    /// Integral regression over an `N x H x W` score volume.
    ///
    /// Returns `N x 3` rows of `(x, y, c)` in heatmap-grid units, where `(x, y)`
    /// is the expectation of the per-joint softmax and `c` its maximum.
    pub fn soft_argmax(self) -> Result<Var<'t>> {
        let h = self.value();
        let hs = h.shape();
        if hs.len() != 3 {
            return Err(Error::Shape(format!("soft_argmax needs N x H x W, got {hs:?}")));
        }
        let (n, hh, ww) = (hs[0], hs[1], hs[2]);
        let plane = hh * ww;
        let mut probs = h.data().to_vec();
        let mut argmax = Vec::with_capacity(n);
        let mut out = Tensor::zeros(&[n, 3]);
        for k in 0..n {
            let p = &mut probs[k * plane..(k + 1) * plane];
            softmax_in_place(p);
            let (mut ex, mut ey) = (0.0, 0.0);
            let mut best = 0;
            for (idx, &pv) in p.iter().enumerate() {
                ex += pv * (idx % ww) as f64;
                ey += pv * (idx / ww) as f64;
                if pv > p[best] {
                    best = idx;
                }
            }
            out.data_mut()[k * 3] = ex;
            out.data_mut()[k * 3 + 1] = ey;
            out.data_mut()[k * 3 + 2] = p[best];
            argmax.push(best);
        }
        Ok(self.unary(
            out,
            Op::SoftArgmax {
                h: self.id,
                probs,
                argmax,
            },
        ))
    }

    /// Bilinear sampling of a `C x H x W` map at `N x 2` normalized `(x, y)`
    /// locations, giving `C x N`. Locations are clamped to the border.
    pub fn grid_sample(feat: Var<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        let (f, c) = (feat.value(), coords.value());
        let fs = f.shape();
        if fs.len() != 3 || c.shape().len() != 2 || c.shape()[1] != 2 {
            return Err(Error::Shape(format!(
                "grid_sample needs C x H x W map and N x 2 coords, got {fs:?} and {:?}",
                c.shape()
            )));
        }
        if !c.all_finite() {
            return Err(Error::InvalidInput("non-finite sampling coordinates".into()));
        }
        let (ch, h, w) = (fs[0], fs[1], fs[2]);
        let n = c.shape()[0];
        let taps: Vec<SampleTap> = (0..n)
            .map(|j| sample_tap(c.get2(j, 0), c.get2(j, 1), h, w))
            .collect();
        let mut out = Tensor::zeros(&[ch, n]);
        let fd = f.data();
        for (j, t) in taps.iter().enumerate() {
            for k in 0..ch {
                let base = k * h * w;
                out.data_mut()[k * n + j] = fd[base + t.y0 * w + t.x0] * (1.0 - t.wx) * (1.0 - t.wy)
                    + fd[base + t.y0 * w + t.x1] * t.wx * (1.0 - t.wy)
                    + fd[base + t.y1 * w + t.x0] * (1.0 - t.wx) * t.wy
                    + fd[base + t.y1 * w + t.x1] * t.wx * t.wy;
            }
        }
        Ok(feat.binary(
            coords,
            out,
            Op::GridSample {
                feat: feat.id,
                coords: coords.id,
                taps,
            },
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
