//! The primitive set and its [`Graph`] entry points.

use super::{Graph, Primitive, Saved, Var};
use crate::error::{Error, Result};
use crate::tensor::{IndexTensor, Tensor};

/// `c (m×n) = op(a) · op(b)`, adding into `c` when `accumulate` is set.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`). Single-threaded and deterministic.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths are checked above against the strides used.
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

fn matmul_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, ka) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, ka, n, a.data(), ta, b.data(), tb, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// (outer, len, inner) view of `shape` around `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn sum_rows(t: &Tensor, cols: usize) -> Tensor {
    let mut acc = vec![0.0; cols];
    for row in t.data().chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(vec![cols], acc).expect("bias shape")
}

/// Axis-wise maximum with the smallest attaining index as argmax.
pub fn max_over_axis(x: &Tensor, axis: usize) -> Result<(Tensor, IndexTensor)> {
    let (outer, len, inner) = axis_split("max_over_axis", x.shape(), axis)?;
    let d = x.data();
    let mut vals = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut best = d[base];
            let mut bi = 0;
            for j in 1..len {
                let v = d[base + j * inner];
                if v > best {
                    best = v;
                    bi = j;
                }
            }
            vals.push(best);
            arg.push(bi);
        }
    }
    let shape = without_axis(x.shape(), axis);
    Ok((
        Tensor::new(shape.clone(), vals)?,
        IndexTensor::new(shape, arg)?,
    ))
}

#[derive(Debug)]
struct MatMul {
    ta: bool,
    tb: bool,
}

impl Primitive for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        Ok((matmul_raw(inputs[0], self.ta, inputs[1], self.tb)?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, n) = (out.shape()[0], out.shape()[1]);
        let k = if self.ta { a.shape()[0] } else { a.shape()[1] };
        let mut da = vec![0.0; a.numel()];
        if self.ta {
            gemm(k, n, m, b.data(), self.tb, g.data(), true, &mut da, false);
        } else {
            gemm(m, n, k, g.data(), false, b.data(), !self.tb, &mut da, false);
        }
        let mut db = vec![0.0; b.numel()];
        if self.tb {
            gemm(n, m, k, g.data(), true, a.data(), self.ta, &mut db, false);
        } else {
            gemm(k, m, n, a.data(), !self.ta, g.data(), false, &mut db, false);
        }
        vec![
            Some(Tensor::new(a.shape().to_vec(), da).unwrap()),
            Some(Tensor::new(b.shape().to_vec(), db).unwrap()),
        ]
    }
}

/// Shared affine map over the last axis: `x · w (+ b)`.
#[derive(Debug)]
struct Linear {
    bias: bool,
}

impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (x, w) = (inputs[0], inputs[1]);
        if w.ndim() != 2 || x.last_dim() != w.shape()[0] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (rows, cin, cout) = (x.rows(), w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * cout];
        if self.bias {
            let b = inputs[2];
            if b.numel() != cout {
                return Err(Error::shape("linear bias", w.shape(), b.shape()));
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out, self.bias);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok((Tensor::new(shape, out)?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, cin, cout) = (x.rows(), w.shape()[0], w.shape()[1]);
        let mut dx = vec![0.0; x.numel()];
        gemm(rows, cout, cin, g.data(), false, w.data(), true, &mut dx, false);
        let mut dw = vec![0.0; w.numel()];
        gemm(cin, rows, cout, x.data(), true, g.data(), false, &mut dw, false);
        let mut res = vec![
            Some(Tensor::new(x.shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(w.shape().to_vec(), dw).unwrap()),
        ];
        if self.bias {
            let db = sum_rows(g, cout).reshape(inputs[2].shape().to_vec()).unwrap();
            res.push(Some(db));
        }
        res
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
struct Elementwise(Binary);

impl Primitive for Elementwise {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape(self.name(), a, b)?;
        let out = match self.0 {
            Binary::Add => zip_map(a, b, |x, y| x + y),
            Binary::Sub => zip_map(a, b, |x, y| x - y),
            Binary::Mul => zip_map(a, b, |x, y| x * y),
        };
        Ok((out, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        match self.0 {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Binary::Mul => vec![
                Some(zip_map(g, inputs[1], |a, b| a * b)),
                Some(zip_map(g, inputs[0], |a, b| a * b)),
            ],
        }
    }
}

/// `x[..., c] + b[c]`.
#[derive(Debug)]
struct AddBias;

impl Primitive for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (x, b) = (inputs[0], inputs[1]);
        let c = x.last_dim();
        if b.numel() != c {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok((out, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let db = sum_rows(g, g.last_dim())
            .reshape(inputs[1].shape().to_vec())
            .unwrap();
        vec![Some(g.clone()), Some(db)]
    }
}

#[derive(Debug)]
struct Scale(f64);

impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let s = self.0;
        Ok((inputs[0].map(|v| v * s), Saved::None))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(g.map(|v| v * s))]
    }
}

#[derive(Debug)]
struct Relu;

impl Primitive for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        Ok((inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }), Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(g, inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
    }
}

#[derive(Debug)]
struct Tanh;

impl Primitive for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        Ok((inputs[0].map(f64::tanh), Saved::None))
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(g, out, |g, y| g * (1.0 - y * y)))]
    }
}

#[derive(Debug)]
struct SoftmaxLast;

/// Row-wise softmax with max subtraction.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Primitive for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax_last"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        inputs[0].check_finite("softmax_last input")?;
        Ok((softmax_last(inputs[0]), Saved::None))
    }

    fn backward(&self, _: &[&Tensor], y: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let c = y.last_dim();
        let mut dx = vec![0.0; y.numel()];
        for ((dr, yr), gr) in dx
            .chunks_exact_mut(c)
            .zip(y.data().chunks_exact(c))
            .zip(g.data().chunks_exact(c))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::new(y.shape().to_vec(), dx).unwrap())]
    }
}

#[derive(Debug)]
struct LayerNormOp {
    eps: f64,
}

impl LayerNormOp {
    fn stats(&self, x: &Tensor) -> Vec<f64> {
        // Interleaved (mean, rstd) per row.
        let c = x.last_dim();
        let mut st = Vec::with_capacity(2 * x.rows());
        for row in x.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            st.push(mean);
            st.push(1.0 / (var + self.eps).sqrt());
        }
        st
    }
}

impl Primitive for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
        let c = x.last_dim();
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        let st = self.stats(x);
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let (mean, rstd) = (st[2 * r], st[2 * r + 1]);
            for ((v, gn), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
                *v = (*v - mean) * rstd * gn + b;
            }
        }
        Ok((out, Saved::Values(st)))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, saved: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let c = x.last_dim();
        let Saved::Values(st) = saved else {
            unreachable!("layer_norm saves its statistics")
        };
        let mut dx = vec![0.0; x.numel()];
        let mut dgain = vec![0.0; c];
        let mut dbias = vec![0.0; c];
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        for r in 0..x.rows() {
            let (mean, rstd) = (st[2 * r], st[2 * r + 1]);
            let xr = &x.data()[r * c..(r + 1) * c];
            let gr = &g.data()[r * c..(r + 1) * c];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..c {
                xhat[j] = (xr[j] - mean) * rstd;
                dxhat[j] = gr[j] * gain.data()[j];
                dgain[j] += gr[j] * xhat[j];
                dbias[j] += gr[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            for j in 0..c {
                dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        vec![
            Some(Tensor::new(x.shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(inputs[1].shape().to_vec(), dgain).unwrap()),
            Some(Tensor::new(inputs[2].shape().to_vec(), dbias).unwrap()),
        ]
    }
}

#[derive(Debug)]
struct MaxAxis {
    axis: usize,
}

impl Primitive for MaxAxis {
    fn name(&self) -> &'static str {
        "max_over_axis"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (v, arg) = max_over_axis(inputs[0], self.axis)?;
        Ok((v, Saved::Indices(arg.into_data())))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, saved: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (_, len, inner) = axis_split("max_over_axis", x.shape(), self.axis).unwrap();
        let Saved::Indices(arg) = saved else {
            unreachable!("max saves argmax")
        };
        let mut dx = vec![0.0; x.numel()];
        for (flat, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
            let (o, i) = (flat / inner, flat % inner);
            dx[o * len * inner + a * inner + i] += gv;
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).unwrap())]
    }
}

#[derive(Debug)]
struct SumAll;

impl Primitive for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        Ok((Tensor::scalar(inputs[0].sum()), Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))]
    }
}

#[derive(Debug)]
struct MeanAxis {
    axis: usize,
}

impl Primitive for MeanAxis {
    fn name(&self) -> &'static str {
        "mean_over_axis"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let x = inputs[0];
        let (outer, len, inner) = axis_split("mean_over_axis", x.shape(), self.axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        Ok((
            Tensor::new(without_axis(x.shape(), self.axis), out)?,
            Saved::None,
        ))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (outer, len, inner) = axis_split("mean_over_axis", x.shape(), self.axis).unwrap();
        let mut dx = vec![0.0; x.numel()];
        for o in 0..outer {
            for j in 0..len {
                let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                    *d = s / len as f64;
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).unwrap())]
    }
}

#[derive(Debug)]
struct Concat {
    axis: usize,
}

impl Primitive for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let axis = self.axis;
        let (outer, _, inner) = axis_split("concat", first.shape(), axis)?;
        let mut total = 0;
        for x in inputs {
            let ok = x.ndim() == first.ndim()
                && x
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), x.shape()));
            }
            total += x.shape()[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in inputs {
                let blk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok((Tensor::new(shape, out)?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let axis = self.axis;
        let (outer, total, inner) = axis_split("concat", out.shape(), axis).unwrap();
        let mut offset = 0;
        let mut res = Vec::with_capacity(inputs.len());
        for x in inputs {
            let len = x.shape()[axis];
            let mut d = Vec::with_capacity(x.numel());
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                d.extend_from_slice(&g.data()[start..start + len * inner]);
            }
            offset += len;
            res.push(Some(Tensor::new(x.shape().to_vec(), d).unwrap()));
        }
        res
    }
}

#[derive(Debug)]
struct Slice {
    axis: usize,
    start: usize,
    len: usize,
}

impl Primitive for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let x = inputs[0];
        let (outer, full, inner) = axis_split("slice", x.shape(), self.axis)?;
        if self.len == 0 || self.start + self.len > full {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {}..{} outside axis of length {full}",
                    self.start,
                    self.start + self.len
                ),
            ));
        }
        let mut out = Vec::with_capacity(outer * self.len * inner);
        for o in 0..outer {
            let s = (o * full + self.start) * inner;
            out.extend_from_slice(&x.data()[s..s + self.len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[self.axis] = self.len;
        Ok((Tensor::new(shape, out)?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (outer, full, inner) = axis_split("slice", x.shape(), self.axis).unwrap();
        let mut dx = vec![0.0; x.numel()];
        let blk = self.len * inner;
        for o in 0..outer {
            let s = (o * full + self.start) * inner;
            dx[s..s + blk].copy_from_slice(&g.data()[o * blk..(o + 1) * blk]);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), dx).unwrap())]
    }
}

#[derive(Debug)]
struct Reshape {
    shape: Vec<usize>,
}

impl Primitive for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        Ok((inputs[0].clone().reshape(self.shape.clone())?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone().reshape(inputs[0].shape().to_vec()).unwrap())]
    }
}

#[derive(Debug)]
struct Transpose2d;

fn transpose2d(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

impl Primitive for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        if inputs[0].ndim() != 2 {
            return Err(Error::invalid("transpose", "expects a 2-D tensor"));
        }
        Ok((transpose2d(inputs[0]), Saved::None))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(transpose2d(g))]
    }
}

/// Row gather: `out[r] = values[idx[r]]`, with the result reshaped to `out_shape`.
#[derive(Debug)]
struct GatherRows {
    idx: Vec<usize>,
    out_shape: Vec<usize>,
}

impl Primitive for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let v = inputs[0];
        let n = v.rows();
        if let Some(&bad) = self.idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        Ok((
            v.select_rows(&self.idx).reshape(self.out_shape.clone())?,
            Saved::None,
        ))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let v = inputs[0];
        let c = v.last_dim();
        let mut dv = vec![0.0; v.numel()];
        for (r, &i) in self.idx.iter().enumerate() {
            let src = &g.data()[r * c..(r + 1) * c];
            for (d, s) in dv[i * c..(i + 1) * c].iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![Some(Tensor::new(v.shape().to_vec(), dv).unwrap())]
    }
}

/// `x[r, :] * s[r]` over the row view of `x`.
#[derive(Debug)]
struct ScaleRows;

impl Primitive for ScaleRows {
    fn name(&self) -> &'static str {
        "scale_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (x, s) = (inputs[0], inputs[1]);
        if s.numel() != x.rows() {
            return Err(Error::shape("scale_rows", x.shape(), s.shape()));
        }
        let c = x.last_dim();
        let mut out = x.clone();
        for (row, &sv) in out.data_mut().chunks_exact_mut(c).zip(s.data()) {
            for v in row {
                *v *= sv;
            }
        }
        Ok((out, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, s) = (inputs[0], inputs[1]);
        let c = x.last_dim();
        let mut dx = g.clone();
        let mut ds = vec![0.0; s.numel()];
        for (r, (drow, xrow)) in dx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(x.data().chunks_exact(c))
            .enumerate()
        {
            let mut acc = 0.0;
            for (d, xv) in drow.iter_mut().zip(xrow) {
                acc += *d * xv;
                *d *= s.data()[r];
            }
            ds[r] = acc;
        }
        vec![
            Some(dx),
            Some(Tensor::new(s.shape().to_vec(), ds).unwrap()),
        ]
    }
}

/// 2-D cross-correlation on an `h×w×cin` image with a `kh×kw×cin×cout` kernel.
#[derive(Debug)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dOp {
    fn geom(&self, x: &Tensor, k: &Tensor) -> Result<ConvGeom> {
        if x.ndim() != 3 || k.ndim() != 4 {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, kc, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != cin {
            return Err(Error::shape("conv2d channels", x.shape(), k.shape()));
        }
        if h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
            ));
        }
        let ho = (h + 2 * self.pad - kh) / self.stride + 1;
        let wo = (w + 2 * self.pad - kw) / self.stride + 1;
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ho,
            wo,
        })
    }

    /// Patch matrix `[ho*wo, kh*kw*cin]`.
    fn im2col(&self, x: &Tensor, g: &ConvGeom) -> Vec<f64> {
        let patch = g.kh * g.kw * g.cin;
        let mut cols = vec![0.0; g.ho * g.wo * patch];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let base = (oy * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = base + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x.data()[src..src + g.cin]);
                    }
                }
            }
        }
        cols
    }
}

impl Primitive for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        let (x, k, b) = (inputs[0], inputs[1], inputs[2]);
        let g = self.geom(x, k)?;
        if b.numel() != g.cout {
            return Err(Error::shape("conv2d bias", k.shape(), b.shape()));
        }
        let cols = self.im2col(x, &g);
        let rows = g.ho * g.wo;
        let mut out = vec![0.0; rows * g.cout];
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b.data());
        }
        let patch = g.kh * g.kw * g.cin;
        gemm(rows, patch, g.cout, &cols, false, k.data(), false, &mut out, true);
        Ok((Tensor::new(vec![g.ho, g.wo, g.cout], out)?, Saved::None))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, _: &Saved, gr: &Tensor) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        let g = self.geom(x, k).unwrap();
        let rows = g.ho * g.wo;
        let patch = g.kh * g.kw * g.cin;
        let cols = self.im2col(x, &g);
        let mut dk = vec![0.0; k.numel()];
        gemm(patch, rows, g.cout, &cols, true, gr.data(), false, &mut dk, false);
        let mut dcols = vec![0.0; rows * patch];
        gemm(rows, g.cout, patch, gr.data(), false, k.data(), true, &mut dcols, false);
        let mut dx = vec![0.0; x.numel()];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let base = (oy * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * g.w + ix as usize) * g.cin;
                        let src = base + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
        let db = sum_rows(gr, g.cout).reshape(inputs[2].shape().to_vec()).unwrap();
        vec![
            Some(Tensor::new(x.shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(k.shape().to_vec(), dk).unwrap()),
            Some(db),
        ]
    }
}

impl<'p> Graph<'p> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(MatMul { ta: false, tb: false }), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(MatMul { ta: false, tb: true }), &[a, b])
    }

    /// Affine map over the last axis, shared across all leading indices.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Box::new(Linear { bias: true }), &[x, w, b]),
            None => self.apply(Box::new(Linear { bias: false }), &[x, w]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Elementwise(Binary::Add)), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Elementwise(Binary::Sub)), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Elementwise(Binary::Mul)), &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(AddBias), &[x, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Box::new(Scale(s)), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Relu), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Tanh), &[x])
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(SoftmaxLast), &[x])
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Box::new(LayerNormOp { eps }), &[x, gain, bias])
    }

    /// Maximum over `axis` (the axis is removed). Ties resolve to the smallest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Box::new(MaxAxis { axis }), &[x])
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Box::new(MeanAxis { axis }), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(SumAll), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Box::new(Concat { axis }), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Box::new(Slice { axis, start, len }), &[x])
    }

    /// Splits `x` along `axis` into consecutive pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lens: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &len in lens {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Box::new(Reshape { shape }), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Transpose2d), &[x])
    }

    /// Gathers rows of the row view of `values`; the result has shape
    /// `lead ++ [c]` where `lead.iter().product() == idx.len()`.
    pub fn gather_rows(&mut self, values: Var, idx: Vec<usize>, lead: &[usize]) -> Result<Var> {
        let c = self.value(values).last_dim();
        if lead.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather_rows", lead, &[idx.len()]));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(c);
        self.apply(Box::new(GatherRows { idx, out_shape }), &[values])
    }

    /// Replicates a single row `n` times.
    pub fn replicate_row(&mut self, x: Var, n: usize) -> Result<Var> {
        if self.value(x).rows() != 1 {
            return Err(Error::invalid(
                "replicate",
                format!("expects one row, got shape {:?}", self.shape(x)),
            ));
        }
        self.gather_rows(x, vec![0; n], &[n])
    }

    /// Repeats every row `r` times in place: row `i` becomes rows `r*i .. r*i+r`.
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Result<Var> {
        let n = self.value(x).rows();
        let idx = (0..n * r).map(|j| j / r).collect();
        self.gather_rows(x, idx, &[n * r])
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Box::new(ScaleRows), &[x, s])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        self.apply(Box::new(Conv2dOp { stride, pad }), &[x, kernel, bias])
    }
}
