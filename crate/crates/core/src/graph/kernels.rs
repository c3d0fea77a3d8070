//! Forward and backward kernels for every primitive.
//!
//! Forward kernels return `Err(message)` on shape violations; the caller
//! attaches the node description.

use std::borrow::Cow;

use super::conv;
use super::{Axis, Op, Var};
use crate::numeric::{argmin, softmax_in_place, softplus};
use crate::linalg::{back_substitute_transposed, forward_substitute, matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::Tensor;

type Values<'a> = [Cow<'a, Tensor>];
type KResult = Result<Tensor, String>;

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast, String> {
    let (ar, ac) = dims(a);
    let (br, bc) = dims(b);
    if ar == br && ac == bc {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else {
        Err(format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> KResult {
    let kind = broadcast_kind(a, b)?;
    let ac = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match kind {
                Broadcast::Same => bd[i],
                Broadcast::Row => bd[i % ac],
                Broadcast::Scalar => bd[0],
            };
            f(x, y)
        })
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data).expect("same shape"))
}

/// Sums a gradient shaped like `a` down to the shape of `b`.
fn reduce_to(g: &[f64], a: &Tensor, b: &Tensor) -> Tensor {
    let kind = broadcast_kind(a, b).expect("checked in forward");
    match kind {
        Broadcast::Same => Tensor::new(b.shape().to_vec(), g.to_vec()).expect("same shape"),
        Broadcast::Scalar => Tensor::new(b.shape().to_vec(), vec![g.iter().sum()]).expect("scalar"),
        Broadcast::Row => {
            let c = a.cols();
            let mut out = vec![0.0; c];
            for row in g.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("row shape")
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    t.map(f)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_square(t: &Tensor) -> Result<usize, String> {
    let (r, c) = dims(t);
    if r != c {
        return Err(format!("expected square matrix, got {:?}", t.shape()));
    }
    Ok(r)
}

pub(super) fn forward(op: &Op, v: &Values<'_>) -> KResult {
    let val = |x: &Var| -> &Tensor { &v[x.0] };
    match op {
        Op::Input { .. } | Op::Constant(_) => unreachable!("handled by the graph"),
        Op::Add(a, b) => zip_broadcast(val(a), val(b), |x, y| x + y),
        Op::Sub(a, b) => zip_broadcast(val(a), val(b), |x, y| x - y),
        Op::Mul(a, b) => zip_broadcast(val(a), val(b), |x, y| x * y),
        Op::Scale(x, k) => Ok(map(val(x), |a| a * k)),
        Op::AddScalar(x, k) => Ok(map(val(x), |a| a + k)),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k) = dims(a);
            let (k2, n) = dims(b);
            if k != k2 {
                return Err(format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            matmul_nn(m, k, n, 1.0, a.data(), b.data(), 0.0, &mut out);
            Ok(Tensor::matrix(m, n, out))
        }
        Op::Transpose(x) => Ok(transpose(val(x))),
        Op::Affine { x, w, b } => {
            let (x, w, b) = (val(x), val(w), val(b));
            let (m, k) = dims(x);
            let (k2, n) = dims(w);
            if k != k2 {
                return Err(format!("input {:?} does not match weight {:?}", x.shape(), w.shape()));
            }
            if b.len() != n {
                return Err(format!("bias {:?} does not match {n} outputs", b.shape()));
            }
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            matmul_nn(m, k, n, 1.0, x.data(), w.data(), 1.0, &mut out);
            Ok(Tensor::matrix(m, n, out))
        }
        Op::LeakyRelu(x, s) => Ok(map(val(x), |a| if a > 0.0 { a } else { s * a })),
        Op::Tanh(x) => Ok(map(val(x), f64::tanh)),
        Op::Exp(x) => Ok(map(val(x), f64::exp)),
        Op::Log(x) => Ok(map(val(x), f64::ln)),
        Op::Square(x) => Ok(map(val(x), |a| a * a)),
        Op::Softplus(x) => Ok(map(val(x), softplus)),
        Op::Clamp(x, lo, hi) => Ok(map(val(x), |a| a.clamp(*lo, *hi))),
        Op::Softmax(x) => {
            let x = val(x);
            let mut out = x.clone();
            for r in 0..x.rows() {
                softmax_in_place(out.row_mut(r));
            }
            Ok(out)
        }
        Op::LogSoftmax(x) => {
            let x = val(x);
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|a| *a -= lse);
            }
            Ok(out)
        }
        Op::Sum(x) => Ok(Tensor::scalar(val(x).data().iter().sum())),
        Op::Mean(x) => {
            let x = val(x);
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        Op::RowSum(x) => {
            let x = val(x);
            let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Ok(Tensor::matrix(x.rows(), 1, data))
        }
        Op::RowMin(x) => {
            let x = val(x);
            let data = (0..x.rows()).map(|r| x.row(r)[argmin(x.row(r))]).collect();
            Ok(Tensor::matrix(x.rows(), 1, data))
        }
        Op::Concat(xs, axis) => concat(&xs.iter().map(&val).collect::<Vec<_>>(), *axis),
        Op::Reshape { x, cols } => {
            let x = val(x);
            if *cols == 0 || x.len() % cols != 0 {
                return Err(format!("{} values cannot form rows of {cols}", x.len()));
            }
            Ok(Tensor::matrix(x.len() / cols, *cols, x.data().to_vec()))
        }
        Op::Slice { x, axis, start, end } => {
            let x = val(x);
            let (r, c) = dims(x);
            let limit = if *axis == Axis::Rows { r } else { c };
            if start >= end || *end > limit {
                return Err(format!("slice {start}..{end} out of range for {:?} along {axis:?}", x.shape()));
            }
            let indices: Vec<usize> = (*start..*end).collect();
            Ok(gather(x, *axis, &indices))
        }
        Op::Gather { x, axis, indices } => {
            let x = val(x);
            let (r, c) = dims(x);
            let limit = if *axis == Axis::Rows { r } else { c };
            if indices.is_empty() || indices.iter().any(|&i| i >= limit) {
                return Err(format!("gather indices out of range for {:?} along {axis:?}", x.shape()));
            }
            Ok(gather(x, *axis, indices))
        }
        Op::Resize(x, spec) => spec.forward(val(x)),
        Op::SqDist(a, b) => {
            let (a, b) = (val(a), val(b));
            let (n, l) = dims(a);
            let (m, l2) = dims(b);
            if l != l2 {
                return Err(format!("row dimensions differ: {:?} vs {:?}", a.shape(), b.shape()));
            }
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..m {
                    out.push(ai.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum());
                }
            }
            Ok(Tensor::matrix(n, m, out))
        }
        Op::CholFactor { raw, min_diag } => {
            let raw = val(raw);
            let n = check_square(raw)?;
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..i {
                    out[i * n + j] = raw.data()[i * n + j];
                }
                out[i * n + i] = softplus(raw.data()[i * n + i]) + min_diag;
            }
            Ok(Tensor::matrix(n, n, out))
        }
        Op::Diag(x) => {
            let x = val(x);
            let n = check_square(x)?;
            Ok(Tensor::matrix(1, n, (0..n).map(|i| x.data()[i * n + i]).collect()))
        }
        Op::TriSolve { l, x } => {
            let (l, x) = (val(l), val(x));
            let n = check_square(l)?;
            if x.cols() != n {
                return Err(format!("rows of {:?} do not match factor {:?}", x.shape(), l.shape()));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                forward_substitute(l.data(), n, out.row_mut(r));
            }
            Ok(out)
        }
        Op::Conv2d { x, w, b, spec } => conv::conv2d_forward(val(x), val(w), val(b), spec),
        Op::ConvTranspose2d { x, w, b, spec } => conv::conv_transpose2d_forward(val(x), val(w), val(b), spec),
        Op::BatchNorm { x, gamma, beta, mean, var, channels, eps } => {
            let (x, gamma, beta, mean, var) = (val(x), val(gamma), val(beta), val(mean), val(var));
            let c = *channels;
            if [gamma, beta, mean, var].iter().any(|t| t.len() != c) || x.cols() % c != 0 {
                return Err(format!("batch-norm over {c} channels does not fit input {:?}", x.shape()));
            }
            let spatial = x.cols() / c;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                for ch in 0..c {
                    let inv = 1.0 / (var.data()[ch] + eps).sqrt();
                    let (m, g, bt) = (mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
                    for a in &mut row[ch * spatial..(ch + 1) * spatial] {
                        *a = (*a - m) * inv * g + bt;
                    }
                }
            }
            Ok(out)
        }
    }
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = dims(x);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// Index of the smallest entry; ties go to the lowest index.
fn concat(xs: &[&Tensor], axis: Axis) -> KResult {
    match axis {
        Axis::Rows => {
            let c = xs[0].cols();
            if xs.iter().any(|t| t.cols() != c) {
                return Err("row-concat operands differ in column count".into());
            }
            let data: Vec<f64> = xs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::matrix(data.len() / c, c, data))
        }
        Axis::Cols => {
            let r = xs[0].rows();
            if xs.iter().any(|t| t.rows() != r) {
                return Err("column-concat operands differ in row count".into());
            }
            let total: usize = xs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in xs {
                    data.extend_from_slice(t.row(i));
                }
            }
            Ok(Tensor::matrix(r, total, data))
        }
    }
}

fn gather(x: &Tensor, axis: Axis, indices: &[usize]) -> Tensor {
    match axis {
        Axis::Rows => x.select_rows(indices),
        Axis::Cols => {
            let r = x.rows();
            let mut data = Vec::with_capacity(r * indices.len());
            for i in 0..r {
                let row = x.row(i);
                data.extend(indices.iter().map(|&j| row[j]));
            }
            Tensor::matrix(r, indices.len(), data)
        }
    }
}

fn scatter_add(target: &mut Tensor, axis: Axis, indices: &[usize], g: &Tensor) {
    match axis {
        Axis::Rows => {
            for (k, &i) in indices.iter().enumerate() {
                for (t, s) in target.row_mut(i).iter_mut().zip(g.row(k)) {
                    *t += s;
                }
            }
        }
        Axis::Cols => {
            for i in 0..g.rows() {
                let src = g.row(i).to_vec();
                let row = target.row_mut(i);
                for (k, &j) in indices.iter().enumerate() {
                    row[j] += src[k];
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], needs: &[bool], var: Var, g: Tensor) {
    if !needs[var.0] {
        return;
    }
    match &mut grads[var.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient has operand shape")
}

pub(super) fn backward(
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    v: &Values<'_>,
    needs: &[bool],
    grads: &mut [Option<Tensor>],
) {
    let val = |x: &Var| -> &Tensor { &v[x.0] };
    let gd = g.data();
    match op {
        Op::Input { .. } | Op::Constant(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (ta, tb) = (val(a), val(b));
            accumulate(grads, needs, *a, g.clone());
            if needs[b.0] {
                let mut gb = reduce_to(gd, ta, tb);
                if matches!(op, Op::Sub(..)) {
                    gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, needs, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if needs[a.0] {
                // g * broadcast(b)
                let ga = zip_broadcast(g, tb, |x, y| x * y).expect("checked in forward");
                accumulate(grads, needs, *a, with_data(ta, ga.into_data()));
            }
            if needs[b.0] {
                let prod: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, needs, *b, reduce_to(&prod, ta, tb));
            }
        }
        Op::Scale(x, k) => accumulate(grads, needs, *x, map(g, |a| a * k)),
        Op::AddScalar(x, _) => accumulate(grads, needs, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k) = dims(ta);
            let n = tb.cols();
            if needs[a.0] {
                let mut ga = vec![0.0; m * k];
                matmul_nt(m, n, k, 1.0, gd, tb.data(), 0.0, &mut ga);
                accumulate(grads, needs, *a, with_data(ta, ga));
            }
            if needs[b.0] {
                let mut gb = vec![0.0; k * n];
                matmul_tn(k, m, n, 1.0, ta.data(), gd, 0.0, &mut gb);
                accumulate(grads, needs, *b, with_data(tb, gb));
            }
        }
        Op::Transpose(x) => accumulate(grads, needs, *x, with_data(val(x), transpose(g).into_data())),
        Op::Affine { x, w, b } => {
            let (tx, tw, tb) = (val(x), val(w), val(b));
            let (m, k) = dims(tx);
            let n = tw.cols();
            if needs[x.0] {
                let mut gx = vec![0.0; m * k];
                matmul_nt(m, n, k, 1.0, gd, tw.data(), 0.0, &mut gx);
                accumulate(grads, needs, *x, with_data(tx, gx));
            }
            if needs[w.0] {
                let mut gw = vec![0.0; k * n];
                matmul_tn(k, m, n, 1.0, tx.data(), gd, 0.0, &mut gw);
                accumulate(grads, needs, *w, with_data(tw, gw));
            }
            if needs[b.0] {
                let mut gb = vec![0.0; n];
                for row in gd.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                accumulate(grads, needs, *b, with_data(tb, gb));
            }
        }
        Op::LeakyRelu(x, s) => {
            let data = gd.iter().zip(val(x).data()).map(|(g, &a)| if a > 0.0 { *g } else { g * s }).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Tanh(x) => {
            let data = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Exp(x) => {
            let data = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Log(x) => {
            let data = gd.iter().zip(val(x).data()).map(|(g, a)| g / a).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Square(x) => {
            let data = gd.iter().zip(val(x).data()).map(|(g, a)| 2.0 * g * a).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Softplus(x) => {
            let data = gd.iter().zip(val(x).data()).map(|(g, &a)| g * sigmoid(a)).collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Clamp(x, lo, hi) => {
            let data = gd
                .iter()
                .zip(val(x).data())
                .map(|(g, a)| if a >= lo && a <= hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, needs, *x, with_data(g, data));
        }
        Op::Softmax(x) => {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let y = out.row(r);
                let dot: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                for (gi, yi) in gx.row_mut(r).iter_mut().zip(y) {
                    *gi = yi * (*gi - dot);
                }
            }
            accumulate(grads, needs, *x, gx);
        }
        Op::LogSoftmax(x) => {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let total: f64 = g.row(r).iter().sum();
                for (gi, yi) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                    *gi -= yi.exp() * total;
                }
            }
            accumulate(grads, needs, *x, gx);
        }
        Op::Sum(x) => accumulate(grads, needs, *x, Tensor::full(val(x).shape(), gd[0])),
        Op::Mean(x) => {
            let t = val(x);
            accumulate(grads, needs, *x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
        }
        Op::RowSum(x) => {
            let t = val(x);
            let c = t.cols();
            let data = (0..t.len()).map(|i| gd[i / c]).collect();
            accumulate(grads, needs, *x, with_data(t, data));
        }
        Op::RowMin(x) => {
            let t = val(x);
            let c = t.cols();
            let mut data = vec![0.0; t.len()];
            for r in 0..t.rows() {
                data[r * c + argmin(t.row(r))] = gd[r];
            }
            accumulate(grads, needs, *x, with_data(t, data));
        }
        Op::Concat(xs, axis) => {
            let mut offset = 0;
            for x in xs {
                let t = val(x);
                let extent = if *axis == Axis::Rows { t.rows() } else { t.cols() };
                if needs[x.0] {
                    let indices: Vec<usize> = (offset..offset + extent).collect();
                    let part = gather(g, *axis, &indices);
                    accumulate(grads, needs, *x, with_data(t, part.into_data()));
                }
                offset += extent;
            }
        }
        Op::Reshape { x, .. } => accumulate(grads, needs, *x, with_data(val(x), gd.to_vec())),
        Op::Slice { x, axis, start, end } => {
            let t = val(x);
            let mut gx = Tensor::zeros(t.shape());
            let indices: Vec<usize> = (*start..*end).collect();
            scatter_add(&mut gx, *axis, &indices, g);
            accumulate(grads, needs, *x, gx);
        }
        Op::Gather { x, axis, indices } => {
            let t = val(x);
            let mut gx = Tensor::zeros(t.shape());
            scatter_add(&mut gx, *axis, indices, g);
            accumulate(grads, needs, *x, gx);
        }
        Op::Resize(x, spec) => accumulate(grads, needs, *x, with_data(val(x), spec.backward(g).into_data())),
        Op::SqDist(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (n, l) = dims(ta);
            let m = tb.rows();
            let mut ga = vec![0.0; n * l];
            let mut gb = vec![0.0; m * l];
            for i in 0..n {
                let ai = ta.row(i);
                for j in 0..m {
                    let gij = 2.0 * gd[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = tb.row(j);
                    for k in 0..l {
                        let d = gij * (ai[k] - bj[k]);
                        ga[i * l + k] += d;
                        gb[j * l + k] -= d;
                    }
                }
            }
            accumulate(grads, needs, *a, with_data(ta, ga));
            accumulate(grads, needs, *b, with_data(tb, gb));
        }
        Op::CholFactor { raw, .. } => {
            let t = val(raw);
            let n = t.rows();
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..i {
                    data[i * n + j] = gd[i * n + j];
                }
                data[i * n + i] = gd[i * n + i] * sigmoid(t.data()[i * n + i]);
            }
            accumulate(grads, needs, *raw, with_data(t, data));
        }
        Op::Diag(x) => {
            let t = val(x);
            let n = t.rows();
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] = gd[i];
            }
            accumulate(grads, needs, *x, with_data(t, data));
        }
        Op::TriSolve { l, x } => {
            let (tl, tx) = (val(l), val(x));
            let n = tl.rows();
            let mut gx = g.clone();
            let mut gl = vec![0.0; n * n];
            for r in 0..g.rows() {
                let row = gx.row_mut(r);
                back_substitute_transposed(tl.data(), n, row);
                let sol = out.row(r);
                for i in 0..n {
                    for j in 0..=i {
                        gl[i * n + j] -= row[i] * sol[j];
                    }
                }
            }
            accumulate(grads, needs, *l, with_data(tl, gl));
            accumulate(grads, needs, *x, with_data(tx, gx.into_data()));
        }
        Op::Conv2d { x, w, b, spec } => {
            let (gx, gw, gb) = conv::conv2d_backward(val(x), val(w), g, spec, needs[x.0], needs[w.0]);
            if let Some(gx) = gx {
                accumulate(grads, needs, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, needs, *w, gw);
            }
            accumulate(grads, needs, *b, with_data(val(b), gb));
        }
        Op::ConvTranspose2d { x, w, b, spec } => {
            let (gx, gw, gb) = conv::conv_transpose2d_backward(val(x), val(w), g, spec, needs[x.0], needs[w.0]);
            if let Some(gx) = gx {
                accumulate(grads, needs, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, needs, *w, gw);
            }
            accumulate(grads, needs, *b, with_data(val(b), gb));
        }
        Op::BatchNorm { x, gamma, beta, mean, var, channels, eps } => {
            let (tx, tg, tb, tm, tv) = (val(x), val(gamma), val(beta), val(mean), val(var));
            let c = *channels;
            let spatial = tx.cols() / c;
            let mut gx = vec![0.0; tx.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for r in 0..tx.rows() {
                let xr = tx.row(r);
                let base = r * tx.cols();
                for ch in 0..c {
                    let inv = 1.0 / (tv.data()[ch] + eps).sqrt();
                    let (m, gm) = (tm.data()[ch], tg.data()[ch]);
                    for s in ch * spatial..(ch + 1) * spatial {
                        let gi = gd[base + s];
                        gx[base + s] = gi * inv * gm;
                        ggamma[ch] += gi * (xr[s] - m) * inv;
                        gbeta[ch] += gi;
                    }
                }
            }
            accumulate(grads, needs, *x, with_data(tx, gx));
            accumulate(grads, needs, *gamma, with_data(tg, ggamma));
            accumulate(grads, needs, *beta, with_data(tb, gbeta));
        }
    }
}
