use super::{gemm, numel, record_kinks, Tensor};
use crate::error::{dim_err, Result};

// ---------------------------------------------------------------------------
// broadcasting helpers

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Same-rank broadcasting: each dimension pair must be equal or contain a 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return dim_err(format!("cannot broadcast {a:?} with {b:?}: rank differs"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast output.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(out) / inner;
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, ia + j * ia_step, ib + j * ib_step);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n = numel(&out_shape);
    let same = a.shape() == b.shape();
    let data = {
        let (ad, bd) = (a.data(), b.data());
        let apply = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        if same {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| apply(x, y)).collect()
        } else {
            let mut out = vec![0.0; n];
            let sa = bcast_strides(a.shape(), &out_shape);
            let sb = bcast_strides(b.shape(), &out_shape);
            for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = apply(ad[i], bd[j]));
            out
        }
    };
    let oshape = out_shape.clone();
    Ok(Tensor::from_op(out_shape, data, vec![a.clone(), b.clone()], move |g, p, _| {
        let (a, b) = (&p[0], &p[1]);
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            let ga = a.requires_grad().then(|| match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect(),
                BinOp::Div => g.iter().zip(bd.iter()).map(|(g, y)| g / y).collect(),
            });
            let gb = b.requires_grad().then(|| match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|g| -g).collect(),
                BinOp::Mul => g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect(),
                BinOp::Div => g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect(),
            });
            return vec![ga, gb];
        }
        let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
        let sa = bcast_strides(a.shape(), &oshape);
        let sb = bcast_strides(b.shape(), &oshape);
        for_each_bcast(&oshape, &sa, &sb, |o, i, j| {
            let (da, db) = match op {
                BinOp::Add => (1.0, 1.0),
                BinOp::Sub => (1.0, -1.0),
                BinOp::Mul => (bd[j], ad[i]),
                BinOp::Div => (1.0 / bd[j], -ad[i] / (bd[j] * bd[j])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] += g[o] * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += g[o] * db;
            }
        });
        vec![ga, gb]
    }))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, BinOp::Add)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, BinOp::Sub)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, BinOp::Mul)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, BinOp::Div)
}

// ---------------------------------------------------------------------------
// elementwise unary

/// `df(x, y)` is the local derivative given input and output.
fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |g, p, y| {
        let xd = p[0].data();
        vec![Some(
            g.iter()
                .zip(xd.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect(),
        )]
    })
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    unary(x, move |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    unary(x, move |v| v + c, |_, _| 1.0)
}

pub fn neg(x: &Tensor) -> Tensor {
    scale(x, -1.0)
}

pub fn relu(x: &Tensor) -> Tensor {
    record_kinks(&x.data(), |v| u64::from(v > 0.0));
    unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    record_kinks(&x.data(), |v| u64::from(v > 0.0));
    unary(
        x,
        move |v| if v > 0.0 { v } else { slope * v },
        move |x, _| if x > 0.0 { 1.0 } else { slope },
    )
}

pub fn tanh(x: &Tensor) -> Tensor {
    unary(x, f64::tanh, |_, y| 1.0 - y * y)
}

pub(crate) fn sigmoid_f(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, sigmoid_f, |_, y| y * (1.0 - y))
}

pub fn exp(x: &Tensor) -> Tensor {
    unary(x, f64::exp, |_, y| y)
}

pub fn log(x: &Tensor) -> Tensor {
    unary(x, f64::ln, |x, _| 1.0 / x)
}

pub fn sqrt(x: &Tensor) -> Tensor {
    unary(x, f64::sqrt, |_, y| 0.5 / y)
}

/// Clamps into `[lo, hi]`; the gradient is passed through strictly inside.
pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    record_kinks(&x.data(), move |v| u64::from(v > lo) | u64::from(v < hi) << 1);
    unary(x, move |v| v.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_all(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(vec![1], vec![s], vec![x.clone()], move |g, _, _| vec![Some(vec![g[0]; n])])
}

pub fn mean_all(x: &Tensor) -> Tensor {
    scale(&sum_all(x), 1.0 / x.numel() as f64)
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Sums over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    let mut out = vec![0.0; outer * inner];
    {
        let xd = x.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g, _, _| {
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(gx)]
    }))
}

pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = *x
        .shape()
        .get(axis)
        .ok_or_else(|| crate::Error::Dimension(format!("axis {axis} out of range for {:?}", x.shape())))?;
    Ok(scale(&sum_axis(x, axis)?, 1.0 / n as f64))
}

// ---------------------------------------------------------------------------
// softmax family

/// Softmax over contiguous rows of length `n`.
fn softmax_rows(x: &Tensor, n: usize) -> Tensor {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for ((gxr, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                *o = yv * (gv - dot);
            }
        }
        vec![Some(gx)]
    })
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if inner == 1 {
        return Ok(softmax_rows(x, n));
    }
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (xd[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                for k in 0..n {
                    gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }))
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (xd[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[idx(k)] = xd[idx(k)] - lse;
                }
            }
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let gs: f64 = (0..n).map(|k| g[idx(k)]).sum();
                for k in 0..n {
                    gx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gs;
                }
            }
        }
        vec![Some(gx)]
    }))
}

// ---------------------------------------------------------------------------
// shape ops

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() || shape.contains(&0) {
        return dim_err(format!("cannot reshape {:?} into {shape:?}", x.shape()));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), vec![x.clone()], |g, _, _| vec![Some(g.to_vec())]))
}

fn permute_data(data: &[f64], shape: &[usize], dims: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    // strides of the input, read in output order
    let src: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; data.len()];
    for_each_bcast(&out_shape, &src, &zero, |o, i, _| out[o] = data[i]);
    out
}

pub fn permute(x: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut check = dims.to_vec();
    check.sort_unstable();
    if check != (0..rank).collect::<Vec<_>>() {
        return dim_err(format!("invalid permutation {dims:?} for shape {:?}", x.shape()));
    }
    let out_shape: Vec<usize> = dims.iter().map(|&d| x.shape()[d]).collect();
    let data = permute_data(&x.data(), x.shape(), dims);
    let mut inverse = vec![0; rank];
    for (i, &d) in dims.iter().enumerate() {
        inverse[d] = i;
    }
    let os = out_shape.clone();
    Ok(Tensor::from_op(out_shape, data, vec![x.clone()], move |g, _, _| {
        vec![Some(permute_data(g, &os, &inverse))]
    }))
}

/// 2-D transpose.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return dim_err(format!("transpose needs rank 2, got {:?}", x.shape()));
    }
    permute(x, &[1, 0])
}

pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > n {
        return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {:?}", x.shape()));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    {
        let xd = x.data();
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
    }
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g, _, _| {
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            gx[(o * n + start) * inner..(o * n + start + len) * inner]
                .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(gx)]
    }))
}

pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return dim_err("concat of zero tensors");
    };
    let rank = first.rank();
    for x in xs {
        let ok = x.rank() == rank
            && axis < rank
            && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return dim_err(format!(
                "concat along {axis}: incompatible shapes {:?} and {:?}",
                first.shape(),
                x.shape()
            ));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    {
        let datas: Vec<_> = xs.iter().map(|x| x.data()).collect();
        for o in 0..outer {
            for (d, &l) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
    }
    Ok(Tensor::from_op(shape, out, xs.to_vec(), move |g, parents, _| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gr, &l) in grads.iter_mut().zip(&lens) {
                gr.extend_from_slice(&g[off..off + l * inner]);
                off += l * inner;
            }
        }
        grads
            .into_iter()
            .zip(parents)
            .map(|(gr, p)| p.requires_grad().then_some(gr))
            .collect()
    }))
}

/// Rows of `table[V×E]` selected by `ids`, giving `[ids.len()×E]`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return dim_err(format!("embedding table must be rank 2, got {:?}", table.shape()));
    }
    let (v, e) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return dim_err(format!("embedding id {bad} out of range for table of {v} rows"));
    }
    if ids.is_empty() {
        return dim_err("embedding lookup with no ids");
    }
    let mut out = Vec::with_capacity(ids.len() * e);
    {
        let td = table.data();
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
    }
    let ids = ids.to_vec();
    Ok(Tensor::from_op(vec![ids.len(), e], out, vec![table.clone()], move |g, _, _| {
        let mut gt = vec![0.0; v * e];
        for (r, &i) in ids.iter().enumerate() {
            gt[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(a, b)| *a += b);
        }
        vec![Some(gt)]
    }))
}

// ---------------------------------------------------------------------------
// matrix products

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return dim_err(format!("matmul: cannot multiply {:?} by {:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data(), false, &b.data(), false, &mut out, false);
    Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g, p, _| {
        let (a, b) = (&p[0], &p[1]);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, &b.data(), true, &mut ga, false);
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, &a.data(), true, g, false, &mut gb, false);
            gb
        });
        vec![ga, gb]
    }))
}

/// Batched matmul: `[B×m×k] · [B×k×n] → [B×m×n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
        return dim_err(format!("bmm: cannot multiply {:?} by {:?}", a.shape(), b.shape()));
    }
    let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; bs * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    Ok(Tensor::from_op(vec![bs, m, n], out, vec![a.clone(), b.clone()], move |g, p, _| {
        let (a, b) = (&p[0], &p[1]);
        let ga = a.requires_grad().then(|| {
            let bd = b.data();
            let mut ga = vec![0.0; bs * m * k];
            for i in 0..bs {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    true,
                    &mut ga[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let ad = a.data();
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                gemm(
                    k,
                    m,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    true,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &mut gb[i * k * n..(i + 1) * k * n],
                    false,
                );
            }
            gb
        });
        vec![ga, gb]
    }))
}
