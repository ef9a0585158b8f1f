//! Differentiable op library. Each op computes its forward result and, when
//! any operand is on a tape, records a closure that maps the output gradient
//! to per-operand gradient contributions.

use super::{pick_tape, BackwardFn, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn emit<T: Scalar, F>(
    parents: &[&Tensor<T>],
    data: Vec<T>,
    shape: Vec<usize>,
    make_backward: F,
) -> Tensor<T>
where
    F: FnOnce() -> BackwardFn<T>,
{
    match pick_tape(parents) {
        Some(tape) => tape.clone().record(parents, data, shape, make_backward()),
        None => Tensor {
            shape,
            data: std::rc::Rc::new(data),
            node: None,
        },
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(emit(&[a, b], data, a.shape().to_vec(), || {
        Box::new(|g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        })
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(emit(&[a, b], data, a.shape().to_vec(), || {
        Box::new(|g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        })
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (ad, bd) = (a.data.clone(), b.data.clone());
    Ok(emit(&[a, b], data, a.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bd.iter()).map(|(&gv, &y)| gv * y).collect()),
                needs[1].then(|| g.iter().zip(ad.iter()).map(|(&gv, &x)| gv * x).collect()),
            ]
        })
    }))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    let data = x.data().iter().map(|&v| v * c).collect();
    emit(&[x], data, x.shape().to_vec(), move || {
        Box::new(move |g, needs| vec![needs[0].then(|| g.iter().map(|&v| v * c).collect())])
    })
}

/// `x + b` broadcasting `b` over the leading dimensions (`b.shape == [d]`,
/// `x.shape` ends in `d`).
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::Dim("add_bias: 0-d input".into()))?;
    if b.shape() != [d] {
        return Err(Error::Dim(format!(
            "add_bias: bias shape {:?} does not match last dim {d}",
            b.shape()
        )));
    }
    let bd = b.data.clone();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % d])
        .collect();
    Ok(emit(&[x, b], data, x.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| {
                let mut acc = vec![T::ZERO; d];
                for (i, &v) in g.iter().enumerate() {
                    acc[i % d] += v;
                }
                acc
            });
            vec![gx, gb]
        })
    }))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.maxs(T::ZERO)).collect();
    let xd = x.data.clone();
    emit(&[x], data, x.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gv, &v)| if v > T::ZERO { gv } else { T::ZERO })
                    .collect()
            })]
        })
    })
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let xd = x.data.clone();
    emit(&[x], data, x.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * (s * (T::ONE + v * (T::ONE - s)))
                    })
                    .collect()
            })]
        })
    })
}

// tanh-form gelu
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
    let half = T::from_f64(0.5);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let u = c * (v + a * v * v * v);
            half * v * (T::ONE + u.tanh())
        })
        .collect();
    let xd = x.data.clone();
    emit(&[x], data, x.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                g.iter()
                    .zip(xd.iter())
                    .map(|(&gv, &v)| {
                        let three = T::from_f64(3.0);
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (T::ONE + three * a * v * v);
                        gv * (half * (T::ONE + t) + half * v * (T::ONE - t * t) * du)
                    })
                    .collect()
            })]
        })
    })
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    let n = x.numel();
    emit(&[x], vec![acc], vec![], move || {
        Box::new(move |g, needs| vec![needs[0].then(|| vec![g[0]; n])])
    })
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::from_f64(1.0 / n as f64);
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    emit(&[x], vec![acc * inv], vec![], move || {
        Box::new(move |g, needs| vec![needs[0].then(|| vec![g[0] * inv; n])])
    })
}

/// Population variance over all elements.
pub fn var_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::from_f64(1.0 / n as f64);
    let mut mean = T::ZERO;
    for &v in x.data() {
        mean += v;
    }
    mean = mean * inv;
    let mut var = T::ZERO;
    for &v in x.data() {
        let d = v - mean;
        var += d * d;
    }
    var = var * inv;
    let xd = x.data.clone();
    emit(&[x], vec![var], vec![], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let two = T::from_f64(2.0);
                xd.iter().map(|&v| g[0] * two * (v - mean) * inv).collect()
            })]
        })
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (&a.shape()[..], &b.shape()[..]) else {
        return Err(Error::Dim(format!(
            "matmul: expected 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::Dim(format!(
            "matmul: inner extents differ ({k} vs {k2})"
        )));
    }
    let (ad, bd) = (a.data.clone(), b.data.clone());
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(emit(&[a, b], out, vec![m, n], move || {
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                // dA = dC * B^T
                let mut da = vec![T::ZERO; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::ZERO;
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &bd[p * n..(p + 1) * n];
                        for (&gv, &bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        da[i * k + p] = acc;
                    }
                }
                da
            });
            let gb = needs[1].then(|| {
                // dB = A^T * dC
                let mut db = vec![T::ZERO; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                db
            });
            vec![ga, gb]
        })
    }))
}

pub fn transpose2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = x.shape() else {
        return Err(Error::Dim(format!(
            "transpose2: expected 2-d input, got {:?}",
            x.shape()
        )));
    };
    let xd = x.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Ok(emit(&[x], out, vec![n, m], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::ZERO; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                gx
            })]
        })
    }))
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Dim(format!(
            "reshape: {:?} -> {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    let data = x.data().to_vec();
    Ok(emit(&[x], data, shape.to_vec(), || {
        Box::new(|g, needs| vec![needs[0].then(|| g.to_vec())])
    }))
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::Dim(format!(
            "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
            start + len,
            shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * alen * inner;
        out.extend_from_slice(&xd[base + start * inner..base + (start + len) * inner]);
    }
    let total = x.numel();
    Ok(emit(&[x], out, out_shape, move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::ZERO; total];
                for o in 0..outer {
                    let base = o * alen * inner;
                    let gbase = o * len * inner;
                    gx[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&g[gbase..gbase + len * inner]);
                }
                gx
            })]
        })
    }))
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Dim("concat: empty input list".into()))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(Error::Dim(format!("concat: axis {axis} out of range")));
    }
    let mut axis_total = 0;
    for x in xs {
        let s = x.shape();
        if s.len() != shape.len()
            || s.iter()
                .zip(shape)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::Dim(format!(
                "concat: incompatible shapes {:?} vs {:?}",
                s, shape
            )));
        }
        axis_total += s[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = axis_total;
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for x in xs {
            let alen = x.shape()[axis];
            let xd = x.data();
            out.extend_from_slice(&xd[o * alen * inner..(o + 1) * alen * inner]);
        }
    }
    let alens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    Ok(emit(xs, out, out_shape, move || {
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = alens
                .iter()
                .zip(needs)
                .map(|(&alen, &need)| need.then(|| vec![T::ZERO; outer * alen * inner]))
                .collect();
            for o in 0..outer {
                let mut off = o * inner * alens.iter().sum::<usize>();
                for (gi, &alen) in alens.iter().enumerate() {
                    if let Some(gx) = &mut grads[gi] {
                        gx[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g[off..off + alen * inner]);
                    }
                    off += alen * inner;
                }
            }
            grads
        })
    }))
}

/// Numerically stabilized softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap_or(&1).max(&1);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for (row_out, row_in) in out.chunks_mut(n).zip(xd.chunks(n)) {
        let mut mx = row_in[0];
        for &v in row_in {
            mx = mx.maxs(v);
        }
        let mut denom = T::ZERO;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - mx).exp();
            denom += *o;
        }
        for o in row_out.iter_mut() {
            *o = *o / denom;
        }
    }
    let yd = std::rc::Rc::new(out.clone());
    emit(&[x], out, x.shape().to_vec(), move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::ZERO; g.len()];
                for ((grow, yrow), gxrow) in
                    g.chunks(n).zip(yd.chunks(n)).zip(gx.chunks_mut(n))
                {
                    let mut dot = T::ZERO;
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for ((gx_v, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *gx_v = yv * (gv - dot);
                    }
                }
                gx
            })]
        })
    })
}

/// Layer normalization over the last axis with optional affine parameters.
/// The affine-free form (`gamma`/`beta` = `None`) is what target features
/// are normalized with.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dim("layer_norm: 0-d input".into()))?;
    if d == 0 {
        return Err(Error::Dim("layer_norm: empty last axis".into()));
    }
    for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
        if let Some(p) = p {
            if p.shape() != [d] {
                return Err(Error::Dim(format!(
                    "layer_norm: {name} shape {:?} != [{d}]",
                    p.shape()
                )));
            }
        }
    }
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let xd = x.data();
    let rows = xd.len() / d;
    let mut normed = vec![T::ZERO; xd.len()];
    let mut inv_sigma = vec![T::ZERO; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let is = T::ONE / (var + eps).sqrt();
        inv_sigma[r] = is;
        for (o, &v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    let mut out = normed.clone();
    if let Some(gm) = gamma {
        let gd = gm.data();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o * gd[i % d];
        }
    }
    if let Some(bt) = beta {
        let bd = bt.data();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + bd[i % d];
        }
    }
    let zero = Tensor::zeros(&[d]);
    let (gref, bref) = (gamma.unwrap_or(&zero), beta.unwrap_or(&zero));
    let gamma_data = gamma.map(|g| g.data.clone());
    let normed = std::rc::Rc::new(normed);
    let shape = x.shape().to_vec();
    Ok(emit(&[x, gref, bref], out, shape, move || {
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::ZERO; rows * d];
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let yrow = &normed[r * d..(r + 1) * d];
                    // upstream through the affine part
                    let dy: Vec<T> = match &gamma_data {
                        Some(gm) => grow
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * gm[i % d])
                            .collect(),
                        None => grow.to_vec(),
                    };
                    let mut mean_dy = T::ZERO;
                    let mut mean_dy_y = T::ZERO;
                    for (&dv, &yv) in dy.iter().zip(yrow) {
                        mean_dy += dv;
                        mean_dy_y += dv * yv;
                    }
                    mean_dy = mean_dy * inv_d;
                    mean_dy_y = mean_dy_y * inv_d;
                    let is = inv_sigma[r];
                    for ((gx_v, &dv), &yv) in gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&dy)
                        .zip(yrow)
                    {
                        *gx_v = is * (dv - mean_dy - yv * mean_dy_y);
                    }
                }
                gx
            });
            let gg = needs[1].then(|| {
                let mut gg = vec![T::ZERO; d];
                for (i, &gv) in g.iter().enumerate() {
                    gg[i % d] += gv * normed[i];
                }
                gg
            });
            let gb = needs[2].then(|| {
                let mut gb = vec![T::ZERO; d];
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % d] += gv;
                }
                gb
            });
            vec![gx, gg, gb]
        })
    }))
}

/// Smooth-L1 (Huber-style) loss, mean-reduced over all elements. The target
/// is gradient-detached: no gradient ever flows into it.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    check_same_shape(pred, target, "smooth_l1")?;
    if beta <= 0.0 {
        return Err(Error::Contract(format!("smooth_l1: beta must be > 0, got {beta}")));
    }
    let b = T::from_f64(beta);
    let half = T::from_f64(0.5);
    let n = pred.numel();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut acc = T::ZERO;
    let residual: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| p - t)
        .collect();
    for &r in &residual {
        let a = r.abs();
        acc += if a < b { half * r * r / b } else { a - half * b };
    }
    let residual = std::rc::Rc::new(residual);
    Ok(emit(&[pred], vec![acc * inv_n], vec![], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                residual
                    .iter()
                    .map(|&r| {
                        let d = if r.abs() < b {
                            r / b
                        } else if r > T::ZERO {
                            T::ONE
                        } else {
                            -T::ONE
                        };
                        g[0] * d * inv_n
                    })
                    .collect()
            })]
        })
    }))
}

/// Gather rows of a `[N, d]` tensor; indices may repeat.
pub fn index_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let &[n, d] = x.shape() else {
        return Err(Error::Dim(format!(
            "index_rows: expected 2-d input, got {:?}",
            x.shape()
        )));
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Dim(format!("index_rows: index {bad} out of range 0..{n}")));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    let idx = indices.to_vec();
    Ok(emit(&[x], out, vec![indices.len(), d], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::ZERO; n * d];
                for (k, &i) in idx.iter().enumerate() {
                    for (gv, &gu) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *gv += gu;
                    }
                }
                gx
            })]
        })
    }))
}

/// Mean over the row axis of a `[N, d]` tensor, yielding `[d]`.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, d] = x.shape() else {
        return Err(Error::Dim(format!(
            "mean_rows: expected 2-d input, got {:?}",
            x.shape()
        )));
    };
    if n == 0 {
        return Err(Error::Dim("mean_rows: empty input".into()));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let xd = x.data();
    let mut out = vec![T::ZERO; d];
    for row in xd.chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o = *o * inv_n;
    }
    Ok(emit(&[x], out, vec![d], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    gx.extend(g.iter().map(|&v| v * inv_n));
                }
                gx
            })]
        })
    }))
}

/// Mean cross-entropy between `[N, C]` logits and integer labels, with the
/// usual stabilized log-softmax. Gradient is (softmax − one-hot) / N.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::Dim(format!(
            "cross_entropy: expected [N, C] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("cross_entropy: label {bad} out of range 0..{c}")));
    }
    let xd = logits.data();
    let mut probs = vec![T::ZERO; n * c];
    let mut loss = 0.0f64;
    for (i, (row, prow)) in xd.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
        let mut mx = row[0];
        for &v in row {
            mx = mx.maxs(v);
        }
        let mut denom = T::ZERO;
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - mx).exp();
            denom += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / denom;
        }
        loss -= prow[labels[i]].to_f64().ln();
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    let probs_rc = std::rc::Rc::new(probs);
    Ok(emit(&[logits], vec![T::from_f64(loss)], vec![], move || {
        Box::new(move |g, needs| {
            vec![needs[0].then(|| {
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut gx = Vec::with_capacity(n * c);
                for (i, prow) in probs_rc.chunks(c).enumerate() {
                    for (j, &p) in prow.iter().enumerate() {
                        let delta = if j == labels[i] { T::ONE } else { T::ZERO };
                        gx.push(g[0] * (p - delta) * inv_n);
                    }
                }
                gx
            })]
        })
    }))
}
