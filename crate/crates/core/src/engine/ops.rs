//! Forward kernels and their adjoints for everything except convolution.
//!
//! These are plain functions over [`Tensor`]s; [`Graph`](super::Graph)
//! records them and dispatches the adjoints during the backward sweep.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            "rank",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Channel shuffle

/// Source channel feeding output channel `j·g + i` is `i·(C/g) + j`.
pub fn shuffle_source(channels: usize, groups: usize, out_channel: usize) -> usize {
    let per = channels / groups;
    let (j, i) = (out_channel / groups, out_channel % groups);
    i * per + j
}

fn permute_channels<T: Scalar>(x: &Tensor<T>, src_of: impl Fn(usize) -> usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4("channel_shuffle").expect("checked rank");
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for oc in 0..c {
            let src = src_of(oc);
            out.extend_from_slice(&x.data()[(b * c + src) * plane..][..plane]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("channel_shuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "channel_shuffle: groups {groups} must divide channels {c}"
        )));
    }
    Ok(permute_channels(x, |oc| shuffle_source(c, groups, oc)))
}

/// Inverse permutation of [`channel_shuffle`].
pub fn channel_unshuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Tensor<T> {
    let c = x.shape()[1];
    let mut dest_of = vec![0; c];
    for oc in 0..c {
        dest_of[shuffle_source(c, groups, oc)] = oc;
    }
    permute_channels(x, |ic| dest_of[ic])
}

// ---------------------------------------------------------------------------
// Slicing and concatenation

pub fn narrow<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "narrow")?;
    let (outer, full, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > full {
        return Err(Error::dim(
            "narrow",
            "slice",
            format!("range {start}..{} exceeds extent {full}", start + len),
        ));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`narrow`]: embeds `g` into zeros of `full_shape`.
pub fn narrow_backward<T: Scalar>(
    g: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let (outer, full, inner) = split_axis(full_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        out[(o * full + start) * inner..][..len * inner]
            .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), out)
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    check_axis(first.shape(), axis, "concat")?;
    for p in &parts[1..] {
        if p.rank() != first.rank() {
            return Err(Error::dim(
                "concat",
                "rank",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        for (d, (&a, &b)) in p.shape().iter().zip(first.shape()).enumerate() {
            if d != axis && a != b {
                let name = ["batch", "channel", "height", "width"]
                    .get(d)
                    .copied()
                    .unwrap_or("inner");
                return Err(Error::dim(
                    "concat",
                    name,
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..][..len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// Broadcast binary ops: `b` broadcasts into `a` (same rank, extents equal or 1).

pub fn check_broadcast(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(
            op,
            "rank",
            format!("cannot broadcast {b:?} into {a:?}"),
        ));
    }
    for (d, (&x, &y)) in a.iter().zip(b).enumerate() {
        if y != x && y != 1 {
            let name = if a.len() == 4 {
                ["batch", "channel", "height", "width"][d]
            } else {
                "inner"
            };
            return Err(Error::dim(
                op,
                name,
                format!("cannot broadcast {b:?} into {a:?}"),
            ));
        }
    }
    Ok(())
}

/// Offsets into `b` for every element of `a` under broadcasting.
fn broadcast_index(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len();
    let mut bstride = vec![0; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        bstride[d] = if b[d] == 1 { 0 } else { s };
        s *= b[d];
    }
    let numel: usize = a.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(idx.iter().zip(&bstride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_broadcast(a.shape(), b.shape(), op)?;
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        broadcast_index(a.shape(), b.shape())
            .into_iter()
            .zip(a.data())
            .map(|(j, &x)| f(x, b.data()[j]))
            .collect()
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Sums `g` (shaped like `a`) down to the broadcast shape `b_shape`.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    if g.shape() == b_shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); b_shape.iter().product()];
    for (j, &v) in broadcast_index(g.shape(), b_shape)
        .into_iter()
        .zip(g.data())
    {
        out[j] += v;
    }
    Tensor::from_parts(b_shape.to_vec(), out)
}

/// Gathers `b` (broadcast) at every position of `a_shape`.
pub fn expand<T: Scalar>(b: &Tensor<T>, a_shape: &[usize]) -> Tensor<T> {
    if b.shape() == a_shape {
        return b.clone();
    }
    let data = broadcast_index(a_shape, b.shape())
        .into_iter()
        .map(|j| b.data()[j])
        .collect();
    Tensor::from_parts(a_shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Activations

pub const GELU_COEFF: f64 = 0.044715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(GELU_COEFF) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let t = (c * (x + T::of(GELU_COEFF) * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0 * GELU_COEFF) * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Normalization

pub struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

/// Per-channel statistics over N×H×W.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    check_affine(gamma, beta, c, "batch_norm")?;
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += xd[(b * c + ch) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &xd[(b * c + ch) * plane..][..plane] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::of(eps)).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BatchNormSaved {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = dy.shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::of((n * plane) as f64);
    let (gd, xh) = (dy.data(), saved.xhat.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma.data()[ch] * saved.inv_std[ch] / m;
            for i in off..off + plane {
                dx[i] = k * (m * gd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

fn check_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    c: usize,
    op: &'static str,
) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            op,
            "channel",
            format!(
                "affine shapes {:?}/{:?} != [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Per-channel scale and shift equivalent to inference-mode batch norm.
pub fn batch_norm_eval_coeffs<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(gamma.numel());
    let mut shift = Vec::with_capacity(gamma.numel());
    for c in 0..gamma.numel() {
        let is = T::one() / (var.data()[c] + T::of(eps)).sqrt();
        scale.push(gamma.data()[c] * is);
        shift.push(beta.data()[c] - gamma.data()[c] * mean.data()[c] * is);
    }
    (scale, shift)
}

pub struct LayerNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes every row of the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let d = *x.shape().last().expect("rank >= 1");
    check_affine(gamma, beta, d, "layer_norm")?;
    let rows = x.numel() / d;
    let dt = T::of(d as f64);
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
        let is = T::one() / (var + T::of(eps)).sqrt();
        inv_std.push(is);
        for k in 0..d {
            let xh = (row[k] - mu) * is;
            xhat[r * d + k] = xh;
            y[r * d + k] = gamma.data()[k] * xh + beta.data()[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        LayerNormSaved {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
        },
    ))
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &LayerNormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let rows = dy.numel() / d;
    let dt = T::of(d as f64);
    let (gd, xh) = (dy.data(), saved.xhat.data());
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..rows {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for k in 0..d {
            let i = r * d + k;
            dgamma[k] += gd[i] * xh[i];
            dbeta[k] += gd[i];
            let dxh = gd[i] * gamma.data()[k];
            s1 += dxh;
            s2 += dxh * xh[i];
        }
        let is = saved.inv_std[r];
        for k in 0..d {
            let i = r * d + k;
            let dxh = gd[i] * gamma.data()[k];
            dx[i] = is / dt * (dt * dxh - s1 - xh[i] * s2);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

// ---------------------------------------------------------------------------
// Matrix products

/// `(batch_a, batch_b, m, k, n)` for a product with optional leading batch axes.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let (ba, m, k) = match *a {
        [m, k] => (1, m, k),
        [bt, m, k] => (bt, m, k),
        _ => {
            return Err(Error::dim(
                "matmul",
                "rank",
                format!("lhs must be rank 2 or 3, got {a:?}"),
            ))
        }
    };
    let (bb, k2, n) = match *b {
        [k, n] => (1, k, n),
        [bt, k, n] => (bt, k, n),
        _ => {
            return Err(Error::dim(
                "matmul",
                "rank",
                format!("rhs must be rank 2 or 3, got {b:?}"),
            ))
        }
    };
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            "inner",
            format!("{a:?} × {b:?}: inner extents {k} != {k2}"),
        ));
    }
    if ba != bb && ba != 1 && bb != 1 {
        return Err(Error::dim("matmul", "batch", format!("{a:?} × {b:?}")));
    }
    if b.len() == 3 && a.len() == 2 {
        return Err(Error::dim(
            "matmul",
            "batch",
            "rank-2 lhs with batched rhs is not supported".to_string(),
        ));
    }
    Ok((ba, bb, m, k, n))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, bb, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let batch = ba.max(bb);
    let mut out = vec![T::zero(); batch * m * n];
    for t in 0..batch {
        let ad = &a.data()[if ba == 1 { 0 } else { t * m * k }..][..m * k];
        let bd = &b.data()[if bb == 1 { 0 } else { t * k * n }..][..k * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            ad,
            k,
            1,
            bd,
            n,
            1,
            T::zero(),
            &mut out[t * m * n..][..m * n],
            n,
            1,
        );
    }
    let shape = if a.rank() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Returns (dA, dB); a broadcast operand receives the batch-summed gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ba, bb, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let batch = ba.max(bb);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for t in 0..batch {
        let gd = &g.data()[t * m * n..][..m * n];
        let aoff = if ba == 1 { 0 } else { t * m * k };
        let boff = if bb == 1 { 0 } else { t * k * n };
        let ad = &a.data()[aoff..][..m * k];
        let bd = &b.data()[boff..][..k * n];
        // dA = G · Bᵀ
        T::gemm(
            m,
            n,
            k,
            T::one(),
            gd,
            n,
            1,
            bd,
            1,
            n,
            T::one(),
            &mut da[aoff..][..m * k],
            k,
            1,
        );
        // dB = Aᵀ · G
        T::gemm(
            k,
            m,
            n,
            T::one(),
            ad,
            1,
            k,
            gd,
            n,
            1,
            T::one(),
            &mut db[boff..][..k * n],
            n,
            1,
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, r, c) = match *x.shape() {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => {
            return Err(Error::dim(
                "transpose",
                "rank",
                format!("expected rank 2 or 3, got {:?}", x.shape()),
            ))
        }
    };
    let mut out = vec![T::zero(); x.numel()];
    for t in 0..batch {
        let src = &x.data()[t * r * c..][..r * c];
        let dst = &mut out[t * r * c..][..r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape.swap(rank - 1, rank - 2);
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// Pooling and resampling

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], data))
}

pub fn global_avg_pool_backward<T: Scalar>(g: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(plane as f64);
    let mut out = Vec::with_capacity(g.numel() * plane);
    for &v in g.data() {
        out.extend(std::iter::repeat(v * inv).take(plane));
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

fn pool_dims(x: &[usize], k: usize, stride: usize, op: &'static str) -> Result<(usize, usize)> {
    let (h, w) = (x[2], x[3]);
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::dim(
            op,
            "height",
            format!("window {k} does not fit {x:?}"),
        ));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("avg_pool2d")?;
    let (oh, ow) = pool_dims(x.shape(), k, stride, "avg_pool2d")?;
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        s += src[(oy * stride + i) * w + ox * stride + j];
                    }
                }
                out[(p * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2d_backward<T: Scalar>(
    g: &Tensor<T>,
    input_shape: &[usize],
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for p in 0..input_shape[0] * input_shape[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g.data()[(p * oh + oy) * ow + ox] * inv;
                for i in 0..k {
                    for j in 0..k {
                        out[p * h * w + (oy * stride + i) * w + ox * stride + j] += v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Max pooling; also returns the flat input index of each winner (first
/// maximum in row-major window order).
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("max_pool2d")?;
    let (oh, ow) = pool_dims(x.shape(), k, stride, "max_pool2d")?;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = x.data()[best];
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn scatter_to<T: Scalar>(g: &Tensor<T>, indices: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for (&i, &v) in indices.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Source coordinate pair and blend weight for half-pixel-center resampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(oh, ow)` with half-pixel centers (align-corners off).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_bilinear")?;
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                dst[oy * ow + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn resize_bilinear_backward<T: Scalar>(g: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for p in 0..input_shape[0] * input_shape[1] {
        let src = &g.data()[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += hy * hx * v;
                dst[y0 * w + x1] += hy * lx * v;
                dst[y1 * w + x0] += ly * hx * v;
                dst[y1 * w + x1] += ly * lx * v;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(p * oh + oy) * ow + ox] = x.data()[(p * h + oy / factor) * w + ox / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn upsample_nearest_backward<T: Scalar>(
    g: &Tensor<T>,
    input_shape: &[usize],
    factor: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for p in 0..input_shape[0] * input_shape[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(p * h + oy / factor) * w + ox / factor] += g.data()[(p * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Reductions and softmax

pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "sum_axis")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..][..inner];
            for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

/// Maximum along `axis` (kept as extent 1) and the flat index of each winner.
pub fn max_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    check_axis(x.shape(), axis, "max_axis")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = o * len * inner + i;
            for l in 1..len {
                let idx = (o * len + l) * inner + i;
                if x.data()[idx] > x.data()[best] {
                    best = idx;
                }
            }
            out[o * inner + i] = x.data()[best];
            arg[o * inner + i] = best;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok((Tensor::from_parts(shape, out), arg))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "softmax")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len)
                .map(|l| x.data()[at(l)])
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for l in 0..len {
                let e = (x.data()[at(l)] - m).exp();
                out[at(l)] = e;
                s += e;
            }
            for l in 0..len {
                out[at(l)] /= s;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let dot: T = (0..len).map(|l| y.data()[at(l)] * g.data()[at(l)]).sum();
            for l in 0..len {
                out[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Focused map: φ(x) = (‖r‖ / ‖r^p‖)·r^p with r = ReLU(x), row-wise over the last axis.
//
// The map is positively homogeneous of degree one, so rows are rescaled by
// their maximum before exponentiation; this keeps r^p away from underflow and
// overflow for any p. All-nonpositive rows map to zero rows.

pub fn focused_map<T: Scalar>(x: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
    if p < 1.0 {
        return Err(Error::Config(format!(
            "focusing power must be >= 1, got {p}"
        )));
    }
    let d = *x.shape().last().expect("rank >= 1");
    let pt = T::of(p);
    let mut out = vec![T::zero(); x.numel()];
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let m = row.iter().copied().fold(T::zero(), T::max);
        if m <= T::zero() {
            continue;
        }
        let mut s = T::zero();
        let mut t = T::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            let u = v.max(T::zero()) / m;
            let q = u.powf(pt);
            s += u * u;
            t += q * q;
            *o = q;
        }
        let k = m * s.sqrt() / t.sqrt();
        dst.iter_mut().for_each(|o| *o = *o * k);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn focused_map_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    p: f64,
) -> Tensor<T> {
    let d = *x.shape().last().expect("rank >= 1");
    let pt = T::of(p);
    let mut out = vec![T::zero(); x.numel()];
    for (((row, yrow), grow), dst) in x
        .data()
        .chunks(d)
        .zip(y.data().chunks(d))
        .zip(g.data().chunks(d))
        .zip(out.chunks_mut(d))
    {
        let m = row.iter().copied().fold(T::zero(), T::max);
        if m <= T::zero() {
            continue;
        }
        let (mut s2, mut t2) = (T::zero(), T::zero());
        for &v in row {
            let u = v.max(T::zero()) / m;
            s2 += u * u;
            t2 += u.powf(pt + pt);
        }
        let (s, t) = (s2.sqrt(), t2.sqrt());
        let gy: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        for k in 0..d {
            if row[k] <= T::zero() {
                continue;
            }
            let u = row[k] / m;
            let term_s = gy * u / (m * s2);
            let term_t = gy * pt * u.powf(pt + pt - T::one()) / (m * t2);
            let term_q = s / t * grow[k] * pt * u.powf(pt - T::one());
            dst[k] = term_s - term_t + term_q;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Guarded division: a / b where b > 0, zero where b == 0. `b` broadcasts into `a`.

pub fn div_guarded<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, "div_guarded", |x, y| {
        if y == T::zero() {
            T::zero()
        } else {
            x / y
        }
    })
}

pub fn div_guarded_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let bx = expand(b, a.shape());
    let mut da = vec![T::zero(); a.numel()];
    let mut dbx = vec![T::zero(); a.numel()];
    for i in 0..a.numel() {
        let bv = bx.data()[i];
        if bv != T::zero() {
            da[i] = g.data()[i] / bv;
            dbx[i] = -g.data()[i] * a.data()[i] / (bv * bv);
        }
    }
    let dbx = Tensor::from_parts(a.shape().to_vec(), dbx);
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        reduce_to(&dbx, b.shape()),
    )
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Mean over non-ignored pixels of −log softmax(logits)[label].
/// Returns the loss and the gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    ignore_index: Option<u32>,
) -> Result<(T, Tensor<T>)> {
    let (n, k, h, w) = logits.dims4("cross_entropy")?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::dim(
            "cross_entropy",
            "height",
            format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        ));
    }
    let ld = logits.data();
    let mut grad = vec![T::zero(); logits.numel()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..n {
        for px in 0..plane {
            let label = labels[b * plane + px];
            if Some(label) == ignore_index {
                continue;
            }
            if label as usize >= k {
                return Err(Error::Data(format!(
                    "label {label} out of range 0..{k} at pixel (n={b}, y={}, x={})",
                    px / w,
                    px % w
                )));
            }
            let at = |c: usize| (b * k + c) * plane + px;
            let m = (0..k).map(|c| ld[at(c)]).fold(T::neg_infinity(), T::max);
            let s: T = (0..k).map(|c| (ld[at(c)] - m).exp()).sum();
            let lse = m + s.ln();
            total += (lse - ld[at(label as usize)]).as_f64();
            for c in 0..k {
                grad[at(c)] = (ld[at(c)] - lse).exp();
            }
            grad[at(label as usize)] -= T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("cross_entropy: every pixel is ignored".into()));
    }
    let inv = T::one() / T::of(count as f64);
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((
        T::of(total / count as f64),
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn channel_order(c: usize, g: usize) -> Vec<usize> {
        let x = Tensor::<f64>::from_fn(&[1, c, 1, 1], |i| i as f64);
        channel_shuffle(&x, g)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect()
    }

    #[test]
    fn shuffle_orders() {
        assert_eq!(channel_order(4, 1), vec![0, 1, 2, 3]);
        assert_eq!(channel_order(4, 2), vec![0, 2, 1, 3]);
        // Brute-force reshape (g, C/g) → transpose → flatten.
        let (c, g) = (6, 3);
        let mut expected = Vec::new();
        for j in 0..c / g {
            for i in 0..g {
                expected.push(i * (c / g) + j);
            }
        }
        assert_eq!(expected, vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(channel_order(c, g), expected);
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        assert!(matches!(channel_shuffle(&x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert_eq!(concat(&[&a, &b], 1).unwrap().shape(), &[1, 5, 3, 3]);
        let c = Tensor::<f64>::zeros(&[1, 3, 2, 3]);
        assert!(matches!(
            concat(&[&a, &c], 1),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }

    #[test]
    fn matmul_hand_value() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let c = t(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            matmul(&a, &c),
            Err(Error::Dimension { axis: "inner", .. })
        ));
    }

    #[test]
    fn layer_norm_hand_value() {
        let x = t(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let (y, _) = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - expected[i % 4]).abs() < 1e-4, "{v}");
        }
        let c = Tensor::full(&[1, 1, 4], 3.0);
        assert!(layer_norm(&c, &g, &b, 1e-5)
            .unwrap()
            .0
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_zero_variance_is_finite() {
        let x = Tensor::<f64>::full(&[2, 3, 2, 2], 5.0);
        let (y, _) =
            batch_norm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_half_pixel_table() {
        let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = resize_bilinear(&x, 4, 4).unwrap();
        // Direct evaluation of src = max(0, (o + 0.5)/2 − 0.5), clamped neighbour, linear blend.
        let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0).min(1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let expected = 2.0 * coord(oy) + coord(ox);
                assert!((y.get(&[0, 0, oy, ox]) - expected).abs() < 1e-12);
            }
        }
        assert_eq!(y.get(&[0, 0, 1, 2]), 0.5 + 0.75);
        let c = resize_bilinear(&Tensor::<f64>::full(&[1, 2, 3, 3], 4.0), 6, 6).unwrap();
        assert!(c.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_closed_form() {
        let x = t(&[1, 2], &[0.0, 3f64.ln()]);
        let y = softmax(&x, 1).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12 && (y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn focused_map_hand_values() {
        let y = focused_map(&t(&[1, 2], &[2.0, 1.0]), 3.0).unwrap();
        let k = (5.0f64 / 65.0).sqrt();
        assert!((y.data()[0] - 8.0 * k).abs() < 1e-12);
        assert!((y.data()[1] - k).abs() < 1e-12);
        assert!((y.data()[0] - 2.2188).abs() < 1e-4 && (y.data()[1] - 0.2774).abs() < 1e-4);
        assert_eq!(
            focused_map(&t(&[1, 2], &[1.0, 0.0]), 3.0).unwrap().data(),
            &[1.0, 0.0]
        );
        let ones = focused_map(&t(&[1, 2], &[1.0, 1.0]), 3.0).unwrap();
        assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(
            focused_map(&t(&[1, 3], &[-1.0, 0.0, -2.0]), 3.0)
                .unwrap()
                .data(),
            &[0.0; 3]
        );
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = cross_entropy(&t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]), &[1], None).unwrap();
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);
        let (l, _) = cross_entropy(
            &Tensor::<f64>::zeros(&[2, 5, 2, 2]),
            &[0, 1, 2, 3, 4, 0, 1, 2],
            None,
        )
        .unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let err = cross_entropy(&Tensor::<f64>::zeros(&[1, 2, 1, 2]), &[0, 7], None).unwrap_err();
        assert!(err.to_string().contains("x=1"), "{err}");
        let (l, _) =
            cross_entropy(&Tensor::<f64>::zeros(&[1, 2, 1, 2]), &[0, 255], Some(255)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn broadcast_rules() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]);
        let y = binary(&a, &b, "mul", |x, y| x * y).unwrap();
        assert_eq!(y.get(&[1, 2, 1, 1]), a.get(&[1, 2, 1, 1]) * 3.0);
        let bad = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            binary(&a, &bad, "add", |x, y| x + y),
            Err(Error::Dimension {
                axis: "channel",
                ..
            })
        ));
        let r = reduce_to(&Tensor::full(&[2, 3, 2, 2], 1.0), &[1, 3, 1, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
