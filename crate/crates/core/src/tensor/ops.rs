//! Pointwise, pooling, reshaping, normalization and loss primitives with
//! their backward passes. Convolution lives in the sibling `conv` module.

use super::{counter, invalid, Result, Scalar, Shape, Tensor, TensorError};

pub use super::conv::{pad, pad_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// Only complete windows; output extent `(H - k) / stride + 1`.
    #[default]
    Floor,
    /// Windows start at every multiple of the stride below the extent and are
    /// clipped at the border; output extent `ceil(H / stride)`.
    Cover,
}

fn pool_extent(len: usize, k: usize, stride: usize, mode: PoolMode) -> usize {
    match mode {
        PoolMode::Floor => (len - k) / stride + 1,
        PoolMode::Cover => len.div_ceil(stride),
    }
}

pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    max_pool2d_with_indices(x, k, stride, PoolMode::Floor).map(|(t, _)| t)
}

/// Max pooling that also returns, per output element, the flat input index
/// that won (first maximum in scan order).
pub fn max_pool2d_with_indices<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool2d";
    if k == 0 || stride == 0 {
        return Err(invalid(OP, "kernel and stride must be positive"));
    }
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(invalid(OP, "empty spatial extent"));
    }
    if mode == PoolMode::Floor && (k > s.h || k > s.w) {
        return Err(invalid(
            OP,
            format!("window {k} larger than input {}x{}", s.h, s.w),
        ));
    }
    let (ho, wo) = (pool_extent(s.h, k, stride, mode), pool_extent(s.w, k, stride, mode));
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let mut arg = vec![0usize; out_shape.numel()];
    let xd = x.data();
    let mut idx = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oh in 0..ho {
            let h0 = oh * stride;
            let h1 = (h0 + k).min(s.h);
            for ow in 0..wo {
                let w0 = ow * stride;
                let w1 = (w0 + k).min(s.w);
                let mut best = base + h0 * s.w + w0;
                for h in h0..h1 {
                    for w in w0..w1 {
                        let i = base + h * s.w + w;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.data_mut()[idx] = xd[best];
                arg[idx] = best;
                idx += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward<T: Scalar>(input: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(invalid("global_avg_pool", "empty spatial extent"));
    }
    let denom = T::from_usize(s.plane()).unwrap();
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let denom = T::from_usize(input.plane()).unwrap();
    let mut g = Tensor::zeros(input);
    for (plane, chunk) in g.data_mut().chunks_mut(input.plane()).enumerate() {
        let v = grad_out.data()[plane] / denom;
        chunk.iter_mut().for_each(|x| *x = v);
    }
    g
}

fn fc_check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<(usize, usize)> {
    let d = x.shape().c * x.shape().plane();
    let ws = weight.shape();
    let d_in = ws.c * ws.plane();
    if d_in != d {
        return Err(TensorError::ShapeMismatch {
            op: "fully_connected",
            dim: "input features",
            expected: d_in,
            actual: d,
        });
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                dim: "bias length",
                expected: ws.n,
                actual: b.numel(),
            });
        }
    }
    Ok((d, ws.n))
}

/// Affine map over the flattened (C, H, W) features of each sample. The
/// weight is laid out as (D_out, D, 1, 1).
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (d, d_out) = fc_check(x, weight, bias)?;
    let n = x.shape().n;
    let mut out = Vec::with_capacity(n * d_out);
    for row in x.data().chunks(d) {
        for o in 0..d_out {
            let wrow = &weight.data()[o * d..(o + 1) * d];
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            out.push(match bias {
                Some(b) => acc + b.data()[o],
                None => acc,
            });
        }
    }
    Tensor::from_vec(Shape::new(n, d_out, 1, 1), out)
}

/// [`fully_connected`] plus MAC counting.
pub fn fully_connected_direct<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (d, d_out) = fc_check(x, weight, bias)?;
    let out = fully_connected(x, weight, bias)?;
    counter::add((x.shape().n * d * d_out) as u64);
    Ok(out)
}

/// Returns (grad input, grad weight, grad bias).
pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d, d_out) = fc_check(x, weight, None)?;
    let n = x.shape().n;
    if grad_out.numel() != n * d_out {
        return Err(TensorError::ShapeMismatch {
            op: "fully_connected_backward",
            dim: "grad length",
            expected: n * d_out,
            actual: grad_out.numel(),
        });
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![T::zero(); d_out];
    for s in 0..n {
        let row = &x.data()[s * d..(s + 1) * d];
        let gxrow = &mut gx.data_mut()[s * d..(s + 1) * d];
        for o in 0..d_out {
            let g = grad_out.data()[s * d_out + o];
            gb[o] += g;
            let wrow = &weight.data()[o * d..(o + 1) * d];
            for (gxv, &wv) in gxrow.iter_mut().zip(wrow) {
                *gxv += g * wv;
            }
            for (gwv, &xv) in gw.data_mut()[o * d..(o + 1) * d].iter_mut().zip(row) {
                *gwv += g * xv;
            }
        }
    }
    Ok((gx, gw, Tensor::vector(gb)))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input was strictly positive; zero at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Takes the sigmoid *output*.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for (dim, x, y) in [("batch", sa.n, sb.n), ("channels", sa.c, sb.c), ("height", sa.h, sb.h), ("width", sa.w, sb.w)] {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                op,
                dim,
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

pub fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("elementwise_mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn elementwise_mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let ga = b.data().iter().zip(grad_out.data()).map(|(&y, &g)| y * g).collect();
    let gb = a.data().iter().zip(grad_out.data()).map(|(&x, &g)| x * g).collect();
    (
        Tensor::from_vec(a.shape(), ga).expect("same shape"),
        Tensor::from_vec(b.shape(), gb).expect("same shape"),
    )
}

/// Adds a per-channel bias.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if bias.len() != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "add_channel_bias",
            dim: "channels",
            expected: s.c,
            actual: bias.len(),
        });
    }
    let mut out = x.clone();
    out.clear_grad();
    for (plane, chunk) in out.data_mut().chunks_mut(s.plane().max(1)).enumerate() {
        let b = bias[plane % s.c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(out)
}

pub fn channel_sums<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    let s = grad.shape();
    let mut out = vec![T::zero(); s.c];
    for (plane, chunk) in grad.data().chunks(s.plane().max(1)).enumerate() {
        out[plane % s.c] += chunk.iter().copied().sum::<T>();
    }
    out
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(invalid("upsample_nearest", "factor must be positive"));
    }
    let s = x.shape();
    let (ho, wo) = (s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for h in 0..ho {
            let srow = &src[(h / factor) * s.w..(h / factor + 1) * s.w];
            for (w, d) in dst[h * wo..(h + 1) * wo].iter_mut().enumerate() {
                *d = srow[w / factor];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Scalar>(input: Shape, factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (ho, wo) = (input.h * factor, input.w * factor);
    let mut g = Tensor::zeros(input);
    for plane in 0..input.n * input.c {
        let src = &grad_out.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut g.data_mut()[plane * input.plane()..(plane + 1) * input.plane()];
        for h in 0..ho {
            for w in 0..wo {
                dst[(h / factor) * input.w + w / factor] += src[h * wo + w];
            }
        }
    }
    g
}

/// Center crop to (h, w); the offset is `(H - h) / 2` rounded down.
pub fn center_crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(invalid(
            "center_crop",
            format!("crop {h}x{w} larger than input {}x{}", s.h, s.w),
        ));
    }
    if h == s.h && w == s.w {
        let mut out = x.clone();
        out.clear_grad();
        return Ok(out);
    }
    let (oy, ox) = ((s.h - h) / 2, (s.w - w) / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for r in 0..h {
            dst[r * w..(r + 1) * w].copy_from_slice(&src[(r + oy) * s.w + ox..(r + oy) * s.w + ox + w]);
        }
    }
    Ok(out)
}

pub fn center_crop_backward<T: Scalar>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let go = grad_out.shape();
    let (oy, ox) = ((input.h - go.h) / 2, (input.w - go.w) / 2);
    let mut g = Tensor::zeros(input);
    for plane in 0..input.n * input.c {
        let src = &grad_out.data()[plane * go.plane()..(plane + 1) * go.plane()];
        let dst = &mut g.data_mut()[plane * input.plane()..(plane + 1) * input.plane()];
        for r in 0..go.h {
            dst[(r + oy) * input.w + ox..(r + oy) * input.w + ox + go.w]
                .copy_from_slice(&src[r * go.w..(r + 1) * go.w]);
        }
    }
    g
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = inputs.first().ok_or_else(|| invalid(OP, "no inputs"))?.shape();
    for t in &inputs[1..] {
        let s = t.shape();
        for (dim, a, b) in [("batch", first.n, s.n), ("height", first.h, s.h), ("width", first.w, s.w)] {
            if a != b {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim,
                    expected: a,
                    actual: b,
                });
            }
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let mut data = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for t in inputs {
            let per = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(Shape::new(first.n, c, first.h, first.w), data)
}

/// Stacks tensors of identical (C, H, W) along the batch axis.
pub fn concat_batch<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_batch";
    let first = inputs.first().ok_or_else(|| invalid(OP, "no inputs"))?.shape();
    let mut data = Vec::new();
    let mut n = 0;
    for t in inputs {
        let s = t.shape();
        if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
            return Err(invalid(OP, format!("shape {s} does not match {first}")));
        }
        n += s.n;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
}

/// Splits along channels into blocks of the given sizes (inverse of
/// [`concat_channels`]).
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    let total: usize = sizes.iter().sum();
    if total != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "split_channels",
            dim: "channels",
            expected: s.c,
            actual: total,
        });
    }
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&c| Vec::with_capacity(s.n * c * s.plane())).collect();
    for n in 0..s.n {
        let mut offset = n * s.c * s.plane();
        for (part, &c) in parts.iter_mut().zip(sizes) {
            let len = c * s.plane();
            part.extend_from_slice(&x.data()[offset..offset + len]);
            offset += len;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}

/// Cyclic shift: output pixel (h, w) takes input pixel (h - dy, w - dx)
/// modulo the extent.
pub fn roll<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let (hh, ww) = (s.h as isize, s.w as isize);
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data_mut()[plane * s.plane()..(plane + 1) * s.plane()];
        for h in 0..s.h {
            let sh = (h as isize - dy).rem_euclid(hh) as usize;
            for w in 0..s.w {
                let sw = (w as isize - dx).rem_euclid(ww) as usize;
                dst[h * s.w + w] = src[sh * s.w + sw];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization. In train mode the batch statistics normalize the
/// input and the running statistics move toward them by `momentum` (running
/// variance uses the unbiased estimate). In infer mode the running
/// statistics are used and left untouched.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    eps: T,
    momentum: T,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    const OP: &str = "batch_norm";
    let s = x.shape();
    for (dim, len) in [("gamma", gamma.len()), ("beta", beta.len()), ("running_mean", running_mean.len()), ("running_var", running_var.len())] {
        if len != s.c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim,
                expected: s.c,
                actual: len,
            });
        }
    }
    if eps <= T::zero() {
        return Err(invalid(OP, "eps must be positive"));
    }
    if running_var.iter().any(|&v| v < T::zero()) {
        return Err(invalid(OP, "running variance is negative"));
    }
    let m = s.n * s.plane();
    if m == 0 {
        return Err(invalid(OP, "empty input"));
    }
    let mf = T::from_usize(m).unwrap();
    let (mean, var) = match mode {
        BnMode::Infer => (running_mean.to_vec(), running_var.to_vec()),
        BnMode::Train => {
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += x.plane(n, c).iter().copied().sum::<T>();
                }
                mean[c] = acc / mf;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in x.plane(n, c) {
                        let d = v - mean[c];
                        sq += d * d;
                    }
                }
                var[c] = sq / mf;
            }
            let unbias = if m > 1 { mf / T::from_usize(m - 1).unwrap() } else { T::one() };
            for c in 0..s.c {
                running_mean[c] = (T::one() - momentum) * running_mean[c] + momentum * mean[c];
                running_var[c] = (T::one() - momentum) * running_var[c] + momentum * var[c] * unbias;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            for i in start..start + s.plane() {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = h * gamma[c] + beta[c];
            }
        }
    }
    Ok((y, BnCache { mode, xhat, inv_std }))
}

/// Returns (grad input, grad gamma, grad beta).
pub fn batch_norm_backward<T: Scalar>(cache: &BnCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let m = T::from_usize(s.n * s.plane()).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            for i in start..start + s.plane() {
                dbeta[c] += grad_out.data()[i];
                dgamma[c] += grad_out.data()[i] * cache.xhat.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            let scale = gamma[c] * cache.inv_std[c];
            for i in start..start + s.plane() {
                dx.data_mut()[i] = match cache.mode {
                    BnMode::Infer => grad_out.data()[i] * scale,
                    BnMode::Train => {
                        scale / m * (m * grad_out.data()[i] - dbeta[c] - cache.xhat.data()[i] * dgamma[c])
                    }
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax of an (N, K) score matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean negative log-likelihood of the true classes and its gradient
/// `(softmax - onehot) / N`. `logits` is (N, K, 1, 1).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_cross_entropy";
    let s = logits.shape();
    let k = s.c * s.plane();
    if labels.len() != s.n {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "labels",
            expected: s.n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(OP, format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_rows(logits.data(), k);
    let nf = T::from_usize(s.n).unwrap();
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        loss += lse - row[l];
        grad[i * k + l] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g = *g / nf);
    Ok((loss / nf, Tensor::from_vec(s, grad)?))
}
