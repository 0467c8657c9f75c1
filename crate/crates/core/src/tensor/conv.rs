use super::{counter, invalid, Result, Scalar, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    /// Mirror padding that excludes the edge pixel (`[c b | a b c | b a]`).
    Reflect(usize),
}

impl Padding {
    pub fn amount(&self) -> usize {
        match *self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: Padding,
    /// 1 for a dense convolution, C for depthwise.
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Zero(0),
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize, padding: Padding) -> Self {
        Self {
            stride,
            padding,
            groups: channels,
        }
    }
}

struct Geometry {
    input: Shape,
    out: Shape,
    k: usize,
    cin_g: usize,
    cout_g: usize,
    hp: usize,
    wp: usize,
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &Conv2dParams,
) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let s = input.shape();
    let ws = weight.shape();
    if p.stride == 0 {
        return Err(invalid(OP, "stride must be positive"));
    }
    if p.groups == 0 || s.c % p.groups != 0 {
        return Err(invalid(
            OP,
            format!("groups {} must divide input channels {}", p.groups, s.c),
        ));
    }
    if ws.n % p.groups != 0 {
        return Err(invalid(
            OP,
            format!("groups {} must divide output channels {}", p.groups, ws.n),
        ));
    }
    if ws.h != ws.w {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "kernel width",
            expected: ws.h,
            actual: ws.w,
        });
    }
    let cin_g = s.c / p.groups;
    if ws.c != cin_g {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "input channels",
            expected: ws.c,
            actual: cin_g,
        });
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: ws.n,
                actual: b.numel(),
            });
        }
    }
    let pad = p.padding.amount();
    if let Padding::Reflect(r) = p.padding {
        if r >= s.h || r >= s.w {
            return Err(invalid(
                OP,
                format!("reflect padding {r} needs spatial extent > {r}, got {}x{}", s.h, s.w),
            ));
        }
    }
    let k = ws.h;
    let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
    if k == 0 || k > hp || k > wp {
        return Err(invalid(
            OP,
            format!("kernel {k} exceeds padded input {hp}x{wp}"),
        ));
    }
    let out = Shape::new(s.n, ws.n, (hp - k) / p.stride + 1, (wp - k) / p.stride + 1);
    Ok(Geometry {
        input: s,
        out,
        k,
        cin_g,
        cout_g: ws.n / p.groups,
        hp,
        wp,
    })
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Materializes the padded input.
pub fn pad<T: Scalar>(x: &Tensor<T>, padding: Padding) -> Tensor<T> {
    let p = padding.amount();
    if p == 0 {
        return x.clone();
    }
    let s = x.shape();
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, hp, wp));
    let od = out.data_mut();
    let reflect = matches!(padding, Padding::Reflect(_));
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut od[plane * hp * wp..(plane + 1) * hp * wp];
        for hh in 0..hp {
            let sh = if reflect {
                reflect_index(hh as isize - p as isize, s.h)
            } else if hh >= p && hh < p + s.h {
                hh - p
            } else {
                continue;
            };
            let srow = &src[sh * s.w..(sh + 1) * s.w];
            let drow = &mut dst[hh * wp..(hh + 1) * wp];
            drow[p..p + s.w].copy_from_slice(srow);
            if reflect {
                for j in 0..p {
                    drow[p - 1 - j] = srow[j + 1];
                    drow[p + s.w + j] = srow[s.w - 2 - j];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`].
pub fn pad_backward<T: Scalar>(grad: &Tensor<T>, input: Shape, padding: Padding) -> Tensor<T> {
    let p = padding.amount();
    if p == 0 {
        return grad.clone();
    }
    let (hp, wp) = (input.h + 2 * p, input.w + 2 * p);
    let mut out = Tensor::zeros(input);
    let od = out.data_mut();
    let reflect = matches!(padding, Padding::Reflect(_));
    for plane in 0..input.n * input.c {
        let src = &grad.data()[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut od[plane * input.plane()..(plane + 1) * input.plane()];
        for hh in 0..hp {
            let sh = if reflect {
                reflect_index(hh as isize - p as isize, input.h)
            } else if hh >= p && hh < p + input.h {
                hh - p
            } else {
                continue;
            };
            let grow = &src[hh * wp..(hh + 1) * wp];
            let drow = &mut dst[sh * input.w..(sh + 1) * input.w];
            for (d, &g) in drow.iter_mut().zip(&grow[p..p + input.w]) {
                *d += g;
            }
            if reflect {
                for j in 0..p {
                    drow[j + 1] += grow[p - 1 - j];
                    drow[input.w - 2 - j] += grow[p + input.w + j];
                }
            }
        }
    }
    out
}

/// Reference convolution: one windowed dot product per output element,
/// accumulated in (input channel, kernel row, kernel column) order and
/// counted by the MAC counter (padded positions included).
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, &params)?;
    let out = direct_forward(input, weight, bias, &params, &g);
    counter::add((g.out.numel() * g.cin_g * g.k * g.k) as u64);
    Ok(out)
}

fn direct_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &Conv2dParams,
    g: &Geometry,
) -> Tensor<T> {
    let xp = pad(input, params.padding);
    let xd = xp.data();
    let wd = weight.data();
    let k = g.k;
    let s = params.stride;
    let mut out = Tensor::zeros(g.out);
    let o = out.data_mut();
    let mut idx = 0;
    for n in 0..g.out.n {
        for co in 0..g.out.c {
            let c0 = (co / g.cout_g) * g.cin_g;
            for oh in 0..g.out.h {
                for ow in 0..g.out.w {
                    let mut acc = T::zero();
                    for ci in 0..g.cin_g {
                        let plane = (n * g.input.c + c0 + ci) * g.hp * g.wp;
                        let wbase = (co * g.cin_g + ci) * k * k;
                        for kh in 0..k {
                            let row = plane + (oh * s + kh) * g.wp + ow * s;
                            for kw in 0..k {
                                acc += xd[row + kw] * wd[wbase + kh * k + kw];
                            }
                        }
                    }
                    o[idx] = match bias {
                        Some(b) => acc + b.data()[co],
                        None => acc,
                    };
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Convolution through the fast kernels: a patch-matrix product for dense
/// convolutions and a plane-sweep kernel for depthwise ones. Both reproduce
/// [`conv2d_direct`] bit for bit.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, &params)?;
    if g.cin_g == 1 {
        Ok(single_channel_forward(input, weight, bias, &params, &g))
    } else if params.groups == 1 {
        Ok(patch_forward(input, weight, bias, &params, &g))
    } else {
        Ok(direct_forward(input, weight, bias, &params, &g))
    }
}


/// out[r][p] = sum_k a[r][k] * b[k][p], accumulated in k order from zero.
/// `a` is rows x depth, `b` is depth x cols, `out` is rows x cols.
fn matmul_ordered<T: Scalar>(a: &[T], rows: usize, depth: usize, b: &[T], cols: usize, out: &mut [T]) {
    let mut p0 = 0;
    while p0 < cols {
        let left = cols - p0;
        p0 += if left >= 16 {
            matmul_panel::<T, 16>(a, rows, depth, b, cols, p0, out)
        } else if left >= 8 {
            matmul_panel::<T, 8>(a, rows, depth, b, cols, p0, out)
        } else if left >= 4 {
            matmul_panel::<T, 4>(a, rows, depth, b, cols, p0, out)
        } else {
            matmul_panel::<T, 1>(a, rows, depth, b, cols, p0, out)
        };
    }
}

/// Fills output columns `p0..p0 + C` for all rows; returns `C`.
#[inline(always)]
fn matmul_panel<T: Scalar, const C: usize>(
    a: &[T],
    rows: usize,
    depth: usize,
    b: &[T],
    cols: usize,
    p0: usize,
    out: &mut [T],
) -> usize {
    let mut r0 = 0;
    while r0 + 4 <= rows {
        matmul_block::<T, 4, C>(a, r0, depth, b, cols, p0, out);
        r0 += 4;
    }
    while r0 < rows {
        matmul_block::<T, 1, C>(a, r0, depth, b, cols, p0, out);
        r0 += 1;
    }
    C
}

/// Register tile of `R` rows by `C` columns, accumulated over the full
/// depth in order.
#[inline(always)]
fn matmul_block<T: Scalar, const R: usize, const C: usize>(
    a: &[T],
    r0: usize,
    depth: usize,
    b: &[T],
    cols: usize,
    p0: usize,
    out: &mut [T],
) {
    let mut acc = [[T::zero(); C]; R];
    let arows: [&[T]; R] = std::array::from_fn(|r| &a[(r0 + r) * depth..(r0 + r + 1) * depth]);
    for kk in 0..depth {
        let brow: &[T; C] = b[kk * cols + p0..kk * cols + p0 + C].try_into().unwrap();
        for r in 0..R {
            let av = arows[r][kk];
            for c in 0..C {
                acc[r][c] += av * brow[c];
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        out[(r0 + r) * cols + p0..(r0 + r) * cols + p0 + C].copy_from_slice(acc_r);
    }
}

fn is_pointwise_identity(g: &Geometry, params: &Conv2dParams) -> bool {
    g.k == 1 && params.stride == 1 && params.padding.amount() == 0
}

fn im2col<T: Scalar>(xp: &[T], g: &Geometry, stride: usize, col: &mut [T]) {
    let (k, p) = (g.k, g.out.h * g.out.w);
    for ci in 0..g.input.c {
        let plane = &xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * p..((ci * k + kh) * k + kw + 1) * p];
                for oh in 0..g.out.h {
                    let src = (oh * stride + kh) * g.wp + kw;
                    let dst = &mut row[oh * g.out.w..(oh + 1) * g.out.w];
                    if stride == 1 {
                        dst.copy_from_slice(&plane[src..src + g.out.w]);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            *d = plane[src + ow * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, stride: usize, xp: &mut [T]) {
    let (k, p) = (g.k, g.out.h * g.out.w);
    for ci in 0..g.input.c {
        let plane = &mut xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * p..((ci * k + kh) * k + kw + 1) * p];
                for oh in 0..g.out.h {
                    let dst = (oh * stride + kh) * g.wp + kw;
                    let src = &row[oh * g.out.w..(oh + 1) * g.out.w];
                    if stride == 1 {
                        for (d, &v) in plane[dst..dst + g.out.w].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (ow, &v) in src.iter().enumerate() {
                            plane[dst + ow * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn patch_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &Conv2dParams,
    g: &Geometry,
) -> Tensor<T> {
    let depth = g.input.c * g.k * g.k;
    let cols = g.out.h * g.out.w;
    let mut out = Tensor::zeros(g.out);
    let direct = is_pointwise_identity(g, params);
    let xp = if direct { None } else { Some(pad(input, params.padding)) };
    let mut col = if direct { Vec::new() } else { vec![T::zero(); depth * cols] };
    let per_in = g.input.c * g.hp * g.wp;
    let per_out = g.out.c * cols;
    for n in 0..g.input.n {
        let b: &[T] = match &xp {
            None => &input.data()[n * per_in..(n + 1) * per_in],
            Some(xp) => {
                im2col(&xp.data()[n * per_in..(n + 1) * per_in], g, params.stride, &mut col);
                &col
            }
        };
        let o = &mut out.data_mut()[n * per_out..(n + 1) * per_out];
        matmul_ordered(weight.data(), g.out.c, depth, b, cols, o);
        if let Some(bias) = bias {
            for (co, row) in o.chunks_mut(cols).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Padded planes stored row by row, each row split into `stride` column
/// phases: phase `b` of a row holds padded columns `b, b + stride, ...`, so
/// kernel tap `kw` of output column `ow` sits at `slot(kw) + ow`.
struct PhasePlane<T> {
    buf: Vec<T>,
    len: usize,
    span: usize,
    stride: usize,
    width: usize,
    /// Source row of each padded row; `None` for zero pads.
    rows: Vec<Option<usize>>,
    /// Source column feeding each slot of a row; `width` marks a zero.
    gather: Vec<usize>,
    /// (slot, source column) for every non-zero slot.
    scatter: Vec<(usize, usize)>,
    /// Row staging buffer with a trailing zero.
    ext: Vec<T>,
}

impl<T: Scalar> PhasePlane<T> {
    fn new(g: &Geometry, params: &Conv2dParams) -> Self {
        let s = params.stride;
        let len = g.wp.div_ceil(s);
        let p = params.padding.amount();
        let reflect = matches!(params.padding, Padding::Reflect(_));
        let src = |i: usize, size: usize| {
            if reflect {
                Some(reflect_index(i as isize - p as isize, size))
            } else {
                (i >= p && i < p + size).then(|| i - p)
            }
        };
        let w = g.input.w;
        let mut gather = vec![w; s * len];
        let mut scatter = Vec::with_capacity(g.wp);
        for c in 0..g.wp {
            if let Some(sc) = src(c, w) {
                let slot = (c % s) * len + c / s;
                gather[slot] = sc;
                scatter.push((slot, sc));
            }
        }
        Self {
            buf: vec![T::zero(); g.hp * s * len],
            len,
            span: s * len,
            stride: s,
            width: w,
            rows: (0..g.hp).map(|r| src(r, g.input.h)).collect(),
            gather,
            scatter,
            ext: vec![T::zero(); w + 1],
        }
    }

    #[inline]
    fn slot(&self, col: usize) -> usize {
        (col % self.stride) * self.len + col / self.stride
    }

    fn fill(&mut self, x: &[T]) {
        let w = self.width;
        for (r, src) in self.rows.iter().enumerate() {
            let dst = &mut self.buf[r * self.span..(r + 1) * self.span];
            match src {
                None => dst.iter_mut().for_each(|v| *v = T::zero()),
                Some(sr) => {
                    self.ext[..w].copy_from_slice(&x[sr * w..(sr + 1) * w]);
                    for (d, &i) in dst.iter_mut().zip(&self.gather) {
                        *d = self.ext[i];
                    }
                }
            }
        }
    }

    /// Adds the gradient held in `buf` back onto the unpadded plane.
    fn fold_into(&self, gx: &mut [T]) {
        let w = self.width;
        for (r, src) in self.rows.iter().enumerate() {
            let Some(sr) = src else { continue };
            let row = &self.buf[r * self.span..(r + 1) * self.span];
            let dst = &mut gx[sr * w..(sr + 1) * w];
            for &(slot, sc) in &self.scatter {
                dst[sc] += row[slot];
            }
        }
    }
}

/// Convolution where every output channel reads a single input channel:
/// depthwise layers and single-channel stems.
fn single_channel_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &Conv2dParams,
    g: &Geometry,
) -> Tensor<T> {
    let (k, s) = (g.k, params.stride);
    let mut out = Tensor::zeros(g.out);
    let (ho, wo) = (g.out.h, g.out.w);
    let hw = g.input.h * g.input.w;
    let wd = weight.data();
    let mut pl = PhasePlane::new(g, params);
    for n in 0..g.out.n {
        for ci in 0..g.input.c {
            let plane = n * g.input.c + ci;
            pl.fill(&input.data()[plane * hw..(plane + 1) * hw]);
            for co in ci * g.cout_g..(ci + 1) * g.cout_g {
                let oplane = n * g.out.c + co;
                let o = &mut out.data_mut()[oplane * ho * wo..(oplane + 1) * ho * wo];
                for oh in 0..ho {
                    let orow = &mut o[oh * wo..(oh + 1) * wo];
                    for kh in 0..k {
                        let base = (oh * s + kh) * pl.span;
                        for kw in 0..k {
                            let wv = wd[(co * k + kh) * k + kw];
                            let t = base + pl.slot(kw);
                            for (ov, &xv) in orow.iter_mut().zip(&pl.buf[t..t + wo]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let bv = b.data()[co];
                    o.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a convolution with respect to its input, weight and bias,
/// given the gradient of the loss with respect to its output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    params: Conv2dParams,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    backward(input, weight, has_bias, params, grad_out, true, true)
}

/// Weight and bias gradients only, for convolutions whose input needs no
/// gradient. The returned `input` gradient is empty.
pub fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    params: Conv2dParams,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    backward(input, weight, has_bias, params, grad_out, true, false)
}

/// Input gradient only, for convolutions with fixed weights.
pub fn conv2d_backward_input<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    params: Conv2dParams,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(backward(input, weight, false, params, grad_out, false, true)?.input)
}

fn backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    params: Conv2dParams,
    grad_out: &Tensor<T>,
    need_weight: bool,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, weight, None, &params)?;
    if grad_out.shape() != g.out {
        return Err(invalid(
            "conv2d_backward",
            format!("grad shape {} != output shape {}", grad_out.shape(), g.out),
        ));
    }
    let cols = g.out.h * g.out.w;
    let bias = has_bias.then(|| {
        let mut b = vec![T::zero(); g.out.c];
        for n in 0..g.out.n {
            for (co, bv) in b.iter_mut().enumerate() {
                let start = (n * g.out.c + co) * cols;
                *bv += grad_out.data()[start..start + cols].iter().copied().sum::<T>();
            }
        }
        Tensor::vector(b)
    });
    let (gi, gw) = if g.cin_g == 1 {
        single_channel_backward(input, weight, &params, &g, grad_out, need_weight, need_input)
    } else if params.groups == 1 {
        patch_backward(input, weight, &params, &g, grad_out, need_weight, need_input)
    } else {
        direct_backward(input, weight, &params, &g, grad_out)
    };
    Ok(Conv2dGrads {
        input: gi,
        weight: gw,
        bias,
    })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (x, y) = (&a[i * LANES..(i + 1) * LANES], &b[i * LANES..(i + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

fn patch_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    params: &Conv2dParams,
    g: &Geometry,
    grad_out: &Tensor<T>,
    need_weight: bool,
    need_input: bool,
) -> (Tensor<T>, Tensor<T>) {
    let depth = g.input.c * g.k * g.k;
    let cols = g.out.h * g.out.w;
    let direct = is_pointwise_identity(g, params);
    let xp = if direct || !need_weight { None } else { Some(pad(input, params.padding)) };
    let per_in = g.input.c * g.hp * g.wp;
    let per_out = g.out.c * cols;
    let wt = if need_input { transpose(weight.data(), g.out.c, depth) } else { Vec::new() };
    let mut gw = vec![T::zero(); g.out.c * depth];
    let mut gw_n = if need_weight { vec![T::zero(); g.out.c * depth] } else { Vec::new() };
    let gx_shape = match (need_input, direct) {
        (false, _) => Shape::new(0, 0, 0, 0),
        (true, true) => g.input,
        (true, false) => Shape::new(g.input.n, g.input.c, g.hp, g.wp),
    };
    let mut gx_all = Tensor::zeros(gx_shape);
    let mut col = if xp.is_some() { vec![T::zero(); depth * cols] } else { Vec::new() };
    let mut gcol = if need_input && !direct { vec![T::zero(); depth * cols] } else { Vec::new() };
    for n in 0..g.input.n {
        let go = &grad_out.data()[n * per_out..(n + 1) * per_out];
        if need_weight {
            let b: &[T] = match &xp {
                None => &input.data()[n * per_in..(n + 1) * per_in],
                Some(xp) => {
                    im2col(&xp.data()[n * per_in..(n + 1) * per_in], g, params.stride, &mut col);
                    &col
                }
            };
            if depth >= 64 {
                let bt = transpose(b, depth, cols);
                matmul_ordered(go, g.out.c, cols, &bt, depth, &mut gw_n);
                gw.iter_mut().zip(&gw_n).for_each(|(a, &d)| *a += d);
            } else {
                for co in 0..g.out.c {
                    let grow = &go[co * cols..(co + 1) * cols];
                    for kk in 0..depth {
                        gw[co * depth + kk] += dot(grow, &b[kk * cols..(kk + 1) * cols]);
                    }
                }
            }
        }
        if need_input {
            let gx = &mut gx_all.data_mut()[n * per_in..(n + 1) * per_in];
            if direct {
                matmul_ordered(&wt, depth, g.out.c, go, cols, gx);
            } else {
                matmul_ordered(&wt, depth, g.out.c, go, cols, &mut gcol);
                col2im(&gcol, g, params.stride, gx);
            }
        }
    }
    let gi = if need_input && !direct { pad_backward(&gx_all, g.input, params.padding) } else { gx_all };
    let gw = Tensor::from_vec(weight.shape(), gw).expect("weight grad shape");
    (gi, gw)
}

fn single_channel_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    params: &Conv2dParams,
    g: &Geometry,
    grad_out: &Tensor<T>,
    need_weight: bool,
    need_input: bool,
) -> (Tensor<T>, Tensor<T>) {
    let (k, s) = (g.k, params.stride);
    let (ho, wo) = (g.out.h, g.out.w);
    let hw = g.input.h * g.input.w;
    let mut gi = Tensor::zeros(if need_input { g.input } else { Shape::new(0, 0, 0, 0) });
    let mut gw = Tensor::zeros(weight.shape());
    let mut xs = PhasePlane::new(g, params);
    let mut gs = PhasePlane::new(g, params);
    for n in 0..g.out.n {
        for ci in 0..g.input.c {
            let plane = n * g.input.c + ci;
            if need_weight {
                xs.fill(&input.data()[plane * hw..(plane + 1) * hw]);
            }
            if need_input {
                gs.buf.iter_mut().for_each(|v| *v = T::zero());
            }
            for co in ci * g.cout_g..(ci + 1) * g.cout_g {
                let oplane = n * g.out.c + co;
                let go = &grad_out.data()[oplane * ho * wo..(oplane + 1) * ho * wo];
                for oh in 0..ho {
                    let grow = &go[oh * wo..(oh + 1) * wo];
                    for kh in 0..k {
                        let base = (oh * s + kh) * gs.span;
                        for kw in 0..k {
                            let widx = (co * k + kh) * k + kw;
                            let t = base + gs.slot(kw);
                            if need_weight {
                                let d = dot(grow, &xs.buf[t..t + wo]);
                                gw.data_mut()[widx] += d;
                            }
                            if need_input {
                                let wv = weight.data()[widx];
                                for (gv, &gov) in gs.buf[t..t + wo].iter_mut().zip(grow) {
                                    *gv += gov * wv;
                                }
                            }
                        }
                    }
                }
            }
            if need_input {
                gs.fold_into(&mut gi.data_mut()[plane * hw..(plane + 1) * hw]);
            }
        }
    }
    (gi, gw)
}

fn direct_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    params: &Conv2dParams,
    g: &Geometry,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xp = pad(input, params.padding);
    let (k, s) = (g.k, params.stride);
    let mut gxp = Tensor::zeros(xp.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let xd = xp.data();
    let wd = weight.data();
    for n in 0..g.out.n {
        for co in 0..g.out.c {
            let c0 = (co / g.cout_g) * g.cin_g;
            for oh in 0..g.out.h {
                for ow in 0..g.out.w {
                    let gov = grad_out.at(n, co, oh, ow);
                    for ci in 0..g.cin_g {
                        let plane = (n * g.input.c + c0 + ci) * g.hp * g.wp;
                        let wbase = (co * g.cin_g + ci) * k * k;
                        for kh in 0..k {
                            let row = plane + (oh * s + kh) * g.wp + ow * s;
                            for kw in 0..k {
                                gw.data_mut()[wbase + kh * k + kw] += gov * xd[row + kw];
                                gxp.data_mut()[row + kw] += gov * wd[wbase + kh * k + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    (pad_backward(&gxp, g.input, params.padding), gw)
}
