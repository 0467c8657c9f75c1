//! Visual attention condenser (VAC) and anti-aliased downsampling (AADS)
//! blocks, built from the tensor primitives, plus the shift-consistency
//! measurement used to compare downsampling strategies.

use crate::tensor::ops::{self, PoolMode};
use crate::tensor::{self, invalid, Conv2dParams, Padding, Result, Scalar, Shape, Tensor, TensorError};

/// Which kernels a forward pass runs on. `Reference` uses the direct loops
/// and feeds the MAC counter; `Fast` uses the patch-matrix and plane-sweep
/// kernels. Both produce identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Fast,
    Reference,
}

impl Exec {
    pub fn conv2d<T: Scalar>(
        self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        p: Conv2dParams,
    ) -> Result<Tensor<T>> {
        match self {
            Exec::Fast => tensor::conv2d(x, w, b, p),
            Exec::Reference => tensor::conv2d_direct(x, w, b, p),
        }
    }

    pub fn fully_connected<T: Scalar>(self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match self {
            Exec::Fast => ops::fully_connected(x, w, b),
            Exec::Reference => ops::fully_connected_direct(x, w, b),
        }
    }
}

/// Normalized binomial low-pass kernel, row-major `size x size`. Size 1 is
/// the identity, which turns AADS into plain strided subsampling.
pub fn make_blur_kernel(size: usize) -> Result<Vec<f64>> {
    let row: &[f64] = match size {
        1 => &[1.0],
        3 => &[1.0, 2.0, 1.0],
        5 => &[1.0, 4.0, 6.0, 4.0, 1.0],
        _ => {
            return Err(invalid(
                "make_blur_kernel",
                format!("blur size must be 1, 3 or 5, got {size}"),
            ))
        }
    };
    let norm: f64 = row.iter().sum::<f64>().powi(2);
    Ok(row
        .iter()
        .flat_map(|a| row.iter().map(move |b| a * b / norm))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AadsPadding {
    #[default]
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AadsParams {
    pub blur_size: usize,
    pub stride: usize,
    pub pad_mode: AadsPadding,
}

impl Default for AadsParams {
    fn default() -> Self {
        Self {
            blur_size: 3,
            stride: 2,
            pad_mode: AadsPadding::Reflect,
        }
    }
}

impl AadsParams {
    pub fn new(blur_size: usize, stride: usize) -> Self {
        Self {
            blur_size,
            stride,
            ..Default::default()
        }
    }

    fn conv(&self, channels: usize) -> Conv2dParams {
        let p = (self.blur_size - 1) / 2;
        let padding = match self.pad_mode {
            AadsPadding::Reflect => Padding::Reflect(p),
            AadsPadding::Zero => Padding::Zero(p),
        };
        Conv2dParams::depthwise(channels, self.stride, padding)
    }

    /// Output spatial extent for an input extent.
    pub fn out_extent(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }
}

fn blur_weights<T: Scalar>(channels: usize, size: usize) -> Result<Tensor<T>> {
    let k = make_blur_kernel(size)?;
    let data = (0..channels)
        .flat_map(|_| k.iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    Tensor::from_vec(Shape::new(channels, 1, size, size), data)
}

fn check_aads<T: Scalar>(x: &Tensor<T>, p: &AadsParams) -> Result<()> {
    if p.stride == 0 {
        return Err(invalid("aads", "stride must be positive"));
    }
    let s = x.shape();
    if s.h < p.blur_size || s.w < p.blur_size {
        return Err(invalid(
            "aads",
            format!("input {}x{} smaller than blur kernel {}", s.h, s.w, p.blur_size),
        ));
    }
    Ok(())
}

/// Depthwise binomial blur followed by subsampling. The blur is only
/// evaluated at the retained positions.
pub fn aads_forward<T: Scalar>(x: &Tensor<T>, p: &AadsParams, exec: Exec) -> Result<Tensor<T>> {
    check_aads(x, p)?;
    let c = x.shape().c;
    let w = blur_weights(c, p.blur_size)?;
    exec.conv2d(x, &w, None, p.conv(c))
}

pub fn aads_backward<T: Scalar>(x: &Tensor<T>, p: &AadsParams, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check_aads(x, p)?;
    let c = x.shape().c;
    let w = blur_weights(c, p.blur_size)?;
    tensor::conv2d_backward_input(x, &w, p.conv(c), grad_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VacParams {
    /// Max-pool window of the condensation stage.
    pub condense_kernel: usize,
    pub condense_stride: usize,
    /// Width of the channel bottleneck in the embedding.
    pub embed_mid_channels: usize,
    /// Depthwise spatial kernel of the embedding.
    pub embed_kernel: usize,
}

impl VacParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        const OP: &str = "vac";
        if self.condense_stride < 2 {
            return Err(invalid(OP, format!("condense_stride must be >= 2, got {}", self.condense_stride)));
        }
        if self.condense_kernel == 0 {
            return Err(invalid(OP, "condense_kernel must be positive"));
        }
        if self.embed_kernel == 0 || self.embed_kernel % 2 == 0 {
            return Err(invalid(OP, format!("embed_kernel must be odd, got {}", self.embed_kernel)));
        }
        if self.embed_mid_channels == 0 || self.embed_mid_channels > channels {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "embed_mid_channels (must be <= channels)",
                expected: channels,
                actual: self.embed_mid_channels,
            });
        }
        Ok(())
    }

    pub fn condensed_extent(&self, len: usize) -> usize {
        len.div_ceil(self.condense_stride)
    }

    /// Shapes of the learnable tensors: depthwise, down weight, down bias,
    /// up weight, gate bias.
    pub fn weight_shapes(&self, channels: usize) -> [Shape; 5] {
        let (c, m, k) = (channels, self.embed_mid_channels, self.embed_kernel);
        [
            Shape::new(c, 1, k, k),
            Shape::new(m, c, 1, 1),
            Shape::new(1, 1, 1, m),
            Shape::new(c, m, 1, 1),
            Shape::new(1, 1, 1, c),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VacWeights<'a, T> {
    pub depthwise: &'a Tensor<T>,
    pub down_weight: &'a Tensor<T>,
    pub down_bias: &'a Tensor<T>,
    pub up_weight: &'a Tensor<T>,
    pub gate_bias: &'a Tensor<T>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VacCache<T> {
    argmax: Vec<usize>,
    pooled: Tensor<T>,
    embedded: Tensor<T>,
    down: Tensor<T>,
    act: Tensor<T>,
    /// Gate values, one per condensed cell.
    pub gate: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct VacGrads<T> {
    pub input: Tensor<T>,
    pub depthwise: Tensor<T>,
    pub down_weight: Tensor<T>,
    pub down_bias: Tensor<T>,
    pub up_weight: Tensor<T>,
    pub gate_bias: Tensor<T>,
}

/// `out = x * sigmoid(E(x))` with
/// `E(x) = crop(upsample(up(relu(down(depthwise(maxpool(x))))))) + gate_bias`.
pub fn vac_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &VacParams,
    w: &VacWeights<'_, T>,
    exec: Exec,
) -> Result<(Tensor<T>, VacCache<T>)> {
    let s = x.shape();
    p.validate(s.c)?;
    let (pooled, argmax) = ops::max_pool2d_with_indices(x, p.condense_kernel, p.condense_stride, PoolMode::Cover)?;
    let embedded = exec.conv2d(
        &pooled,
        w.depthwise,
        None,
        Conv2dParams::depthwise(s.c, 1, Padding::Zero(p.embed_kernel / 2)),
    )?;
    let down = exec.conv2d(&embedded, w.down_weight, Some(w.down_bias), Conv2dParams::default())?;
    let act = ops::relu(&down);
    let up = exec.conv2d(&act, w.up_weight, None, Conv2dParams::default())?;
    let logits = ops::add_channel_bias(&up, w.gate_bias.data())?;
    let gate = ops::sigmoid(&logits);
    let out = apply_gate(x, &gate, p.condense_stride)?;
    Ok((
        out,
        VacCache {
            argmax,
            pooled,
            embedded,
            down,
            act,
            gate,
        },
    ))
}

/// Row offset of the centered crop from the expanded gate to the input.
fn crop_offset(condensed: usize, stride: usize, full: usize) -> usize {
    (condensed * stride - full) / 2
}

/// Multiplies every input pixel by the gate of the condensed cell it falls
/// in after nearest expansion and centered cropping.
fn apply_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (s, gs) = (x.shape(), gate.shape());
    if gs.n != s.n || gs.c != s.c || gs.h * stride < s.h || gs.w * stride < s.w {
        return Err(crate::tensor::invalid("vac", format!("gate {gs} does not cover input {s}")));
    }
    let (oy, ox) = (crop_offset(gs.h, stride, s.h), crop_offset(gs.w, stride, s.w));
    let cols: Vec<usize> = (0..s.w).map(|c| (c + ox) / stride).collect();
    let mut out = Tensor::zeros(s);
    for plane in 0..s.n * s.c {
        let g = &gate.data()[plane * gs.plane()..(plane + 1) * gs.plane()];
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data_mut()[plane * s.plane()..(plane + 1) * s.plane()];
        for r in 0..s.h {
            let grow = &g[(r + oy) / stride * gs.w..][..gs.w];
            for c in 0..s.w {
                dst[r * s.w + c] = src[r * s.w + c] * grow[cols[c]];
            }
        }
    }
    Ok(out)
}

/// Gradients of `apply_gate` for the input and the condensed gate.
fn apply_gate_backward<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>, stride: usize, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (s, gs) = (x.shape(), gate.shape());
    let (oy, ox) = (crop_offset(gs.h, stride, s.h), crop_offset(gs.w, stride, s.w));
    let cols: Vec<usize> = (0..s.w).map(|c| (c + ox) / stride).collect();
    let mut gi = Tensor::zeros(s);
    let mut gg = Tensor::zeros(gs);
    for plane in 0..s.n * s.c {
        let g = &gate.data()[plane * gs.plane()..(plane + 1) * gs.plane()];
        let ggp = &mut gg.data_mut()[plane * gs.plane()..(plane + 1) * gs.plane()];
        let src = &x.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let go = &grad_out.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let gip = &mut gi.data_mut()[plane * s.plane()..(plane + 1) * s.plane()];
        for r in 0..s.h {
            let row = (r + oy) / stride * gs.w;
            for c in 0..s.w {
                let i = r * s.w + c;
                gip[i] = go[i] * g[row + cols[c]];
                ggp[row + cols[c]] += go[i] * src[i];
            }
        }
    }
    (gi, gg)
}

pub fn vac_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &VacParams,
    w: &VacWeights<'_, T>,
    cache: &VacCache<T>,
    grad_out: &Tensor<T>,
) -> Result<VacGrads<T>> {
    let s = x.shape();
    let (mut g_input, g_gate) = apply_gate_backward(x, &cache.gate, p.condense_stride, grad_out);
    let g_up = ops::sigmoid_backward(&cache.gate, &g_gate);
    let gate_bias = Tensor::vector(ops::channel_sums(&g_up));
    let up = tensor::conv2d_backward(&cache.act, w.up_weight, false, Conv2dParams::default(), &g_up)?;
    let g_down = ops::relu_backward(&cache.down, &up.input);
    let down = tensor::conv2d_backward(&cache.embedded, w.down_weight, true, Conv2dParams::default(), &g_down)?;
    let dw = tensor::conv2d_backward(
        &cache.pooled,
        w.depthwise,
        false,
        Conv2dParams::depthwise(s.c, 1, Padding::Zero(p.embed_kernel / 2)),
        &down.input,
    )?;
    let g_pool = ops::max_pool2d_backward(s, &cache.argmax, &dw.input);
    for (a, b) in g_input.data_mut().iter_mut().zip(g_pool.data()) {
        *a += *b;
    }
    Ok(VacGrads {
        input: g_input,
        depthwise: dw.weight,
        down_weight: down.weight,
        down_bias: down.bias.expect("bias requested"),
        up_weight: up.weight,
        gate_bias,
    })
}

/// Fraction of cyclically shifted copies of `image` whose predicted class
/// matches the prediction for the unshifted image.
pub fn shift_consistency<T, F, E>(classify: F, image: &Tensor<T>, shifts: &[(isize, isize)]) -> std::result::Result<f64, E>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> std::result::Result<usize, E>,
    E: From<TensorError>,
{
    if shifts.is_empty() {
        return Err(invalid("shift_consistency", "empty shift list").into());
    }
    let base = classify(image)?;
    let mut same = 0usize;
    for &(dy, dx) in shifts {
        if classify(&ops::roll(image, dy, dx))? == base {
            same += 1;
        }
    }
    Ok(same as f64 / shifts.len() as f64)
}
