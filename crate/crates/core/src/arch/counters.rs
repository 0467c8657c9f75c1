use super::{infer_shapes, ArchSpec, Op, Result};
use crate::Shape;

/// Which operations contribute to the MAC total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostModel {
    /// Multiplies in convolutions, blurs and fully connected layers only.
    #[default]
    Standard,
    /// Also charges one operation per element for activations, gating,
    /// normalization and pooling comparisons. For sensitivity analysis.
    Everything,
}

/// Learnable parameters of one node given its input shapes. Batch-norm
/// running statistics are not included.
pub fn node_params(op: &Op, inputs: &[Shape]) -> u64 {
    let c_in = inputs.first().map_or(0, |s| s.c) as u64;
    let b = |bias: bool, n: u64| if bias { n } else { 0 };
    match *op {
        Op::Conv {
            out_channels,
            kernel,
            bias,
            ..
        } => {
            let co = out_channels as u64;
            (kernel * kernel) as u64 * c_in * co + b(bias, co)
        }
        Op::DepthwiseConv { kernel, bias, .. } => (kernel * kernel) as u64 * c_in + b(bias, c_in),
        Op::PointwiseConv { out_channels, bias, .. } => {
            let co = out_channels as u64;
            c_in * co + b(bias, co)
        }
        Op::Vac {
            mid_channels,
            embed_kernel,
            ..
        } => {
            let m = mid_channels as u64;
            // depthwise, down (+bias), up, gate bias
            (embed_kernel * embed_kernel) as u64 * c_in + c_in * m + m + m * c_in + c_in
        }
        Op::Batchnorm => 2 * c_in,
        Op::Fc { out_features, bias } => {
            let d_out = out_features as u64;
            let d = inputs.first().map_or(0, |s| (s.c * s.h * s.w) as u64);
            d * d_out + b(bias, d_out)
        }
        _ => 0,
    }
}

/// Multiply-accumulate count of one node given its input and output shapes.
pub fn node_macs(op: &Op, inputs: &[Shape], out: Shape, model: CostModel) -> u64 {
    let c_in = inputs.first().map_or(0, |s| s.c) as u64;
    let out_el = out.numel() as u64;
    let extra = |n: u64| if model == CostModel::Everything { n } else { 0 };
    match *op {
        Op::Conv { kernel, .. } => out_el * (kernel * kernel) as u64 * c_in,
        Op::DepthwiseConv { kernel, .. } => out_el * (kernel * kernel) as u64,
        Op::PointwiseConv { .. } => out_el * c_in,
        Op::Vac {
            condense_kernel,
            condense_stride,
            mid_channels,
            embed_kernel,
        } => {
            let s = inputs[0];
            let (hc, wc) = (s.h.div_ceil(condense_stride), s.w.div_ceil(condense_stride));
            let cond_px = (s.n * hc * wc) as u64;
            let m = mid_channels as u64;
            let embed = cond_px * c_in * (embed_kernel * embed_kernel) as u64 + 2 * cond_px * c_in * m;
            embed
                + extra(
                    cond_px * c_in * (condense_kernel * condense_kernel) as u64
                        + cond_px * m
                        + 2 * s.numel() as u64,
                )
        }
        Op::Aads { blur_size, .. } => out_el * (blur_size * blur_size) as u64,
        Op::Fc { out_features, .. } => {
            let s = inputs[0];
            (s.n * s.c * s.h * s.w * out_features) as u64
        }
        Op::Maxpool { kernel, .. } => extra(out_el * (kernel * kernel) as u64),
        Op::Relu => extra(out_el),
        Op::Batchnorm => extra(2 * out_el),
        Op::Gap => extra(inputs[0].numel() as u64),
        Op::Input | Op::Concat | Op::Output => 0,
    }
}

/// Total learnable parameters of the spec.
pub fn count_params(spec: &ArchSpec) -> Result<u64> {
    let topo = spec.topology()?;
    let shapes = super::shapes::infer_with(spec, &topo)?;
    Ok(spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let ins: Vec<Shape> = topo.inputs[i].iter().map(|&j| shapes[j]).collect();
            node_params(&n.op, &ins)
        })
        .sum())
}

/// Total multiply-accumulates of one forward pass at the spec's input shape.
pub fn count_macs(spec: &ArchSpec) -> Result<u64> {
    count_macs_with(spec, CostModel::Standard)
}

pub fn count_macs_with(spec: &ArchSpec, model: CostModel) -> Result<u64> {
    let topo = spec.topology()?;
    let shapes = infer_shapes(spec)?;
    Ok(spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let ins: Vec<Shape> = topo.inputs[i].iter().map(|&j| shapes[j]).collect();
            node_macs(&n.op, &ins, shapes[i], model)
        })
        .sum())
}
