use super::{ArchError, ArchSpec, Op, Result, Topology};
use crate::condenser::VacParams;
use crate::Shape;

fn hyper(id: &str, msg: impl Into<String>) -> ArchError {
    ArchError::Hyperparameter {
        id: id.to_owned(),
        msg: msg.into(),
    }
}

fn window(id: &str, len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(hyper(id, "kernel and stride must be positive"));
    }
    let padded = len + 2 * padding;
    if kernel > padded {
        return Err(ArchError::Shape {
            id: id.to_owned(),
            msg: format!("kernel {kernel} exceeds padded extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output shape of every node, in node order.
pub fn infer_shapes(spec: &ArchSpec) -> Result<Vec<Shape>> {
    let topo = spec.topology()?;
    infer_with(spec, &topo)
}

pub(crate) fn infer_with(spec: &ArchSpec, topo: &Topology) -> Result<Vec<Shape>> {
    let mut shapes: Vec<Option<Shape>> = vec![None; spec.nodes.len()];
    let input = spec.input_shape();
    if input.numel() == 0 {
        return Err(hyper(&spec.nodes[topo.input].id, "input shape has a zero extent"));
    }
    for &i in &topo.order {
        let node = &spec.nodes[i];
        let id = node.id.as_str();
        let ins: Vec<Shape> = topo.inputs[i].iter().map(|&j| shapes[j].expect("topological order")).collect();
        let shape = match node.op {
            Op::Input => input,
            Op::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let s = ins[0];
                if out_channels == 0 {
                    return Err(hyper(id, "out_channels must be positive"));
                }
                Shape::new(
                    s.n,
                    out_channels,
                    window(id, s.h, kernel, stride, padding)?,
                    window(id, s.w, kernel, stride, padding)?,
                )
            }
            Op::DepthwiseConv {
                kernel, stride, padding, ..
            } => {
                let s = ins[0];
                Shape::new(
                    s.n,
                    s.c,
                    window(id, s.h, kernel, stride, padding)?,
                    window(id, s.w, kernel, stride, padding)?,
                )
            }
            Op::PointwiseConv {
                out_channels, stride, ..
            } => {
                let s = ins[0];
                if out_channels == 0 {
                    return Err(hyper(id, "out_channels must be positive"));
                }
                Shape::new(s.n, out_channels, window(id, s.h, 1, stride, 0)?, window(id, s.w, 1, stride, 0)?)
            }
            Op::Vac {
                condense_kernel,
                condense_stride,
                mid_channels,
                embed_kernel,
            } => {
                let s = ins[0];
                let p = VacParams {
                    condense_kernel,
                    condense_stride,
                    embed_mid_channels: mid_channels,
                    embed_kernel,
                };
                p.validate(s.c).map_err(|e| ArchError::Tensor {
                    id: id.to_owned(),
                    source: e,
                })?;
                s
            }
            Op::Aads { blur_size, stride } => {
                let s = ins[0];
                if ![1, 3, 5].contains(&blur_size) {
                    return Err(hyper(id, format!("blur_size must be 1, 3 or 5, got {blur_size}")));
                }
                if stride == 0 {
                    return Err(hyper(id, "stride must be positive"));
                }
                if s.h < blur_size || s.w < blur_size {
                    return Err(ArchError::Shape {
                        id: id.to_owned(),
                        msg: format!("input {}x{} smaller than blur kernel {blur_size}", s.h, s.w),
                    });
                }
                Shape::new(s.n, s.c, s.h.div_ceil(stride), s.w.div_ceil(stride))
            }
            Op::Maxpool { kernel, stride } => {
                let s = ins[0];
                Shape::new(s.n, s.c, window(id, s.h, kernel, stride, 0)?, window(id, s.w, kernel, stride, 0)?)
            }
            Op::Relu | Op::Batchnorm | Op::Output => ins[0],
            Op::Gap => {
                let s = ins[0];
                Shape::new(s.n, s.c, 1, 1)
            }
            Op::Fc { out_features, .. } => {
                if out_features == 0 {
                    return Err(hyper(id, "out_features must be positive"));
                }
                Shape::new(ins[0].n, out_features, 1, 1)
            }
            Op::Concat => {
                let first = ins[0];
                for (k, s) in ins.iter().enumerate().skip(1) {
                    if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                        return Err(ArchError::Shape {
                            id: id.to_owned(),
                            msg: format!(
                                "input `{}` is {} but `{}` is {} (spatial extents must agree)",
                                node.inputs[k], s, node.inputs[0], first
                            ),
                        });
                    }
                }
                Shape::new(first.n, ins.iter().map(|s| s.c).sum(), first.h, first.w)
            }
        };
        shapes[i] = Some(shape);
    }
    Ok(shapes.into_iter().map(|s| s.expect("all nodes visited")).collect())
}
