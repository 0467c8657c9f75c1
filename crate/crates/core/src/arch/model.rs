use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{shapes::infer_with, ArchError, ArchSpec, Op, Result, Topology};
use crate::condenser::{aads_backward, aads_forward, vac_backward, vac_forward, AadsParams, Exec, VacCache, VacParams, VacWeights};
use crate::tensor::ops::{self, BnCache, BnMode, PoolMode, BN_EPS, BN_MOMENTUM};
use crate::tensor::{conv2d_backward, conv2d_backward_params, Conv2dParams, Padding};
use crate::{ParamGroup, ParamTensor, Scalar, Shape, Tensor, TensorError};

/// Per-node state kept by a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub enum NodeCache<T> {
    #[default]
    None,
    Vac(VacCache<T>),
    Pool(Vec<usize>),
    Norm(BnCache<T>),
}

/// Outputs and caches of a forward pass, indexed by node position.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    outputs: Vec<Option<Tensor<T>>>,
    caches: Vec<NodeCache<T>>,
    running: Vec<Option<(Vec<T>, Vec<T>)>>,
    output: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self, node: usize) -> Option<&Tensor<T>> {
        self.outputs[node].as_ref()
    }

    /// Network output (logits).
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs[self.output].as_ref().expect("trace holds the network output")
    }

    /// Drops every stored output and cache except the flagged nodes' outputs.
    pub fn retain(&mut self, keep: &[bool]) {
        for (i, out) in self.outputs.iter_mut().enumerate() {
            if !keep[i] {
                *out = None;
            }
        }
        self.caches.iter_mut().for_each(|c| *c = NodeCache::None);
        self.running.iter_mut().for_each(|r| *r = None);
    }
}

/// An instantiated network: a validated spec, its execution order and its
/// parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    spec: ArchSpec,
    topo: Topology,
    shapes: Vec<Shape>,
    params: Vec<ParamTensor<T>>,
    slots: Vec<Range<usize>>,
}

fn tensor_err(id: &str) -> impl Fn(TensorError) -> ArchError + '_ {
    move |source| ArchError::Tensor {
        id: id.to_owned(),
        source,
    }
}

fn vac_params(op: &Op) -> VacParams {
    match *op {
        Op::Vac {
            condense_kernel,
            condense_stride,
            mid_channels,
            embed_kernel,
        } => VacParams {
            condense_kernel,
            condense_stride,
            embed_mid_channels: mid_channels,
            embed_kernel,
        },
        _ => unreachable!("not a vac node"),
    }
}

fn conv_params(op: &Op, in_channels: usize) -> Conv2dParams {
    match *op {
        Op::Conv { stride, padding, .. } => Conv2dParams::new(stride, Padding::Zero(padding)),
        Op::DepthwiseConv { stride, padding, .. } => Conv2dParams::depthwise(in_channels, stride, Padding::Zero(padding)),
        Op::PointwiseConv { stride, .. } => Conv2dParams::new(stride, Padding::Zero(0)),
        _ => unreachable!("not a convolution node"),
    }
}

/// (suffix, shape, fan-in for He init or None for constant init, trainable, group)
type Layout = Vec<(&'static str, Shape, Init, bool, ParamGroup)>;

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Const(f64),
}

fn param_layout(op: &Op, input: Shape) -> Layout {
    use ParamGroup::*;
    let c = input.c;
    let bias = |on: bool, n: usize, group| {
        on.then_some(("bias", Shape::new(1, 1, 1, n), Init::Const(0.0), true, group))
    };
    let mut out = Vec::new();
    match *op {
        Op::Conv {
            out_channels,
            kernel,
            bias: b,
            ..
        } => {
            out.push(("weight", Shape::new(out_channels, c, kernel, kernel), Init::He(c * kernel * kernel), true, Convolutional));
            out.extend(bias(b, out_channels, Convolutional));
        }
        Op::DepthwiseConv { kernel, bias: b, .. } => {
            out.push(("weight", Shape::new(c, 1, kernel, kernel), Init::He(kernel * kernel), true, Convolutional));
            out.extend(bias(b, c, Convolutional));
        }
        Op::PointwiseConv {
            out_channels, bias: b, ..
        } => {
            out.push(("weight", Shape::new(out_channels, c, 1, 1), Init::He(c), true, Convolutional));
            out.extend(bias(b, out_channels, Convolutional));
        }
        Op::Vac { .. } => {
            let p = vac_params(op);
            let [dw, down, down_b, up, gate] = p.weight_shapes(c);
            let k = p.embed_kernel;
            let m = p.embed_mid_channels;
            out.push(("dw_weight", dw, Init::He(k * k), true, Convolutional));
            out.push(("down_weight", down, Init::He(c), true, Convolutional));
            out.push(("down_bias", down_b, Init::Const(0.0), true, Convolutional));
            out.push(("up_weight", up, Init::He(m), true, Convolutional));
            out.push(("gate_bias", gate, Init::Const(0.0), true, Convolutional));
        }
        Op::Batchnorm => {
            let v = Shape::new(1, 1, 1, c);
            out.push(("gamma", v, Init::Const(1.0), true, Normalization));
            out.push(("beta", v, Init::Const(0.0), true, Normalization));
            out.push(("running_mean", v, Init::Const(0.0), false, Normalization));
            out.push(("running_var", v, Init::Const(1.0), false, Normalization));
        }
        Op::Fc { out_features, bias: b } => {
            let d = c * input.h * input.w;
            out.push(("weight", Shape::new(out_features, d, 1, 1), Init::He(d), true, FullyConnected));
            out.extend(bias(b, out_features, FullyConnected));
        }
        _ => {}
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Builds the network with He-normal weights drawn in node order from a
    /// ChaCha8 stream seeded by `seed`; biases and shifts start at zero,
    /// scales at one.
    pub fn instantiate(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |_, shape, init| {
            let data = match init {
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                    (0..shape.numel()).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
                }
                Init::Const(v) => vec![T::from_f64_lossy(v); shape.numel()],
            };
            Ok(Tensor::from_vec(shape, data).expect("layout shape"))
        })
    }

    /// Builds the network taking each parameter from `fetch(name, shape)`.
    pub fn from_params(spec: &ArchSpec, mut fetch: impl FnMut(&str, Shape) -> Result<Tensor<T>>) -> Result<Self> {
        Self::build(spec, |name, shape, _| fetch(name, shape))
    }

    fn build(spec: &ArchSpec, mut make: impl FnMut(&str, Shape, Init) -> Result<Tensor<T>>) -> Result<Self> {
        let topo = spec.topology()?;
        let shapes = infer_with(spec, &topo)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(spec.nodes.len());
        for (i, node) in spec.nodes.iter().enumerate() {
            let start = params.len();
            if let Some(&j) = topo.inputs[i].first() {
                for (suffix, shape, init, trainable, group) in param_layout(&node.op, shapes[j]) {
                    let name = format!("{}.{suffix}", node.id);
                    let tensor = make(&name, shape, init)?;
                    params.push(ParamTensor::new(name, tensor, trainable, group));
                }
            }
            slots.push(start..params.len());
        }
        Ok(Self {
            spec: spec.clone(),
            topo,
            shapes,
            params,
            slots,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Output shape of every node at the spec's input shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Indices into [`Model::params`] owned by node `node`.
    pub fn node_slots(&self, node: usize) -> Range<usize> {
        self.slots[node].clone()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel() as u64).sum()
    }

    /// Same network with every parameter converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            topo: self.topo.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamTensor::new(p.name.clone(), p.tensor.cast(), p.trainable, p.group))
                .collect(),
            slots: self.slots.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let e = self.spec.input_shape();
        if s.n == 0 || (s.c, s.h, s.w) != (e.c, e.h, e.w) {
            return Err(ArchError::InputShape {
                expected: format!("Nx{}x{}x{}", e.c, e.h, e.w),
                actual: s.to_string(),
            });
        }
        Ok(())
    }

    /// Inference pass (normalization layers use running statistics).
    /// Intermediate outputs are released as soon as their last consumer ran.
    pub fn forward(&self, x: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = self.spec.nodes.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut remaining: Vec<usize> = self.topo.consumers.iter().map(Vec::len).collect();
        for &i in &self.topo.order {
            let (out, _, _) = self.run_node(i, &outputs, x, exec, BnMode::Infer)?;
            for &j in &self.topo.inputs[i] {
                remaining[j] -= 1;
                if remaining[j] == 0 {
                    outputs[j] = None;
                }
            }
            outputs[i] = Some(out);
        }
        Ok(outputs[self.topo.output].take().expect("output computed"))
    }

    /// Forward pass that keeps every output and backward cache. With
    /// `BnMode::Train` the batch statistics are used and the updated running
    /// statistics are held in the trace until [`Model::commit_running_stats`].
    pub fn trace(&self, x: &Tensor<T>, exec: Exec, bn: BnMode) -> Result<Trace<T>> {
        let n = self.spec.nodes.len();
        let mut trace = Trace {
            outputs: vec![None; n],
            caches: vec![NodeCache::None; n],
            running: vec![None; n],
            output: self.topo.output,
        };
        self.check_input(x)?;
        self.retrace(&mut trace, x, &vec![true; n], exec, bn)?;
        Ok(trace)
    }

    /// Recomputes the flagged nodes of an existing trace in execution
    /// order. Unflagged nodes must already hold their outputs wherever a
    /// flagged node consumes them.
    pub fn retrace(&self, trace: &mut Trace<T>, x: &Tensor<T>, recompute: &[bool], exec: Exec, bn: BnMode) -> Result<()> {
        for &i in &self.topo.order {
            if !recompute[i] {
                continue;
            }
            let (out, cache, running) = self.run_node(i, &trace.outputs, x, exec, bn)?;
            trace.outputs[i] = Some(out);
            trace.caches[i] = cache;
            trace.running[i] = running;
        }
        Ok(())
    }

    pub fn commit_running_stats(&mut self, trace: &Trace<T>) {
        for (i, r) in trace.running.iter().enumerate() {
            if let Some((mean, var)) = r {
                let s = self.slots[i].start;
                self.params[s + 2].tensor.data_mut().copy_from_slice(mean);
                self.params[s + 3].tensor.data_mut().copy_from_slice(var);
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn run_node(
        &self,
        i: usize,
        outputs: &[Option<Tensor<T>>],
        x: &Tensor<T>,
        exec: Exec,
        bn: BnMode,
    ) -> Result<(Tensor<T>, NodeCache<T>, Option<(Vec<T>, Vec<T>)>)> {
        let node = &self.spec.nodes[i];
        let err = tensor_err(&node.id);
        let ins: Vec<&Tensor<T>> = self.topo.inputs[i]
            .iter()
            .map(|&j| outputs[j].as_ref().expect("input computed before consumer"))
            .collect();
        let p = &self.params[self.slots[i].clone()];
        let bias = |k: usize| p.get(k).map(|t| &t.tensor);
        let mut cache = NodeCache::None;
        let mut running = None;
        let out = match node.op {
            Op::Input => x.clone(),
            Op::Conv { .. } | Op::DepthwiseConv { .. } | Op::PointwiseConv { .. } => exec
                .conv2d(ins[0], &p[0].tensor, bias(1), conv_params(&node.op, ins[0].shape().c))
                .map_err(err)?,
            Op::Vac { .. } => {
                let w = VacWeights {
                    depthwise: &p[0].tensor,
                    down_weight: &p[1].tensor,
                    down_bias: &p[2].tensor,
                    up_weight: &p[3].tensor,
                    gate_bias: &p[4].tensor,
                };
                let (out, c) = vac_forward(ins[0], &vac_params(&node.op), &w, exec).map_err(err)?;
                cache = NodeCache::Vac(c);
                out
            }
            Op::Aads { blur_size, stride } => aads_forward(ins[0], &AadsParams::new(blur_size, stride), exec).map_err(err)?,
            Op::Maxpool { kernel, stride } => {
                let (out, idx) = ops::max_pool2d_with_indices(ins[0], kernel, stride, PoolMode::Floor).map_err(err)?;
                cache = NodeCache::Pool(idx);
                out
            }
            Op::Relu => ops::relu(ins[0]),
            Op::Batchnorm => {
                let mut mean = p[2].tensor.data().to_vec();
                let mut var = p[3].tensor.data().to_vec();
                let (out, c) = ops::batch_norm(
                    ins[0],
                    p[0].tensor.data(),
                    p[1].tensor.data(),
                    &mut mean,
                    &mut var,
                    T::from_f64_lossy(BN_EPS),
                    T::from_f64_lossy(BN_MOMENTUM),
                    bn,
                )
                .map_err(err)?;
                if bn == BnMode::Train {
                    running = Some((mean, var));
                }
                cache = NodeCache::Norm(c);
                out
            }
            Op::Gap => ops::global_avg_pool(ins[0]).map_err(err)?,
            Op::Fc { .. } => exec.fully_connected(ins[0], &p[0].tensor, bias(1)).map_err(err)?,
            Op::Concat => ops::concat_channels(&ins).map_err(err)?,
            Op::Output => ins[0].clone(),
        };
        Ok((out, cache, running))
    }

    /// Nodes that need an output gradient when only the flagged parameters
    /// are differentiated: owners of a flagged parameter and everything
    /// downstream of one.
    pub fn live_nodes(&self, wanted: &[bool]) -> Vec<bool> {
        let mut live = vec![false; self.spec.nodes.len()];
        for &i in &self.topo.order {
            live[i] = self.slots[i].clone().any(|k| wanted[k]) || self.topo.inputs[i].iter().any(|&j| live[j]);
        }
        live
    }

    /// Frozen nodes whose outputs feed a live node: the only values a
    /// partial recomputation needs from a previous pass.
    pub fn frontier(&self, live: &[bool]) -> Vec<bool> {
        let mut keep = vec![false; live.len()];
        for (i, ins) in self.topo.inputs.iter().enumerate() {
            if live[i] {
                for &j in ins {
                    if !live[j] {
                        keep[j] = true;
                    }
                }
            }
        }
        keep
    }

    /// Gradients of the loss with respect to the flagged parameters, given
    /// the gradient with respect to the network output. Entries for
    /// unflagged parameters are `None`.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let live = self.live_nodes(wanted);
        let n = self.spec.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut pgrads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        if !live[self.topo.output] {
            return Ok(pgrads);
        }
        grads[self.topo.output] = Some(grad_out.clone());
        for &i in self.topo.order.iter().rev() {
            let Some(g) = grads[i].take() else { continue };
            if !live[i] {
                continue;
            }
            let node = &self.spec.nodes[i];
            let err = tensor_err(&node.id);
            let slot = self.slots[i].clone();
            let p = &self.params[slot.clone()];
            let in_idx = &self.topo.inputs[i];
            let input = |k: usize| trace.outputs[in_idx[k]].as_ref().expect("trace holds inputs of live nodes");
            let mut local: Vec<Tensor<T>> = Vec::new();
            let input_grads: Vec<Tensor<T>> = match node.op {
                Op::Input => Vec::new(),
                Op::Conv { .. } | Op::DepthwiseConv { .. } | Op::PointwiseConv { .. } => {
                    let x = input(0);
                    let cp = conv_params(&node.op, x.shape().c);
                    let has_bias = p.len() > 1;
                    if live[in_idx[0]] {
                        let r = conv2d_backward(x, &p[0].tensor, has_bias, cp, &g).map_err(err)?;
                        local.push(r.weight);
                        local.extend(r.bias);
                        vec![r.input]
                    } else {
                        let r = conv2d_backward_params(x, &p[0].tensor, has_bias, cp, &g).map_err(err)?;
                        local.push(r.weight);
                        local.extend(r.bias);
                        Vec::new()
                    }
                }
                Op::Vac { .. } => {
                    let NodeCache::Vac(c) = &trace.caches[i] else {
                        panic!("missing vac cache for `{}`", node.id)
                    };
                    let w = VacWeights {
                        depthwise: &p[0].tensor,
                        down_weight: &p[1].tensor,
                        down_bias: &p[2].tensor,
                        up_weight: &p[3].tensor,
                        gate_bias: &p[4].tensor,
                    };
                    let r = vac_backward(input(0), &vac_params(&node.op), &w, c, &g).map_err(err)?;
                    local.extend([r.depthwise, r.down_weight, r.down_bias, r.up_weight, r.gate_bias]);
                    vec![r.input]
                }
                Op::Aads { blur_size, stride } => {
                    vec![aads_backward(input(0), &AadsParams::new(blur_size, stride), &g).map_err(err)?]
                }
                Op::Maxpool { .. } => {
                    let NodeCache::Pool(idx) = &trace.caches[i] else {
                        panic!("missing pool cache for `{}`", node.id)
                    };
                    vec![ops::max_pool2d_backward(input(0).shape(), idx, &g)]
                }
                Op::Relu => vec![ops::relu_backward(input(0), &g)],
                Op::Batchnorm => {
                    let NodeCache::Norm(c) = &trace.caches[i] else {
                        panic!("missing normalization cache for `{}`", node.id)
                    };
                    let (gx, gg, gb) = ops::batch_norm_backward(c, p[0].tensor.data(), &g);
                    local.extend([Tensor::vector(gg), Tensor::vector(gb)]);
                    vec![gx]
                }
                Op::Gap => vec![ops::global_avg_pool_backward(input(0).shape(), &g)],
                Op::Fc { .. } => {
                    let (gx, gw, gb) = ops::fully_connected_backward(input(0), &p[0].tensor, &g).map_err(err)?;
                    local.push(gw);
                    if p.len() > 1 {
                        local.push(gb);
                    }
                    vec![gx]
                }
                Op::Concat => {
                    let sizes: Vec<usize> = (0..in_idx.len()).map(|k| input(k).shape().c).collect();
                    ops::split_channels(&g, &sizes).map_err(err)?
                }
                Op::Output => vec![g],
            };
            for (k, t) in slot.zip(local) {
                if wanted[k] {
                    let shaped = t.reshape(self.params[k].tensor.shape()).map_err(tensor_err(&node.id))?;
                    pgrads[k] = Some(shaped);
                }
            }
            for (&j, gj) in in_idx.iter().zip(input_grads) {
                if !live[j] {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gj.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(pgrads)
    }

    /// Argmax class per sample (ties resolve to the lower index).
    pub fn classify(&self, x: &Tensor<T>, exec: Exec) -> Result<Vec<usize>> {
        let logits = self.forward(x, exec)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax of an (N, K, 1, 1) tensor; the first maximum wins.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
