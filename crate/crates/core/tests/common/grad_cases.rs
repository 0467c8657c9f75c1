
use celldefect::condenser::{aads_backward, aads_forward, vac_backward, vac_forward, AadsParams, Exec, VacParams, VacWeights};
use celldefect::tensor::ops::{self, BnMode, PoolMode};
use celldefect::tensor::{
    conv2d_backward, grad_check, pad, pad_backward, probe_loss, Conv2dParams, GradCheckReport, Padding, Result,
};
use celldefect::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-5;

pub type Case = fn(&mut ChaCha8Rng) -> GradCheckReport;

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("depthwise", depthwise),
    ("pointwise", pointwise),
    ("fully_connected", fully_connected),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("max_pool", max_pool),
    ("global_avg_pool", global_avg_pool),
    ("upsample_nearest", upsample_nearest),
    ("center_crop", center_crop),
    ("padding", padding),
    ("concat_channels", concat_channels),
    ("elementwise_mul", elementwise_mul),
    ("add_channel_bias", add_channel_bias),
    ("batch_norm", batch_norm),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("aads", aads),
    ("vac", vac),
];

/// Runs `case` on every seeded instance; returns the worst relative error
/// or a description of the first failing instance.
pub fn check(name: &str, case: Case) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let report = case(&mut rng);
        if !report.passed {
            return Err(format!("{name} instance {seed}: {report:?}"));
        }
        worst = worst.max(report.worst());
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn probe_for(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    rand_tensor(rng, shape.dims())
}

pub fn conv2d(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (ci, co, k) = (rng.random_range(1..4), rng.random_range(1..4), [1, 3, 5][rng.random_range(0..3)]);
    let stride = rng.random_range(1..3);
    let pad_n = rng.random_range(0..=k / 2);
    let padding = if rng.random_bool(0.5) && pad_n > 0 { Padding::Reflect(pad_n) } else { Padding::Zero(pad_n) };
    let h = rng.random_range(k.max(pad_n + 1)..k + 5);
    let params = Conv2dParams::new(stride, padding);
    let shape = [rng.random_range(1..3), ci, h, h + 1];
    let x = rand_tensor(rng, shape);
    let w = rand_tensor(rng, [co, ci, k, k]);
    let b = rand_tensor(rng, [1, 1, 1, co]);
    let out = Exec::Reference.conv2d(&x, &w, Some(&b), params).unwrap();
    let probe = probe_for(rng, out.shape());
    grad_check(
        |t| {
            let out = Exec::Reference.conv2d(&t[0], &t[1], Some(&t[2]), params)?;
            let (loss, g) = probe_loss(&out, &probe);
            let gr = conv2d_backward(&t[0], &t[1], true, params, &g)?;
            Ok((loss, vec![gr.input, gr.weight, gr.bias.unwrap()]))
        },
        &[x, w, b],
        TOL,
    )
}

pub fn depthwise(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let c = rng.random_range(1..5);
    let k = [3, 5][rng.random_range(0..2)];
    let params = Conv2dParams::depthwise(c, rng.random_range(1..3), Padding::Zero(k / 2));
    let shape = [1, c, rng.random_range(k..k + 5), rng.random_range(k..k + 5)];
    let x = rand_tensor(rng, shape);
    let w = rand_tensor(rng, [c, 1, k, k]);
    let b = rand_tensor(rng, [1, 1, 1, c]);
    let probe = probe_for(rng, Exec::Reference.conv2d(&x, &w, Some(&b), params).unwrap().shape());
    grad_check(
        |t| {
            let out = Exec::Fast.conv2d(&t[0], &t[1], Some(&t[2]), params)?;
            let (loss, g) = probe_loss(&out, &probe);
            let gr = conv2d_backward(&t[0], &t[1], true, params, &g)?;
            Ok((loss, vec![gr.input, gr.weight, gr.bias.unwrap()]))
        },
        &[x, w, b],
        TOL,
    )
}

pub fn pointwise(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (ci, co) = (rng.random_range(1..6), rng.random_range(1..6));
    let params = Conv2dParams::new(rng.random_range(1..3), Padding::Zero(0));
    let shape = [rng.random_range(1..3), ci, rng.random_range(2..7), rng.random_range(2..7)];
    let x = rand_tensor(rng, shape);
    let w = rand_tensor(rng, [co, ci, 1, 1]);
    let probe = probe_for(rng, Exec::Reference.conv2d(&x, &w, None, params).unwrap().shape());
    grad_check(
        |t| {
            let out = Exec::Fast.conv2d(&t[0], &t[1], None, params)?;
            let (loss, g) = probe_loss(&out, &probe);
            let gr = conv2d_backward(&t[0], &t[1], false, params, &g)?;
            Ok((loss, vec![gr.input, gr.weight]))
        },
        &[x, w],
        TOL,
    )
}

pub fn fully_connected(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, c, h, d_out) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let x = rand_tensor(rng, [n, c, h, h]);
    let w = rand_tensor(rng, [d_out, c * h * h, 1, 1]);
    let b = rand_tensor(rng, [1, 1, 1, d_out]);
    let probe = rand_tensor(rng, [n, d_out, 1, 1]);
    grad_check(
        |t| {
            let out = ops::fully_connected(&t[0], &t[1], Some(&t[2]))?;
            let (loss, g) = probe_loss(&out, &probe);
            let (gx, gw, gb) = ops::fully_connected_backward(&t[0], &t[1], &g)?;
            Ok((loss, vec![gx, gw, gb]))
        },
        &[x, w, b],
        TOL,
    )
}

/// Checks a single-input, shape-defined op.
fn unary(
    rng: &mut ChaCha8Rng,
    shape: [usize; 4],
    fwd: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    bwd: impl Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> GradCheckReport {
    let x = rand_tensor(rng, shape);
    let probe = probe_for(rng, fwd(&x).unwrap().shape());
    grad_check(
        |t| {
            let out = fwd(&t[0])?;
            let (loss, g) = probe_loss(&out, &probe);
            Ok((loss, vec![bwd(&t[0], &out, &g)?]))
        },
        &[x],
        TOL,
    )
}

fn small_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..8), rng.random_range(3..8)]
}

pub fn relu(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    unary(rng, s, |x| Ok(ops::relu(x)), |x, _, g| Ok(ops::relu_backward(x, g)))
}

pub fn sigmoid(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    unary(rng, s, |x| Ok(ops::sigmoid(x)), |_, y, g| Ok(ops::sigmoid_backward(y, g)))
}

pub fn max_pool(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let (k, stride) = (rng.random_range(2..4), rng.random_range(1..3));
    let mode = if rng.random_bool(0.5) { PoolMode::Floor } else { PoolMode::Cover };
    unary(
        rng,
        s,
        |x| Ok(ops::max_pool2d_with_indices(x, k, stride, mode)?.0),
        |x, _, g| {
            let (_, idx) = ops::max_pool2d_with_indices(x, k, stride, mode)?;
            Ok(ops::max_pool2d_backward(x.shape(), &idx, g))
        },
    )
}

pub fn global_avg_pool(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    unary(rng, s, ops::global_avg_pool, |x, _, g| Ok(ops::global_avg_pool_backward(x.shape(), g)))
}

pub fn upsample_nearest(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let f = rng.random_range(1..4);
    unary(rng, s, |x| ops::upsample_nearest(x, f), |x, _, g| Ok(ops::upsample_nearest_backward(x.shape(), f, g)))
}

pub fn center_crop(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let (h, w) = (rng.random_range(1..=s[2]), rng.random_range(1..=s[3]));
    unary(rng, s, |x| ops::center_crop(x, h, w), |x, _, g| Ok(ops::center_crop_backward(x.shape(), g)))
}

pub fn padding(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let p = rng.random_range(1..3);
    let padding = if rng.random_bool(0.5) { Padding::Reflect(p) } else { Padding::Zero(p) };
    unary(rng, s, |x| Ok(pad(x, padding)), |x, _, g| Ok(pad_backward(g, x.shape(), padding)))
}

pub fn concat_channels(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let c2 = rng.random_range(1..4);
    let a = rand_tensor(rng, s);
    let b = rand_tensor(rng, [s[0], c2, s[2], s[3]]);
    let probe = rand_tensor(rng, [s[0], s[1] + c2, s[2], s[3]]);
    grad_check(
        |t| {
            let out = ops::concat_channels(&[&t[0], &t[1]])?;
            let (loss, g) = probe_loss(&out, &probe);
            Ok((loss, ops::split_channels(&g, &[s[1], c2])?))
        },
        &[a, b],
        TOL,
    )
}

pub fn elementwise_mul(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let (a, b, probe) = (rand_tensor(rng, s), rand_tensor(rng, s), rand_tensor(rng, s));
    grad_check(
        |t| {
            let out = ops::elementwise_mul(&t[0], &t[1])?;
            let (loss, g) = probe_loss(&out, &probe);
            let (ga, gb) = ops::elementwise_mul_backward(&t[0], &t[1], &g);
            Ok((loss, vec![ga, gb]))
        },
        &[a, b],
        TOL,
    )
}

pub fn add_channel_bias(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let (x, b, probe) = (rand_tensor(rng, s), rand_tensor(rng, [1, 1, 1, s[1]]), rand_tensor(rng, s));
    grad_check(
        |t| {
            let out = ops::add_channel_bias(&t[0], t[1].data())?;
            let (loss, g) = probe_loss(&out, &probe);
            let gb = Tensor::vector(ops::channel_sums(&g));
            Ok((loss, vec![g, gb]))
        },
        &[x, b],
        TOL,
    )
}

pub fn batch_norm(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let c = s[1];
    let x = rand_tensor(rng, s);
    let gamma = rand_tensor(rng, [1, 1, 1, c]);
    let beta = rand_tensor(rng, [1, 1, 1, c]);
    let probe = rand_tensor(rng, s);
    grad_check(
        |t| {
            let (mut m, mut v) = (vec![0.0; c], vec![1.0; c]);
            let (out, cache) = ops::batch_norm(&t[0], t[1].data(), t[2].data(), &mut m, &mut v, 1e-5, 0.1, BnMode::Train)?;
            let (loss, g) = probe_loss(&out, &probe);
            let (gx, gg, gb) = ops::batch_norm_backward(&cache, t[1].data(), &g);
            Ok((loss, vec![gx, Tensor::vector(gg), Tensor::vector(gb)]))
        },
        &[x, gamma, beta],
        TOL,
    )
}

pub fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let logits = rand_tensor(rng, [n, k, 1, 1]).map(|v| 3.0 * v);
    grad_check(
        |t| {
            let (loss, g) = ops::softmax_cross_entropy(&t[0], &labels)?;
            Ok((loss, vec![g]))
        },
        &[logits],
        TOL,
    )
}

pub fn aads(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = small_shape(rng);
    let p = AadsParams::new([1, 3, 5][rng.random_range(0..3)], rng.random_range(1..4));
    let s = [s[0], s[1], s[2].max(p.blur_size), s[3].max(p.blur_size)];
    unary(rng, s, |x| aads_forward(x, &p, Exec::Reference), |x, _, g| aads_backward(x, &p, g))
}

pub fn vac(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let c = rng.random_range(1..5);
    let p = VacParams {
        condense_kernel: rng.random_range(1..4),
        condense_stride: rng.random_range(2..4),
        embed_mid_channels: rng.random_range(1..=c),
        embed_kernel: [1, 3][rng.random_range(0..2)],
    };
    let shape = [rng.random_range(1..3), c, rng.random_range(3..9), rng.random_range(3..9)];
    let x = rand_tensor(rng, shape);
    let mut inputs = vec![x];
    for shape in p.weight_shapes(c) {
        inputs.push(rand_tensor(rng, shape.dims()));
    }
    let weights = |t: &[Tensor<f64>]| -> [Tensor<f64>; 5] { [1, 2, 3, 4, 5].map(|i| t[i].clone()) };
    let probe = rand_tensor(rng, inputs[0].shape().dims());
    grad_check(
        |t| {
            let [dw, down, down_b, up, gate] = weights(t);
            let w = VacWeights {
                depthwise: &dw,
                down_weight: &down,
                down_bias: &down_b,
                up_weight: &up,
                gate_bias: &gate,
            };
            let (out, cache) = vac_forward(&t[0], &p, &w, Exec::Reference)?;
            let (loss, g) = probe_loss(&out, &probe);
            let gr = vac_backward(&t[0], &p, &w, &cache, &g)?;
            Ok((loss, vec![gr.input, gr.depthwise, gr.down_weight, gr.down_bias, gr.up_weight, gr.gate_bias]))
        },
        &inputs,
        TOL,
    )
}

