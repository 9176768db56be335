//! Central-difference checks of analytic gradients, one family per op or layer.
//!
//! Every case projects the op output onto a fixed random tensor `R`, so the
//! scalar being differentiated is `sum(out * R)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenet_core::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SHAPES_PER_FAMILY: usize = 20;

pub struct Report {
    pub family: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Distinct values at least 0.1 apart and at least 0.05 from zero, in random order.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64) * 0.1 + 0.05).collect();
    values.shuffle(rng);
    Tensor::from_vec(shape.to_vec(), values).unwrap()
}

fn projection(graph_out: &Tensor, a: &Tensor) -> f64 {
    graph_out.data().iter().zip(a.data()).map(|(x, y)| x * y).sum()
}

/// Relative error `|a - n| / (|a| + |n|)` over whole gradient tensors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic) + norm(numeric);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Largest relative error over the inputs listed in `wrt`.
pub fn check<F>(inputs: &[Tensor], wrt: &[usize], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let shape = eval(inputs)?.shape().to_vec();
    let r = uniform(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if wrt.contains(&i) { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let proj = g.mul_const(out, r.clone())?;
    let loss = g.sum(proj);
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for &i in wrt {
        let analytic = g.grad(vars[i]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let base = inputs[i].data()[e];
            probe[i].data_mut()[e] = base + STEP;
            let plus = projection(&eval(&probe)?, &r);
            probe[i].data_mut()[e] = base - STEP;
            let minus = projection(&eval(&probe)?, &r);
            probe[i].data_mut()[e] = base;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn run_family(
    family: &'static str,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng, u64) -> Result<f64>,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..SHAPES_PER_FAMILY {
        worst = worst.max(case(&mut rng, seed * 1000 + i as u64)?);
    }
    Ok(Report { family, cases: SHAPES_PER_FAMILY, worst })
}

pub fn matmul() -> Result<Report> {
    run_family("matmul", 1, |rng, s| {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let inputs = [uniform(&[m, k], rng), uniform(&[k, n], rng)];
        check(&inputs, &[0, 1], s, |g, v| g.matmul(v[0], v[1]))
    })
}

pub fn dense() -> Result<Report> {
    run_family("dense", 2, |rng, s| {
        let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..6));
        let inputs = [uniform(&[b, i], rng), uniform(&[o, i], rng), uniform(&[o], rng)];
        check(&inputs, &[0, 1, 2], s, |g, v| g.linear(v[0], v[1], Some(v[2])))
    })
}

pub fn masked_dense() -> Result<Report> {
    run_family("masked dense", 3, |rng, s| {
        let (b, i, o) = (rng.random_range(1..5), rng.random_range(2..8), rng.random_range(1..6));
        let mask_values = (0..o * i).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(vec![o, i], mask_values)?;
        let inputs = [uniform(&[b, i], rng), uniform(&[o, i], rng), uniform(&[o], rng)];
        check(&inputs, &[0, 1, 2], s, |g, v| {
            let w = g.mul_const(v[1], mask.clone())?;
            g.linear(v[0], w, Some(v[2]))
        })
    })
}

/// Input extent giving `out` outputs for a 3×3 kernel.
fn conv_extent(out: usize, stride: usize, pad: usize) -> usize {
    (out - 1) * stride + 3 - 2 * pad
}

pub fn conv2d() -> Result<Report> {
    run_family("conv2d", 4, |rng, s| {
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let (oh, ow) = (rng.random_range(1..4), rng.random_range(1..4));
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
        let x = uniform(&[n, c, conv_extent(oh, stride, pad), conv_extent(ow, stride, pad)], rng);
        let inputs = [x, uniform(&[o, c, 3, 3], rng), uniform(&[o], rng)];
        check(&inputs, &[0, 1, 2], s, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    })
}

pub fn maxpool2() -> Result<Report> {
    run_family("maxpool2", 5, |rng, s| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4)];
        check(&[separated(&shape, rng)], &[0], s, |g, v| g.maxpool2(v[0]))
    })
}

pub fn relu() -> Result<Report> {
    run_family("relu", 6, |rng, s| {
        let shape = [rng.random_range(1..5), rng.random_range(1..12)];
        check(&[separated(&shape, rng)], &[0], s, |g, v| Ok(g.relu(v[0])))
    })
}

pub fn sigmoid() -> Result<Report> {
    run_family("sigmoid", 7, |rng, s| {
        let shape = [rng.random_range(1..5), rng.random_range(1..12)];
        let x = Tensor::uniform(&shape, 4.0, rng);
        check(&[x], &[0], s, |g, v| Ok(g.sigmoid(v[0])))
    })
}

pub fn kwta() -> Result<Report> {
    run_family("kwta", 8, |rng, s| {
        let shape: Vec<usize> = if rng.random_bool(0.5) {
            vec![rng.random_range(1..4), rng.random_range(2..16)]
        } else {
            vec![rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..4)]
        };
        let width: usize = shape[1..].iter().product();
        let k = rng.random_range(1..width);
        // distinct per sample, so the kept set cannot change under a STEP perturbation
        check(&[separated(&shape, rng)], &[0], s, |g, v| g.kwta(v[0], k))
    })
}

/// Segment weights for `channels × segments × dim` whose winning |response| beats
/// the runner-up by a margin, so the selection is stable under perturbation.
fn stable_segments(channels: usize, segments: usize, ctx: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let dim = ctx.numel();
    loop {
        let u = uniform(&[channels, segments, dim], rng);
        let stable = (0..channels).all(|c| {
            let mut mags: Vec<f64> = (0..segments)
                .map(|j| {
                    let row = &u.data()[(c * segments + j) * dim..(c * segments + j + 1) * dim];
                    row.iter().zip(ctx.data()).map(|(a, b)| a * b).sum::<f64>().abs()
                })
                .collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            mags.len() < 2 || mags[0] - mags[1] > 1e-2
        });
        if stable {
            return u;
        }
    }
}

/// Dense dendritic layer: `gate(x·wᵀ + b, u, c)` wrt `w`, `b` and `u`.
pub fn gate_dense() -> Result<Report> {
    run_family("dendrite gate (dense)", 9, |rng, s| {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
        let (segments, dim) = (rng.random_range(1..5), rng.random_range(1..6));
        let ctx = uniform(&[dim], rng);
        let u = stable_segments(o, segments, &ctx, rng);
        let inputs = [uniform(&[b, i], rng), uniform(&[o, i], rng), uniform(&[o], rng), u];
        check(&inputs, &[0, 1, 2, 3], s, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.gate(y, v[3], &ctx)
        })
    })
}

/// Conv dendritic layer: one gate per output channel.
pub fn gate_conv() -> Result<Report> {
    run_family("dendrite gate (conv)", 10, |rng, s| {
        let (oh, ow) = (rng.random_range(1..3), rng.random_range(1..3));
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
        let (segments, dim) = (rng.random_range(1..4), rng.random_range(1..5));
        let ctx = uniform(&[dim], rng);
        let u = stable_segments(o, segments, &ctx, rng);
        let x = uniform(&[n, c, conv_extent(oh, 1, 1), conv_extent(ow, 1, 1)], rng);
        let inputs = [x, uniform(&[o, c, 3, 3], rng), uniform(&[o], rng), u];
        check(&inputs, &[0, 1, 2, 3], s, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            g.gate(y, v[3], &ctx)
        })
    })
}

pub fn softmax_xent() -> Result<Report> {
    run_family("softmax cross-entropy", 11, |rng, s| {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let x = Tensor::uniform(&[b, c], 3.0, rng);
        check(&[x], &[0], s, |g, v| g.softmax_xent(v[0], &labels))
    })
}

pub fn elementwise() -> Result<Report> {
    run_family("add, mul, scale, flatten", 12, |rng, s| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        let inputs = [uniform(&shape, rng), uniform(&shape, rng)];
        let factor = rng.random_range(-2.0..2.0);
        check(&inputs, &[0, 1], s, |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let sc = g.scale(m, factor);
            g.flatten(sc)
        })
    })
}

pub fn all() -> Vec<fn() -> Result<Report>> {
    vec![
        matmul,
        dense,
        masked_dense,
        conv2d,
        maxpool2,
        relu,
        sigmoid,
        kwta,
        gate_dense,
        gate_conv,
        softmax_xent,
        elementwise,
        model_layers,
    ]
}

/// Whole models (masked dendritic FC and a dendritic conv stack) through
/// `Model::forward` and `accumulate_grads`, against differences of the loss.
pub fn model_layers() -> Result<Report> {
    use sparsenet_core::nn::DendriteOptions;
    use sparsenet_core::{Activation, ArchitectureSpec, LayerSpec, Model, PresetOptions};

    run_family("model layers", 13, |rng, s| {
        let classes = rng.random_range(2..5);
        let dim = rng.random_range(1..5);
        let segments = rng.random_range(1..4);
        let spec = if s % 2 == 0 {
            let opts = PresetOptions {
                ff_weight_density: 0.5,
                dendrites: Some(DendriteOptions { segments, context_dim: dim }),
                ..PresetOptions::default()
            };
            ArchitectureSpec::fc("fc", &[1, 2, 3], &[rng.random_range(2..6), rng.random_range(2..6)], classes, &opts)
        } else {
            ArchitectureSpec {
                name: "conv".into(),
                input: vec![rng.random_range(1..3), 4, 4],
                layers: vec![
                    LayerSpec::Conv {
                        out_channels: rng.random_range(1..4),
                        stride: 1,
                        pad: 1,
                        activation: Activation::Relu,
                        dendrites: Some(segments),
                    },
                    LayerSpec::MaxPool,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out: classes, activation: Activation::None, weight_density: None, dendrites: None },
                ],
                context_dim: Some(dim),
            }
        };
        let mut model = Model::build(&spec, s)?;
        let batch = rng.random_range(1..4);
        let mut input_shape = vec![batch];
        input_shape.extend(&spec.input);
        let x = uniform(&input_shape, rng);
        let ctx = uniform(&[dim], rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let loss_of = |m: &Model| -> Result<f64> {
            let mut g = Graph::new();
            let pass = m.forward(&mut g, &x, Some(&ctx), true)?;
            let loss = g.softmax_xent(pass.logits, &labels)?;
            Ok(g.value(loss).data()[0])
        };

        model.zero_grad();
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &x, Some(&ctx), true)?;
        let loss = g.softmax_xent(pass.logits, &labels)?;
        g.backward(loss)?;
        model.accumulate_grads(&g, &pass)?;

        let base = model.values();
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for (pi, grad) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; grad.len()];
            for (e, slot) in numeric.iter_mut().enumerate() {
                let mut values = base.clone();
                let v = values[pi].data()[e];
                values[pi].data_mut()[e] = v + STEP;
                probe.load_values(&values)?;
                let plus = loss_of(&probe)?;
                values[pi].data_mut()[e] = v - STEP;
                probe.load_values(&values)?;
                let minus = loss_of(&probe)?;
                *slot = (plus - minus) / (2.0 * STEP);
            }
            worst = worst.max(relative_error(grad, &numeric));
        }
        Ok(worst)
    })
}
