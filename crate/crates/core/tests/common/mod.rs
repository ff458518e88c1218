#![allow(dead_code)]

use std::sync::Arc;

use ediff::conditioning::ContextBatch;
use ediff::engine::{central_difference, CustomUnary, Tape, Tensor, TensorError, Var};
use ediff::error::Result;
use ediff::nets::{build_denoiser, DenoiserModel, DenoiserNetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Scalarized = Box<dyn Fn(&mut Tape, Var) -> std::result::Result<Var, TensorError>>;

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// entries below the finite-difference resolution from dominating.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

struct Cube;

impl CustomUnary for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }
    fn forward(&self, x: &Tensor) -> Tensor {
        x.map(|v| v * v * v)
    }
    fn backward(&self, x: &Tensor, _y: &Tensor, grad: &Tensor) -> Tensor {
        x.zip_map(grad, |v, g| 3.0 * v * v * g).expect("same shape")
    }
}

/// Every op reduced to a scalar through a fixed random weighting, with an
/// input at which the op is smooth.
pub fn op_cases() -> Vec<(&'static str, Scalarized, Tensor)> {
    fn weighted(t: &mut Tape, y: Var, seed: u64) -> std::result::Result<Var, TensorError> {
        let w = t.constant(normal(t.shape(y), seed))?;
        let p = t.mul(y, w)?;
        t.sum_all(p)
    }
    let s = [3, 4];
    let mut cases: Vec<(&'static str, Scalarized, Tensor)> = Vec::new();
    macro_rules! case {
        ($name:expr, $input:expr, |$t:ident, $x:ident| $body:expr) => {
            cases.push((
                $name,
                Box::new(move |$t: &mut Tape, $x: Var| {
                    let y = $body?;
                    weighted($t, y, 99)
                }),
                $input,
            ));
        };
    }
    case!("add", normal(&s, 1), |t, x| {
        let c = t.constant(normal(&[3, 4], 2))?;
        t.add(x, c)
    });
    case!("add_self", normal(&s, 1), |t, x| t.add(x, x));
    case!("sub", normal(&s, 1), |t, x| {
        let c = t.constant(normal(&[3, 4], 2))?;
        t.sub(c, x)
    });
    case!("mul", normal(&s, 1), |t, x| {
        let c = t.constant(normal(&[3, 4], 2))?;
        t.mul(x, c)
    });
    case!("div_num", normal(&s, 1), |t, x| {
        let c = t.constant(positive(&[3, 4], 2))?;
        t.div(x, c)
    });
    case!("div_den", positive(&s, 1), |t, x| {
        let c = t.constant(normal(&[3, 4], 2))?;
        t.div(c, x)
    });
    case!("add_scalar", normal(&s, 1), |t, x| t.add_scalar(x, 0.7));
    case!("mul_scalar", normal(&s, 1), |t, x| t.mul_scalar(x, -1.3));
    case!("square", normal(&s, 1), |t, x| t.square(x));
    case!("matmul_lhs", normal(&s, 1), |t, x| {
        let c = t.constant(normal(&[4, 5], 2))?;
        t.matmul(x, c)
    });
    case!("matmul_rhs", normal(&[4, 5], 1), |t, x| {
        let c = t.constant(normal(&[3, 4], 2))?;
        t.matmul(c, x)
    });
    case!("bmm_lhs", normal(&[2, 3, 4], 1), |t, x| {
        let c = t.constant(normal(&[2, 4, 2], 2))?;
        t.bmm(x, c)
    });
    case!("bmm_rhs", normal(&[2, 4, 2], 1), |t, x| {
        let c = t.constant(normal(&[2, 3, 4], 2))?;
        t.bmm(c, x)
    });
    case!("permute", normal(&[2, 3, 4], 1), |t, x| t.permute(x, &[2, 0, 1]));
    case!("permute_inner", normal(&[2, 3, 2, 2], 1), |t, x| t
        .permute(x, &[0, 2, 1, 3]));
    case!("transpose", normal(&[2, 3, 4], 1), |t, x| t.transpose(x));
    case!("reshape", normal(&s, 1), |t, x| t.reshape(x, &[2, 6]));
    case!("concat", normal(&s, 1), |t, x| {
        let c = t.constant(normal(&[3, 2], 2))?;
        t.concat(&[x, c, x], 1)
    });
    case!("slice", normal(&[3, 5], 1), |t, x| t.slice(x, 1, 1, 3));
    case!("repeat", normal(&s, 1), |t, x| t.repeat(x, 1, 3));
    case!("sum_axis", normal(&[2, 3, 4], 1), |t, x| t.sum(x, 1));
    case!("mean_axis", normal(&[2, 3, 4], 1), |t, x| t.mean(x, 2));
    case!("sum_all", normal(&s, 1), |t, x| t.sum_all(x));
    case!("mean_all", normal(&s, 1), |t, x| t.mean_all(x));
    case!("max_all", normal(&s, 1), |t, x| t.max_all(x));
    case!("exp", normal(&s, 1), |t, x| t.exp(x));
    case!("log", positive(&s, 1), |t, x| t.log(x));
    case!("sqrt", positive(&s, 1), |t, x| t.sqrt(x));
    case!("silu", normal(&s, 1), |t, x| t.silu(x));
    case!("softmax", normal(&[2, 3, 5], 1), |t, x| t.softmax(x));
    case!("layer_norm", normal(&[3, 6], 1), |t, x| t.layer_norm(x));
    case!("custom", normal(&s, 1), |t, x| t.custom(x, Arc::new(Cube)));
    cases
}

pub fn random_context(b: usize, nk: usize, d: usize, seed: u64) -> ContextBatch {
    let mut c = ContextBatch::empty(b, nk, d);
    c.key_tokens = normal(&[b, nk, d], seed);
    c.global = normal(&[b, d], seed + 1);
    c
}

/// The five small nets of the gradient check.
pub fn small_nets() -> Vec<DenoiserNetSpec> {
    let mut unet_attn = DenoiserNetSpec::tiny_unet(4, 2, 4, 1, 4, 13);
    unet_attn.n_heads = 2;
    vec![
        DenoiserNetSpec::mlp(2, 4, 1, 4, 11),
        DenoiserNetSpec::mlp(3, 6, 2, 4, 12),
        unet_attn,
        DenoiserNetSpec::mlp(2, 8, 1, 6, 14),
        DenoiserNetSpec::tiny_unet(4, 1, 4, 1, 4, 15),
    ]
}

fn flatten(model: &DenoiserModel) -> (Tensor, Vec<(String, Vec<usize>)>) {
    let mut data = Vec::new();
    let mut layout = Vec::new();
    for (name, t) in model.params() {
        data.extend_from_slice(t.data());
        layout.push((name.clone(), t.shape().to_vec()));
    }
    (Tensor::from_vec(data), layout)
}

/// A weighted sum of the net output as a function of all parameters packed
/// into one flat vector, with that vector at a random point off the init.
pub fn net_objective(spec: &DenoiserNetSpec, seed: u64, ctx: ContextBatch) -> Result<(Scalarized, Tensor)> {
    // zero-initialized output layers would make every upstream gradient zero
    let mut model = build_denoiser(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for (_, t) in model.params_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (flat, layout) = flatten(&model);
    let b = ctx.len();
    let x = normal(&[b, spec.data_dim], seed);
    let noise: Vec<f64> = (0..b).map(|i| (0.3 + 1.7 * i as f64).ln() / 4.0).collect();
    let weights = normal(&[b, spec.data_dim], seed + 9);
    let f = move |t: &mut Tape, v: Var| -> std::result::Result<Var, TensorError> {
        let wrap = |op: &'static str| move |e: ediff::Error| TensorError::Invalid { op, msg: e.to_string() };
        let mut bound = model.bind(t, false).map_err(wrap("bind"))?;
        let mut offset = 0;
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let part = t.slice(v, 0, offset, n)?;
            let part = t.reshape(part, shape)?;
            bound.set(name, part);
            offset += n;
        }
        let xv = t.constant(x.clone())?;
        let out = model
            .forward(t, &bound, xv, &noise, &ctx, None, None)
            .map_err(wrap("forward"))?;
        let w = t.constant(weights.clone())?;
        let p = t.mul(out, w)?;
        t.sum_all(p)
    };
    Ok((Box::new(f), flat))
}

/// Parameter layout of `spec` in the packing order of [`net_objective`].
pub fn param_layout(spec: &DenoiserNetSpec) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(flatten(&build_denoiser(spec)?).1)
}

/// Analytic and central-difference gradients of [`net_objective`].
pub fn net_gradients(spec: &DenoiserNetSpec, seed: u64, step: f64) -> Result<(Tensor, Tensor)> {
    let ctx = random_context(2, 3, spec.d_embed, seed + 7);
    let (f, flat) = net_objective(spec, seed, ctx)?;
    let mut tape = Tape::new();
    let v = tape.variable(flat.clone())?;
    let loss = f(&mut tape, v)?;
    let analytic = tape
        .backward(loss)?
        .get(v)
        .cloned()
        .expect("gradient reaches parameters");
    let numeric = central_difference(&f, &flat, step)?;
    Ok((analytic, numeric))
}
