//! Finite-difference check of every differentiable primitive plus a composed
//! transformer block, repeated over several seeds.

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::nn::block::BlockSpec;
use crate::nn::{Activation, Bound, Init, ParamStore, TransformerBlock};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Every primitive name covered by [`run_gradient_suite`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "add_scalar",
    "exp",
    "log",
    "gelu",
    "relu",
    "clamp",
    "square",
    "matmul",
    "transpose",
    "conv2d",
    "conv_transpose2d",
    "upsample_bilinear",
    "softmax",
    "layernorm",
    "concat",
    "slice",
    "split",
    "reshape",
    "permute",
    "sum_axis",
    "sum",
    "mean",
    "index_select",
    "transformer_block",
];

type CaseFn = fn(&mut Rng64, u64, &GradCheckOptions) -> Result<GradCheckReport>;

/// Scalar `sum(y * W)` with fixed random `W`, so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Rng64::new(seed ^ 0x5EED).uniform_tensor(g.dims(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn uniform(rng: &mut Rng64, dims: &[usize]) -> Tensor {
    rng.uniform_tensor(dims, -1.0, 1.0)
}

/// Values with magnitude in `[margin, 1]` and random sign, so kinked
/// functions are probed away from zero.
fn away_from_zero(rng: &mut Rng64, dims: &[usize], margin: f64) -> Tensor {
    let mut t = rng.uniform_tensor(dims, margin, 1.0);
    for v in t.data_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    t
}

macro_rules! unary_case {
    ($name:literal, $dims:expr, $gen:expr, |$g:ident, $x:ident| $body:expr) => {
        |rng: &mut Rng64, seed: u64, opts: &GradCheckOptions| {
            #[allow(clippy::redundant_closure_call)]
            let x = ($gen)(rng, $dims);
            grad_check(
                $name,
                |$g: &mut Graph, v: &[Var]| {
                    let $x = v[0];
                    let y = $body?;
                    project($g, y, seed)
                },
                &[x],
                opts,
            )
        }
    };
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 4]), uniform(rng, &[3, 1])];
            grad_check("add", |g, v| { let y = g.add(v[0], v[1])?; project(g, y, seed) }, &inputs, opts)
        }),
        ("sub", |rng, seed, opts| {
            let inputs = [uniform(rng, &[3, 4]), uniform(rng, &[2, 3, 4])];
            grad_check("sub", |g, v| { let y = g.sub(v[0], v[1])?; project(g, y, seed) }, &inputs, opts)
        }),
        ("mul", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 4]), uniform(rng, &[1, 4])];
            grad_check("mul", |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, seed) }, &inputs, opts)
        }),
        ("div", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3]), rng.uniform_tensor(&[2, 3], 0.5, 2.0)];
            grad_check("div", |g, v| { let y = g.div(v[0], v[1])?; project(g, y, seed) }, &inputs, opts)
        }),
        ("scale", unary_case!("scale", &[3, 4], uniform, |g, x| g.scale(x, -1.7))),
        ("neg", unary_case!("neg", &[3, 4], uniform, |g, x| g.neg(x))),
        ("add_scalar", unary_case!("add_scalar", &[3, 4], uniform, |g, x| {
            let y = g.add_scalar(x, 0.3)?;
            g.square(y)
        })),
        ("exp", unary_case!("exp", &[3, 4], uniform, |g, x| g.exp(x))),
        ("log", unary_case!("log", &[3, 4], |r: &mut Rng64, d: &[usize]| r.uniform_tensor(d, 0.5, 2.0), |g, x| g.log(x))),
        ("gelu", unary_case!("gelu", &[3, 4], |r: &mut Rng64, d: &[usize]| r.uniform_tensor(d, -3.0, 3.0), |g, x| g.gelu(x))),
        ("relu", unary_case!("relu", &[3, 4], |r: &mut Rng64, d: &[usize]| away_from_zero(r, d, 0.05), |g, x| g.relu(x))),
        ("clamp", unary_case!("clamp", &[4, 4], |r: &mut Rng64, d: &[usize]| {
            let mut t = away_from_zero(r, d, 0.05);
            // Keep every value off the clamp bounds at +-0.5.
            t.data_mut().iter_mut().for_each(|v| if (v.abs() - 0.5).abs() < 0.05 { *v *= 0.8 });
            t
        }, |g, x| g.clamp(x, -0.5, 0.5))),
        ("square", unary_case!("square", &[3, 4], uniform, |g, x| g.square(x))),
        ("matmul", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 4]), uniform(rng, &[4, 5])];
            grad_check("matmul", |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, seed) }, &inputs, opts)
        }),
        ("transpose", unary_case!("transpose", &[2, 3, 4], uniform, |g, x| g.transpose(x))),
        ("conv2d", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 7, 7]), uniform(rng, &[4, 3, 3, 3]), uniform(rng, &[4])];
            grad_check(
                "conv2d",
                |g, v| {
                    let a = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    let b = g.conv2d(v[0], v[1], None, 2, 1)?;
                    let pa = project(g, a, seed)?;
                    let pb = project(g, b, seed + 1)?;
                    g.add(pa, pb)
                },
                &inputs,
                opts,
            )
        }),
        ("conv_transpose2d", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 3, 3]), uniform(rng, &[3, 2, 4, 4]), uniform(rng, &[2])];
            grad_check(
                "conv_transpose2d",
                |g, v| { let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?; project(g, y, seed) },
                &inputs,
                opts,
            )
        }),
        ("upsample_bilinear", unary_case!("upsample_bilinear", &[2, 2, 3, 4], uniform, |g, x| {
            let a = g.upsample_bilinear(x, 2)?;
            g.upsample_bilinear(a, 2)
        })),
        ("softmax", unary_case!("softmax", &[2, 3, 4], |r: &mut Rng64, d: &[usize]| r.uniform_tensor(d, -3.0, 3.0), |g, x| {
            let a = g.softmax(x, 1)?;
            let b = g.softmax(x, 2)?;
            g.mul(a, b)
        })),
        ("layernorm", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 6]), uniform(rng, &[6]), uniform(rng, &[6])];
            grad_check(
                "layernorm",
                |g, v| { let y = g.layernorm(v[0], v[1], v[2], 1e-5)?; project(g, y, seed) },
                &inputs,
                opts,
            )
        }),
        ("concat", |rng, seed, opts| {
            let inputs = [uniform(rng, &[2, 3, 2]), uniform(rng, &[2, 1, 2]), uniform(rng, &[2, 2, 2])];
            grad_check(
                "concat",
                |g, v| { let y = g.concat(&[v[0], v[1], v[2]], 1)?; project(g, y, seed) },
                &inputs,
                opts,
            )
        }),
        ("slice", unary_case!("slice", &[2, 6, 3], uniform, |g, x| g.slice(x, 1, 2, 3))),
        ("split", unary_case!("split", &[2, 7, 3], uniform, |g, x| {
            let parts = g.split(x, &[2, 4, 1], 1)?;
            let a = g.mul(parts[0], parts[0])?;
            let b = g.sum_axis(parts[1], 1)?;
            let c = g.add(parts[2], b)?;
            let c = g.scale(c, 0.5)?;
            g.concat(&[a, c], 1)
        })),
        ("reshape", unary_case!("reshape", &[2, 3, 4], uniform, |g, x| {
            let y = g.reshape(x, &[4, 6])?;
            g.square(y)
        })),
        ("permute", unary_case!("permute", &[2, 3, 4], uniform, |g, x| g.permute(x, &[2, 0, 1]))),
        ("sum_axis", unary_case!("sum_axis", &[2, 3, 4], uniform, |g, x| {
            let y = g.sum_axis(x, 1)?;
            g.square(y)
        })),
        ("sum", unary_case!("sum", &[2, 3], uniform, |g, x| {
            let s = g.sum(x)?;
            g.square(s)
        })),
        ("mean", unary_case!("mean", &[2, 3], uniform, |g, x| {
            let s = g.mean(x)?;
            g.square(s)
        })),
        ("index_select", unary_case!("index_select", &[5, 2], uniform, |g, x| g.index_select(x, &[4, 0, 0, 2, 4, 4]))),
        ("transformer_block", |rng, seed, opts| {
            let spec = BlockSpec {
                dim: 16,
                heads: 2,
                hidden: 64,
                window: Some(3),
                activation: Activation::Gelu,
                eps: 1e-5,
            };
            let mut store = ParamStore::new();
            let block = TransformerBlock::new(
                &mut Init {
                    store: &mut store,
                    rng: Rng64::new(rng.next_u64()),
                    std: 0.3,
                },
                "block",
                &spec,
            );
            // Move norms and biases off their identity initial values.
            for t in store.tensors_mut() {
                for v in t.data_mut() {
                    *v += rng.uniform_in(-0.1, 0.1);
                }
            }
            let mut inputs = vec![uniform(rng, &[1, 9, 16])];
            inputs.extend(store.iter().map(|(_, t)| t.clone()));
            grad_check(
                "transformer_block",
                |g, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let y = block.forward(g, &p, v[0])?;
                    project(g, y, seed)
                },
                &inputs,
                opts,
            )
        }),
    ]
}

/// Checks every entry of [`PRIMITIVES`] for `seeds` consecutive seeds
/// starting at `root_seed`, with central differences at `h = 1e-5` and
/// relative tolerance `1e-4`. One report per (primitive, seed).
pub fn run_gradient_suite(root_seed: u64, seeds: usize) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (name, case) in cases() {
        for k in 0..seeds as u64 {
            let seed = root_seed.wrapping_add(k);
            let mut rng = Rng64::with_stream(seed, fnv(name));
            let opts = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            let mut report = case(&mut rng, seed, &opts)?;
            report.name = format!("{name} (seed {seed})");
            reports.push(report);
        }
    }
    Ok(reports)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
