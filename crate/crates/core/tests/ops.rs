use vitbis::autodiff::{grad_check, tape_gradients, GradCheckOptions, Graph, Var};
use vitbis::rng::Rng64;
use vitbis::{Error, Tensor};

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn rand(rng: &mut Rng64, dims: &[usize]) -> Tensor {
    rng.uniform_tensor(dims, -1.0, 1.0)
}

fn eval(f: impl FnOnce(&mut Graph) -> vitbis::Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

/// Weighted sum with fixed random weights so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> vitbis::Result<Var> {
    let dims = g.dims(y).to_vec();
    let w = Rng64::new(seed ^ 0xABCD).uniform_tensor(&dims, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, inputs: &[Tensor], tol: f64, f: impl Fn(&mut Graph, &[Var]) -> vitbis::Result<Var>) {
    let opts = GradCheckOptions {
        tolerance: tol,
        ..Default::default()
    };
    let report = grad_check(name, f, inputs, &opts).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn add_examples() {
    let out = eval(|g| {
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        g.add(a, b)
    });
    assert_eq!(out.data(), &[4.0, 6.0]);

    let mut rng = Rng64::new(1);
    let x = rand(&mut rng, &[3, 4]);
    let out = eval(|g| {
        let a = g.constant(x.clone());
        let z = g.constant(Tensor::zeros_like(&x));
        g.add(a, z)
    });
    assert_eq!(out, x);
}

#[test]
fn mul_gradient_is_other_operand() {
    let mut rng = Rng64::new(2);
    let a = rand(&mut rng, &[5]);
    let b = rand(&mut rng, &[5]);
    let f = |g: &mut Graph, v: &[Var]| {
        let m = g.mul(v[0], v[1])?;
        g.sum(m)
    };
    let grads = tape_gradients(&f, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(grads[0], b);
    assert_eq!(grads[1], a);
    check("mul", &[a, b], 1e-6, f);
}

#[test]
fn broadcasting_add_and_errors() {
    let out = eval(|g| {
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 20.0]));
        g.add(a, b)
    });
    assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);

    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]).unwrap());
    let b = g.constant(Tensor::zeros([4]).unwrap());
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn elementwise_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(seed);
        let a = rand(&mut rng, &[2, 3, 4]);
        let b = rand(&mut rng, &[3, 4]);
        let c = rand(&mut rng, &[2, 1, 4]);
        let pos = rng.uniform_tensor(&[2, 3, 4], 0.5, 2.0);
        check("add/sub/mul broadcast", &[a.clone(), b.clone(), c.clone()], 1e-6, |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[2])?;
            let m = g.mul(d, v[1])?;
            project(g, m, seed)
        });
        check("div", &[a.clone(), pos.clone()], 1e-6, |g, v| {
            let q = g.div(v[0], v[1])?;
            project(g, q, seed)
        });
        check("scale/add_scalar", &[a.clone()], 1e-6, |g, v| {
            let s = g.scale(v[0], -2.5)?;
            let s = g.add_scalar(s, 0.3)?;
            project(g, s, seed)
        });
        check("exp/log", &[pos.clone()], 1e-6, |g, v| {
            let l = g.log(v[0])?;
            let e = g.exp(l)?;
            let e2 = g.exp(v[0])?;
            let s = g.add(e, e2)?;
            project(g, s, seed)
        });
        check("gelu", &[a.clone()], 1e-6, |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, seed)
        });
    }
}

#[test]
fn matmul_examples() {
    let out = eval(|g| {
        let i = g.constant(Tensor::eye(2).unwrap());
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        g.matmul(i, m)
    });
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);

    let out = eval(|g| {
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        g.matmul(a, b)
    });
    assert_eq!(out.data(), &[11.0]);

    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]).unwrap());
    let b = g.constant(Tensor::zeros([4, 2]).unwrap());
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn matmul_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(10 + seed);
        let a = rand(&mut rng, &[4, 5]);
        let b = rand(&mut rng, &[5, 3]);
        check("matmul", &[a, b], 1e-6, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, seed)
        });
        let a = rand(&mut rng, &[2, 3, 4, 5]);
        let b = rand(&mut rng, &[2, 3, 5, 2]);
        let w = rand(&mut rng, &[5, 3]);
        check("batched matmul", &[a, b, w], 1e-6, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let d = g.matmul(v[0], v[2])?;
            let s = project(g, c, seed)?;
            let t = project(g, d, seed + 1)?;
            g.add(s, t)
        });
    }
}

#[test]
fn conv2d_identity_permutation_1x1() {
    let mut rng = Rng64::new(3);
    let x = rand(&mut rng, &[1, 2, 3, 3]);
    // out channel 0 <- in channel 1, out 1 <- in 0
    let w = t(&[2, 2, 1, 1], &[0.0, 1.0, 1.0, 0.0]);
    let out = eval(|g| {
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        g.conv2d(xv, wv, None, 1, 0)
    });
    assert_eq!(&out.data()[..9], &x.data()[9..]);
    assert_eq!(&out.data()[9..], &x.data()[..9]);
}

#[test]
fn conv2d_box_filter_counts_neighbours() {
    let mut img = Tensor::zeros([1, 1, 3, 3]).unwrap();
    img.set(&[0, 0, 1, 1], 1.0);
    let ones = Tensor::ones([1, 1, 3, 3]).unwrap();
    let out = eval(|g| {
        let x = g.constant(img.clone());
        let w = g.constant(ones.clone());
        g.conv2d(x, w, None, 1, 1)
    });
    // The single hot pixel is in every 3x3 neighbourhood.
    assert_eq!(out.data(), &[1.0; 9]);

    let all = Tensor::ones([1, 1, 3, 3]).unwrap();
    let out = eval(|g| {
        let x = g.constant(all);
        let w = g.constant(ones);
        g.conv2d(x, w, None, 1, 1)
    });
    assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 6, 6]).unwrap());
    let w = g.constant(Tensor::zeros([1, 1, 3, 3]).unwrap());
    assert!(matches!(g.conv2d(x, w, None, 2, 0), Err(Error::NonIntegralOutput(_))));
    let w2 = g.constant(Tensor::zeros([1, 2, 3, 3]).unwrap());
    assert!(matches!(g.conv2d(x, w2, None, 1, 1), Err(Error::ShapeMismatch(_))));
}

#[test]
fn conv2d_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(20 + seed);
        for (k, pad) in [(1, 0), (3, 1), (5, 2)] {
            let x = rand(&mut rng, &[2, 3, 8, 8]);
            let w = rand(&mut rng, &[4, 3, k, k]);
            let b = rand(&mut rng, &[4]);
            check("conv2d", &[x, w, b], 1e-4, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, pad)?;
                project(g, y, seed)
            });
        }
        let x = rand(&mut rng, &[1, 2, 7, 7]);
        let w = rand(&mut rng, &[3, 2, 3, 3]);
        check("conv2d stride 2", &[x, w], 1e-4, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn conv_transpose_doubles_extent() {
    let out = eval(|g| {
        let x = g.constant(Tensor::ones([1, 1, 2, 2]).unwrap());
        let w = g.constant(Tensor::ones([1, 3, 4, 4]).unwrap());
        g.conv_transpose2d(x, w, None, 2, 1)
    });
    assert_eq!(out.dims(), &[1, 3, 4, 4]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv2d() {
    for seed in 0..5 {
        let mut rng = Rng64::new(30 + seed);
        let x = rand(&mut rng, &[2, 3, 4, 5]);
        let y = rand(&mut rng, &[2, 2, 8, 10]);
        let w = rand(&mut rng, &[3, 2, 4, 4]);
        let up = eval(|g| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            g.conv_transpose2d(xv, wv, None, 2, 1)
        });
        let down = eval(|g| {
            let yv = g.constant(y.clone());
            let wv = g.constant(w.clone());
            g.conv2d(yv, wv, None, 2, 1)
        });
        let lhs = up.dot(&y).unwrap();
        let rhs = x.dot(&down).unwrap();
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(40 + seed);
        let x = rand(&mut rng, &[2, 3, 3, 3]);
        let w = rand(&mut rng, &[3, 2, 4, 4]);
        let b = rand(&mut rng, &[2]);
        check("conv_transpose2d", &[x, w, b], 1e-4, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn bilinear_examples() {
    let out = eval(|g| {
        let x = g.constant(Tensor::full([1, 2, 3, 3], 3.0).unwrap());
        g.upsample_bilinear(x, 2)
    });
    assert_eq!(out.dims(), &[1, 2, 6, 6]);
    assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));

    let out = eval(|g| {
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
        g.upsample_bilinear(x, 2)
    });
    assert_eq!(out.dims(), &[1, 1, 2, 4]);
    assert_eq!(&out.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    assert_eq!(&out.data()[4..], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn bilinear_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(50 + seed);
        for factor in [2, 4] {
            let x = rand(&mut rng, &[2, 2, 3, 4]);
            check("bilinear", &[x], 1e-5, |g, v| {
                let y = g.upsample_bilinear(v[0], factor)?;
                project(g, y, seed)
            });
        }
    }
}

#[test]
fn softmax_examples() {
    let out = eval(|g| {
        let x = g.constant(Tensor::zeros([3]).unwrap());
        g.softmax(x, 0)
    });
    for v in out.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let out = eval(|g| {
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        g.softmax(x, 0)
    });
    assert_eq!(out.data()[0], 1.0);
    assert!(out.data()[1] >= 0.0 && out.data()[1] < 1e-300);
}

#[test]
fn softmax_slices_are_normalized() {
    let mut rng = Rng64::new(5);
    let x = rng.uniform_tensor(&[2, 3, 4, 5], -5.0, 5.0);
    for axis in 0..4 {
        let y = eval(|g| {
            let v = g.constant(x.clone());
            g.softmax(v, axis)
        });
        let s = eval(|g| {
            let v = g.constant(y.clone());
            g.sum_axis(v, axis)
        });
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(60 + seed);
        let x = rand(&mut rng, &[2, 3, 4]);
        for axis in 0..3 {
            check("softmax", std::slice::from_ref(&x), 1e-6, |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y, seed)
            });
        }
    }
}

#[test]
fn layernorm_examples() {
    let ln = |x: Tensor| {
        eval(|g| {
            let d = x.dims()[x.rank() - 1];
            let xv = g.constant(x.clone());
            let gm = g.constant(Tensor::ones([d]).unwrap());
            let bt = g.constant(Tensor::zeros([d]).unwrap());
            g.layernorm(xv, gm, bt, 1e-5)
        })
    };
    assert!(ln(Tensor::full([1, 4], 7.0).unwrap()).data().iter().all(|&v| v == 0.0));
    let out = ln(t(&[1, 2], &[1.0, 3.0]));
    assert!((out.data()[0] + 1.0).abs() < 1e-4);
    assert!((out.data()[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layernorm_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(70 + seed);
        let x = rand(&mut rng, &[2, 3, 6]);
        let gm = rand(&mut rng, &[6]);
        let bt = rand(&mut rng, &[6]);
        check("layernorm", &[x, gm, bt], 1e-4, |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn split_concat_and_permute_are_inverses() {
    let mut rng = Rng64::new(8);
    let x = rand(&mut rng, &[2, 8, 3, 3]);
    let back = eval(|g| {
        let v = g.constant(x.clone());
        let parts = g.split(v, &[2, 3, 3], 1)?;
        g.concat(&parts, 1)
    });
    assert_eq!(back, x);

    let back = eval(|g| {
        let v = g.constant(x.clone());
        let p = g.permute(v, &[2, 0, 3, 1])?;
        // inverse of [2,0,3,1] is [1,3,0,2]
        g.permute(p, &[1, 3, 0, 2])
    });
    assert_eq!(back, x);

    let mut g = Graph::new();
    let v = g.constant(x.clone());
    assert!(g.split(v, &[2, 3], 1).is_err());
    let w = g.constant(Tensor::zeros([2, 8, 4, 3]).unwrap());
    assert!(g.concat(&[v, w], 1).is_err());
}

#[test]
fn structural_gradients() {
    for seed in 0..5 {
        let mut rng = Rng64::new(80 + seed);
        let x = rand(&mut rng, &[2, 8, 3]);
        let y = rand(&mut rng, &[2, 2, 3]);
        check("split/concat", &[x.clone(), y], 1e-6, |g, v| {
            let parts = g.split(v[0], &[3, 5], 1)?;
            let c = g.concat(&[parts[1], v[1], parts[0]], 1)?;
            project(g, c, seed)
        });
        check("reshape/permute", std::slice::from_ref(&x), 1e-6, |g, v| {
            let r = g.reshape(v[0], &[4, 4, 3])?;
            let p = g.permute(r, &[2, 0, 1])?;
            let t = g.transpose(p)?;
            project(g, t, seed)
        });
        check("sum/mean", std::slice::from_ref(&x), 1e-6, |g, v| {
            let s = g.sum_axis(v[0], 1)?;
            let m = g.mean(v[0])?;
            let p = project(g, s, seed)?;
            g.add(p, m)
        });
        let table = rand(&mut rng, &[5, 2]);
        check("index_select", &[table], 1e-6, |g, v| {
            let r = g.index_select(v[0], &[4, 0, 0, 2, 4, 4])?;
            project(g, r, seed)
        });
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = Rng64::new(99);
    let x = rand(&mut rng, &[2, 3, 6, 6]);
    let w = rand(&mut rng, &[4, 3, 3, 3]);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.conv2d(v[0], v[1], None, 1, 1)?;
        let y = g.gelu(y)?;
        let y = g.softmax(y, 1)?;
        project(g, y, 1)
    };
    let a = tape_gradients(&f, &[x.clone(), w.clone()]).unwrap();
    let b = tape_gradients(&f, &[x, w]).unwrap();
    for (ga, gb) in a.iter().zip(&b) {
        let bits_a: Vec<u64> = ga.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = gb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
