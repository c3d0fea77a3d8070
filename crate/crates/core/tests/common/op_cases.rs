//! Finite-difference gradient checks for every primitive graph op.
//!
//! Each case builds a tiny graph around one op with random inputs kept away
//! from non-differentiable points. The op output is contracted against a
//! fixed random weight matrix so every output entry contributes to the loss.

#![allow(dead_code)]

use psenn_core::graph::{ConvSpec, ResizeSpec};
use psenn_core::{gradient_check, Axis, Bindings, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Built {
    pub graph: Graph,
    pub inputs: Vec<(&'static str, Tensor)>,
    pub out: Var,
}

pub struct OpCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Built,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Values with magnitude in `[gap, 2]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn lower_triangular(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            t.data_mut()[i * n + j] = rng.random_range(-0.5..0.5);
        }
        t.data_mut()[i * n + i] = rng.random_range(1.0..2.0);
    }
    t
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: impl FnOnce(&mut Graph, Var) -> Var) -> Built {
    let _ = rng;
    let mut g = Graph::new();
    let xv = g.input("x", true);
    let out = op(&mut g, xv);
    Built { graph: g, inputs: vec![("x", x)], out }
}

fn binary(a: Tensor, b: Tensor, op: impl FnOnce(&mut Graph, Var, Var) -> Var) -> Built {
    let mut g = Graph::new();
    let av = g.input("a", true);
    let bv = g.input("b", true);
    let out = op(&mut g, av, bv);
    Built { graph: g, inputs: vec![("a", a), ("b", b)], out }
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", build: |r| binary(normal(r, 3, 4), normal(r, 3, 4), |g, a, b| g.add(a, b)) },
        OpCase { name: "add_row_broadcast", build: |r| binary(normal(r, 3, 4), normal(r, 1, 4), |g, a, b| g.add(a, b)) },
        OpCase { name: "sub", build: |r| binary(normal(r, 3, 4), normal(r, 3, 4), |g, a, b| g.sub(a, b)) },
        OpCase { name: "sub_scalar_broadcast", build: |r| binary(normal(r, 3, 4), normal(r, 1, 1), |g, a, b| g.sub(a, b)) },
        OpCase { name: "mul", build: |r| binary(normal(r, 3, 4), normal(r, 3, 4), |g, a, b| g.mul(a, b)) },
        OpCase { name: "mul_row_broadcast", build: |r| binary(normal(r, 3, 4), normal(r, 1, 4), |g, a, b| g.mul(a, b)) },
        OpCase { name: "scale", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.scale(x, -1.7)) } },
        OpCase { name: "add_scalar", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.add_scalar(x, 0.3)) } },
        OpCase { name: "matmul", build: |r| binary(normal(r, 3, 4), normal(r, 4, 2), |g, a, b| g.matmul(a, b)) },
        OpCase { name: "transpose", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.transpose(x)) } },
        OpCase {
            name: "affine",
            build: |r| {
                let mut g = Graph::new();
                let x = g.input("x", true);
                let w = g.input("w", true);
                let b = g.input("b", true);
                let out = g.affine(x, w, b);
                Built { graph: g, inputs: vec![("x", normal(r, 3, 4)), ("w", normal(r, 4, 2)), ("b", normal(r, 1, 2))], out }
            },
        },
        OpCase { name: "leaky_relu", build: |r| { let x = away_from_zero(r, 3, 4, 0.1); unary(r, x, |g, x| g.leaky_relu(x, 0.01)) } },
        OpCase { name: "tanh", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.tanh(x)) } },
        OpCase { name: "exp", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.exp(x)) } },
        OpCase { name: "log", build: |r| { let x = uniform(r, 3, 4, 0.2, 3.0); unary(r, x, |g, x| g.log(x)) } },
        OpCase { name: "square", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.square(x)) } },
        OpCase { name: "softplus", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.softplus(x)) } },
        OpCase {
            name: "clamp",
            build: |r| {
                let mut x = uniform(r, 3, 4, -1.0, 1.0);
                for v in x.data_mut() {
                    if (v.abs() - 0.5).abs() < 0.05 {
                        *v *= 0.8;
                    }
                }
                unary(r, x, |g, x| g.clamp(x, -0.5, 0.5))
            },
        },
        OpCase { name: "softmax", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.softmax(x)) } },
        OpCase { name: "log_softmax", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.log_softmax(x)) } },
        OpCase { name: "sum", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.sum(x)) } },
        OpCase { name: "mean", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.mean(x)) } },
        OpCase { name: "row_sum", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.row_sum(x)) } },
        OpCase {
            name: "row_min",
            build: |r| {
                // Entries in each row are separated by at least 0.2.
                let mut x = Tensor::zeros(&[3, 4]);
                for row in 0..3 {
                    let mut base: Vec<f64> = (0..4).map(|k| k as f64 * 0.3).collect();
                    for k in (1..4).rev() {
                        base.swap(k, r.random_range(0..=k));
                    }
                    for (v, b) in x.row_mut(row).iter_mut().zip(base) {
                        *v = b + r.random_range(0.0..0.1);
                    }
                }
                unary(r, x, |g, x| g.row_min(x))
            },
        },
        OpCase { name: "concat_rows", build: |r| binary(normal(r, 2, 3), normal(r, 1, 3), |g, a, b| g.concat(&[a, b], Axis::Rows)) },
        OpCase { name: "concat_cols", build: |r| binary(normal(r, 2, 3), normal(r, 2, 2), |g, a, b| g.concat(&[a, b, a], Axis::Cols)) },
        OpCase { name: "reshape", build: |r| { let x = normal(r, 3, 4); unary(r, x, |g, x| g.reshape(x, 6)) } },
        OpCase { name: "slice_rows", build: |r| { let x = normal(r, 4, 3); unary(r, x, |g, x| g.slice(x, Axis::Rows, 1, 3)) } },
        OpCase { name: "slice_cols", build: |r| { let x = normal(r, 3, 5); unary(r, x, |g, x| g.slice(x, Axis::Cols, 2, 5)) } },
        OpCase { name: "gather_rows", build: |r| { let x = normal(r, 3, 2); unary(r, x, |g, x| g.gather(x, Axis::Rows, vec![2, 0, 2, 1])) } },
        OpCase { name: "gather_cols", build: |r| { let x = normal(r, 2, 3); unary(r, x, |g, x| g.gather(x, Axis::Cols, vec![1, 1, 0])) } },
        OpCase {
            name: "bilinear_resize",
            build: |r| {
                let spec = ResizeSpec { channels: 2, in_h: 3, in_w: 3, out_h: 5, out_w: 4 };
                let x = normal(r, 2, 18);
                unary(r, x, move |g, x| g.resize(x, spec))
            },
        },
        OpCase { name: "sq_dist", build: |r| binary(normal(r, 3, 2), normal(r, 4, 2), |g, a, b| g.sq_dist(a, b)) },
        OpCase { name: "chol_factor", build: |r| { let x = normal(r, 3, 3); unary(r, x, |g, x| g.chol_factor(x, 1e-3)) } },
        OpCase { name: "diag", build: |r| { let x = normal(r, 3, 3); unary(r, x, |g, x| g.diag(x)) } },
        OpCase {
            name: "tri_solve",
            build: |r| {
                let l = lower_triangular(r, 3);
                binary(l, normal(r, 4, 3), |g, l, x| g.tri_solve(l, x))
            },
        },
        OpCase {
            name: "conv2d",
            build: |r| {
                let spec = ConvSpec { in_channels: 2, out_channels: 3, in_h: 5, in_w: 5, kernel: 3, stride: 2, padding: 1 };
                let mut g = Graph::new();
                let x = g.input("x", true);
                let w = g.input("w", true);
                let b = g.input("b", true);
                let out = g.conv2d(x, w, b, spec);
                Built { graph: g, inputs: vec![("x", normal(r, 2, 50)), ("w", normal(r, 3, 18)), ("b", normal(r, 1, 3))], out }
            },
        },
        OpCase {
            name: "conv_transpose2d",
            build: |r| {
                let spec = ConvSpec { in_channels: 3, out_channels: 2, in_h: 3, in_w: 3, kernel: 4, stride: 2, padding: 1 };
                let mut g = Graph::new();
                let x = g.input("x", true);
                let w = g.input("w", true);
                let b = g.input("b", true);
                let out = g.conv_transpose2d(x, w, b, spec);
                Built { graph: g, inputs: vec![("x", normal(r, 2, 27)), ("w", normal(r, 3, 32)), ("b", normal(r, 1, 2))], out }
            },
        },
        OpCase {
            name: "batch_norm",
            build: |r| {
                let mut g = Graph::new();
                let x = g.input("x", true);
                let gamma = g.input("gamma", true);
                let beta = g.input("beta", true);
                let mean = g.input("mean", false);
                let var = g.input("var", false);
                let out = g.batch_norm(x, gamma, beta, mean, var, 2, 1e-5);
                Built {
                    graph: g,
                    inputs: vec![
                        ("x", normal(r, 3, 8)),
                        ("gamma", normal(r, 1, 2)),
                        ("beta", normal(r, 1, 2)),
                        ("mean", normal(r, 1, 2)),
                        ("var", uniform(r, 1, 2, 0.5, 2.0)),
                    ],
                    out,
                }
            },
        },
    ]
}

/// Worst relative gradient error of `case` over `points` random draws.
pub fn max_error(case: &OpCase, points: usize, seed: u64, epsilon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let Built { mut graph, inputs, out } = (case.build)(&mut rng);
        let mut bindings = Bindings::new();
        for (name, t) in &inputs {
            bindings.bind(*name, t);
        }
        let shape = graph.forward(&bindings).expect("forward").value(out).shape().to_vec();
        let weights = normal(&mut rng, shape[0], shape[1]);
        let w = graph.constant(weights);
        let weighted = graph.mul(out, w);
        let loss = graph.sum(weighted);
        let err = gradient_check(&graph, &bindings, loss, epsilon).expect("gradient check");
        if !(err <= worst) {
            worst = if err.is_nan() { f64::INFINITY } else { err };
        }
    }
    worst
}
