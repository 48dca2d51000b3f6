//! Central finite-difference checks for every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Names of all ops covered by [`check_op`].
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "scale",
    "add_row_bias",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "embed",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "attention",
    "attention_offset",
    "cross_entropy",
    "mse",
    "reshape",
];

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let m = rng.gen_range(1..5);
    let n = rng.gen_range(1..6);
    match op {
        "matmul" => {
            let k = rng.gen_range(1..8);
            Case {
                inputs: vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }
        "add" => Case {
            inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.scale(v[0], s)),
            }
        }
        "add_row_bias" => Case {
            inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
            build: Box::new(|g, v| g.add_row_bias(v[0], v[1])),
        },
        "gelu" => Case {
            inputs: vec![rand_tensor(rng, &[m, n])],
            build: Box::new(|g, v| g.gelu(v[0])),
        },
        "layer_norm" => {
            let n = rng.gen_range(2..7);
            Case {
                inputs: vec![
                    rand_tensor(rng, &[m, n]),
                    rand_tensor(rng, &[n]),
                    rand_tensor(rng, &[n]),
                ],
                build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            }
        }
        "softmax_rows" => Case {
            inputs: vec![rand_tensor(rng, &[m, n])],
            build: Box::new(|g, v| g.softmax_rows(v[0])),
        },
        "embed" => {
            let rows = rng.gen_range(2..6);
            let ids: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..rows)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[rows, n])],
                build: Box::new(move |g, v| g.embed(v[0], &ids)),
            }
        }
        "concat_rows" => {
            let m2 = rng.gen_range(1..4);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m2, n])],
                build: Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]])),
            }
        }
        "slice_rows" => {
            let start = rng.gen_range(0..m);
            let len = rng.gen_range(1..=m - start);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.slice_rows(v[0], start, len)),
            }
        }
        "gather_rows" => {
            let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..m)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.gather_rows(v[0], &rows)),
            }
        }
        "attention" | "attention_offset" => {
            let heads = rng.gen_range(1..3);
            let d = heads * rng.gen_range(1..4);
            let t = rng.gen_range(1..5);
            let offset = if op == "attention" { 0 } else { rng.gen_range(1..4) };
            let s = t + offset;
            Case {
                inputs: vec![
                    rand_tensor(rng, &[t, d]),
                    rand_tensor(rng, &[s, d]),
                    rand_tensor(rng, &[s, d]),
                ],
                build: Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads, offset)),
            }
        }
        "cross_entropy" => {
            let mut mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.6)).collect();
            let pick = rng.gen_range(0..m);
            mask[pick] = true;
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask)),
            }
        }
        "mse" => {
            let target = rand_tensor(rng, &[m * n]);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.mse(v[0], &target)),
            }
        }
        "reshape" => Case {
            inputs: vec![rand_tensor(rng, &[m, n])],
            build: Box::new(move |g, v| g.reshape(v[0], &[n, m])),
        },
        other => panic!("unknown op {other}"),
    }
}

/// Reduces any op output to a scalar through a fixed random projection.
fn scalarize(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let flat = g.reshape(out, &[1, n])?;
    let p = g.constant(proj.clone())?;
    let s = g.matmul(flat, p)?;
    g.reshape(s, &[1])
}

fn eval(case: &Case, inputs: &[Tensor], proj: &Tensor) -> f64 {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false).unwrap()).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let l = scalarize(&mut g, out, proj).unwrap();
    g.value(l).item()
}

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between analytic and numeric
/// gradients over all inputs of one random instance.
fn trial(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let c = case(op, rng);
    let mut g = Graph::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let out = (c.build)(&mut g, &vars).unwrap();
    let proj = rand_tensor(rng, &[g.value(out).numel(), 1]);
    let loss = scalarize(&mut g, out, &proj).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for (i, input) in c.inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zero);
        for j in 0..input.numel() {
            let mut plus = c.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = c.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&c, &plus, &proj) - eval(&c, &minus, &proj)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            diff += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Worst relative error over `trials` random instances of `op`.
pub fn check_op(op: &str, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| trial(op, &mut rng)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_check() {
        for op in OPS {
            let err = check_op(op, 10, 3);
            assert!(err < 1e-6, "{op}: {err}");
        }
    }

    #[test]
    fn gelu_scalar_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let num = (super::super::gelu_scalar(x + FD_STEP) - super::super::gelu_scalar(x - FD_STEP))
                / (2.0 * FD_STEP);
            let ana = super::super::gelu_grad_scalar(x);
            assert!((num - ana).abs() / ana.abs().max(1e-3) < 1e-6);
        }
    }
}
