//! Finite-difference checks of every differentiable primitive on randomized
//! shapes up to rank 3. Each family reports its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabmeta_core::tensor::{Tape, Tensor, Var};

use super::{graph, max_grad_err};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Projects a tensor output to a scalar with fixed pseudo-random weights so
/// every output coordinate contributes to the checked gradient.
fn project<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    let n: usize = out.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
    let w = tape.constant(Tensor::new(out.shape(), w).unwrap());
    out.mul(w).unwrap().sum()
}

/// Worst error per named check.
pub type Report = Vec<(String, f64)>;

fn record(report: &mut Report, name: &str, err: f64) {
    match report.iter_mut().find(|(n, _)| n == name) {
        Some((_, e)) => *e = e.max(err),
        None => report.push((name.to_string(), err)),
    }
}

fn unary_one(report: &mut Report, seeds: u64, name: &str, lo: f64, hi: f64, op: fn(Var) -> Var) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = rand_shape(&mut rng);
        let x = rand_tensor(&mut rng, &shape, lo, hi);
        let f = graph(|tape, v| project(tape, op(v[0])));
        record(report, name, max_grad_err(&[x], &f));
    }
}

pub fn unary(seeds: u64) -> Report {
    let mut r = Report::new();
    unary_one(&mut r, seeds, "relu", 0.1, 2.0, |x| x.relu());
    unary_one(&mut r, seeds, "relu-neg", -2.0, -0.1, |x| x.relu());
    unary_one(&mut r, seeds, "gelu", -3.0, 3.0, |x| x.gelu());
    unary_one(&mut r, seeds, "tanh", -2.0, 2.0, |x| x.tanh());
    unary_one(&mut r, seeds, "sigmoid", -4.0, 4.0, |x| x.sigmoid());
    unary_one(&mut r, seeds, "exp", -2.0, 2.0, |x| x.exp());
    unary_one(&mut r, seeds, "log", 0.2, 3.0, |x| x.log());
    unary_one(&mut r, seeds, "sqrt", 0.2, 3.0, |x| x.sqrt());
    unary_one(&mut r, seeds, "softplus", -5.0, 5.0, |x| x.softplus());
    unary_one(&mut r, seeds, "square", -2.0, 2.0, |x| x.square());
    unary_one(&mut r, seeds, "clip-inside", -0.9, 0.9, |x| x.clip(-1.0, 1.0));
    unary_one(&mut r, seeds, "add_scalar", -1.0, 1.0, |x| x.add_scalar(0.7));
    unary_one(&mut r, seeds, "mul_scalar", -1.0, 1.0, |x| x.mul_scalar(-1.3));
    unary_one(&mut r, seeds, "softmax", -2.0, 2.0, |x| x.softmax());
    unary_one(&mut r, seeds, "layer_norm", -2.0, 2.0, |x| x.layer_norm());
    unary_one(&mut r, seeds, "sum", -2.0, 2.0, |x| x.sum());
    unary_one(&mut r, seeds, "mean", -2.0, 2.0, |x| x.mean());
    r
}

pub fn axis_reductions(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = rand_shape(&mut rng);
        let axis = rng.gen_range(0..shape.len());
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        for (which, name) in ["sum_axis", "mean_axis", "var_axis"].into_iter().enumerate() {
            let f = graph(move |tape, v| {
                let out = match which {
                    0 => v[0].sum_axis(axis).unwrap(),
                    1 => v[0].mean_axis(axis).unwrap(),
                    _ => v[0].var_axis(axis).unwrap(),
                };
                project(tape, out)
            });
            record(&mut r, name, max_grad_err(&[x.clone()], &f));
        }
    }
    r
}

pub fn binary_with_leading_broadcast(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = rand_shape(&mut rng);
        let cut = rng.gen_range(0..=shape.len());
        let bshape = shape[cut..].to_vec();
        let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &bshape, 0.5, 2.0);
        for (which, name) in ["add", "sub", "mul", "div"].into_iter().enumerate() {
            let f = graph(move |tape, v| {
                let out = match which {
                    0 => v[0].add(v[1]),
                    1 => v[0].sub(v[1]),
                    2 => v[0].mul(v[1]),
                    _ => v[0].div(v[1]),
                }
                .unwrap();
                project(tape, out)
            });
            record(&mut r, name, max_grad_err(&[a.clone(), b.clone()], &f));
        }
    }
    r
}

pub fn row_scaling(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut shape = rand_shape(&mut rng);
        if shape.len() == 1 {
            shape.push(3);
        }
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let s = rand_tensor(&mut rng, &[shape[0]], 0.5, 2.0);
        for (which, name) in ["mul_rows", "div_rows"].into_iter().enumerate() {
            let f = graph(move |tape, v| {
                let out = if which == 0 {
                    v[0].mul_rows(v[1])
                } else {
                    v[0].div_rows(v[1])
                };
                project(tape, out.unwrap())
            });
            record(&mut r, name, max_grad_err(&[x.clone(), s.clone()], &f));
        }
    }
    r
}

pub fn matmul_variants(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let batch = rng.gen_range(1..4);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let ash = if ta { [k, m] } else { [m, k] };
            let bsh = if tb { [n, k] } else { [k, n] };
            for (mode, label) in ["2d", "batched", "broadcast"].into_iter().enumerate() {
                let (a_shape, b_shape): (Vec<usize>, Vec<usize>) = match mode {
                    0 => (ash.to_vec(), bsh.to_vec()),
                    1 => (vec![batch, ash[0], ash[1]], vec![batch, bsh[0], bsh[1]]),
                    _ => (vec![batch, ash[0], ash[1]], bsh.to_vec()),
                };
                let a = rand_tensor(&mut rng, &a_shape, -1.0, 1.0);
                let b = rand_tensor(&mut rng, &b_shape, -1.0, 1.0);
                let f = graph(move |tape, v| project(tape, v[0].matmul_t(v[1], ta, tb).unwrap()));
                let name = format!("matmul {label} ta={ta} tb={tb}");
                record(&mut r, &name, max_grad_err(&[a, b], &f));
            }
        }
    }
    r
}

pub fn indexing(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let shape = rand_shape(&mut rng);
        let numel: usize = shape.iter().product();
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);

        let gi: Vec<usize> = (0..numel + 3).map(|_| rng.gen_range(0..numel)).collect();
        let gather = graph(move |tape, v| project(tape, v[0].gather(gi.clone(), vec![gi.len()]).unwrap()));
        record(&mut r, "gather", max_grad_err(&[x.clone()], &gather));

        let buckets = rng.gen_range(1..4);
        let si: Vec<usize> = (0..numel).map(|_| rng.gen_range(0..buckets)).collect();
        let scatter = graph(move |tape, v| project(tape, v[0].scatter_add(si.clone(), vec![buckets]).unwrap()));
        record(&mut r, "scatter_add", max_grad_err(&[x.clone()], &scatter));

        let axis = rng.gen_range(0..shape.len());
        let start = rng.gen_range(0..shape[axis]);
        let len = rng.gen_range(1..=shape[axis] - start);
        let narrow = graph(move |tape, v| project(tape, v[0].narrow(axis, start, len).unwrap()));
        record(&mut r, "narrow", max_grad_err(&[x.clone()], &narrow));

        let mut other_shape = shape.clone();
        other_shape[axis] = rng.gen_range(1..4);
        let y = rand_tensor(&mut rng, &other_shape, -2.0, 2.0);
        let concat = graph(move |tape, v| project(tape, Var::concat(&[v[0], v[1], v[0]], axis).unwrap()));
        record(&mut r, "concat", max_grad_err(&[x.clone(), y], &concat));

        let reshape = graph(move |tape, v| project(tape, v[0].reshape(vec![numel]).unwrap().softmax()));
        record(&mut r, "reshape", max_grad_err(&[x.clone()], &reshape));

        let s = rand_tensor(&mut rng, &[], -1.0, 1.0);
        let sh = shape.clone();
        let expand = graph(move |tape, v| project(tape, v[0].expand(sh.clone()).unwrap().tanh()));
        record(&mut r, "expand", max_grad_err(&[s], &expand));
    }
    r
}

/// Two-layer perceptron with softmax cross-entropy.
pub fn perceptron(seeds: u64) -> Report {
    let mut r = Report::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b1 = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let labels: Vec<usize> = (0..5).map(|i| i * 3 + rng.gen_range(0..3)).collect();
        let f = graph(move |_, v| {
            let h = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap().gelu().layer_norm();
            let p = h.matmul(v[3]).unwrap().softmax();
            p.gather(labels.clone(), vec![5]).unwrap().log().mean().neg()
        });
        record(&mut r, "perceptron", max_grad_err(&[x, w1, b1, w2], &f));
    }
    r
}

/// Every family above.
pub fn all(seeds: u64) -> Report {
    [
        unary(seeds),
        axis_reductions(seeds),
        binary_with_leading_broadcast(seeds),
        row_scaling(seeds),
        matmul_variants(seeds),
        indexing(seeds),
        perceptron(seeds),
    ]
    .concat()
}
