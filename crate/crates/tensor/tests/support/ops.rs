//! Analytic gradients against central finite differences, op by op.
#![allow(dead_code)]

use hcgl_tensor::{AttentionMask, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: usize = 100;

pub type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>;

/// `sum(f(inputs) ⊙ w)` for a fixed random weighting `w`, so every output
/// element carries a distinct upstream gradient.
fn weighted_loss(params: &[Tensor], weights: &Tensor, f: &Build) -> f64 {
    let mut tape = Tape::new(params);
    let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(i)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

pub fn max_rel_error(params: &[Tensor], f: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let out_len = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(i)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).numel()
    };
    let weights = Tensor::new(
        vec![out_len],
        (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let analytic = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(i)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = tape
            .constant(weights.clone().reshaped(tape.value(out).shape()).unwrap())
            .unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap()
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for p in 0..params.len() {
        for j in 0..params[p].numel() {
            let orig = probe[p].data()[j];
            probe[p].data_mut()[j] = orig + H;
            let up = weighted_loss(&probe, &weights, f);
            probe[p].data_mut()[j] = orig - H;
            let down = weighted_loss(&probe, &weights, f);
            probe[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.get(p).map_or(0.0, |g| g.data()[j]);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
}

/// Values kept at least `gap` away from `points`, so kinked ops stay smooth
/// within the finite-difference stencil.
fn away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, points: &[f64], gap: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| loop {
        let x: f64 = rng.gen_range(-1.5..1.5);
        if points.iter().all(|p| (x - p).abs() > gap) {
            break x;
        }
    })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

pub type Maker = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>);

fn mm(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    random_matrix(rng, rows, cols)
}

fn separated(rng: &mut ChaCha8Rng, a: &Tensor) -> Tensor {
    // keep the two operands well separated
    Tensor::from_fn(a.rows(), a.cols(), |i, j| {
        a.row(i)[j] + if rng.gen::<bool>() { 0.3 } else { -0.3 }
    })
}

/// One entry per differentiable op, plus a composite policy-head chain.
pub const CASES: &[(&str, Maker)] = &[
    ("matmul", |rng| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        (
            vec![mm(rng, m, k), mm(rng, k, n)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        )
    }),
    ("add", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c), mm(rng, r, c)],
            Box::new(|t, v| t.add(v[0], v[1])),
        )
    }),
    ("sub", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c), mm(rng, r, c)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        )
    }),
    ("mul", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c), mm(rng, r, c)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        )
    }),
    ("scale", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let s = rng.gen_range(-2.0..2.0);
        (vec![mm(rng, r, c)], Box::new(move |t, v| t.scale(v[0], s)))
    }),
    ("add_row", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c), mm(rng, 1, c)],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        )
    }),
    ("linear", |rng| {
        let (b, i, o) = (dim(rng), dim(rng), dim(rng));
        (
            vec![mm(rng, b, i), mm(rng, i, o), mm(rng, 1, o)],
            Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        )
    }),
    ("minimum", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let a = mm(rng, r, c);
        let b = separated(rng, &a);
        (vec![a, b], Box::new(|t, v| t.minimum(v[0], v[1])))
    }),
    ("maximum", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let a = mm(rng, r, c);
        let b = separated(rng, &a);
        (vec![a, b], Box::new(|t, v| t.maximum(v[0], v[1])))
    }),
    ("clamp", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![away_from(rng, r, c, &[-0.5, 0.7], 1e-3)],
            Box::new(|t, v| t.clamp(v[0], -0.5, 0.7)),
        )
    }),
    ("relu", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![away_from(rng, r, c, &[0.0], 1e-3)],
            Box::new(|t, v| t.relu(v[0])),
        )
    }),
    ("tanh", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (vec![mm(rng, r, c)], Box::new(|t, v| t.tanh(v[0])))
    }),
    ("exp", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (vec![mm(rng, r, c)], Box::new(|t, v| t.exp(v[0])))
    }),
    ("softmax_rows", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (vec![mm(rng, r, c)], Box::new(|t, v| t.softmax_rows(v[0])))
    }),
    ("log_softmax_rows", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c)],
            Box::new(|t, v| t.log_softmax_rows(v[0])),
        )
    }),
    ("layer_normalize", |rng| {
        let (r, c) = (dim(rng), rng.gen_range(2..=8));
        (
            vec![mm(rng, r, c)],
            Box::new(|t, v| t.layer_normalize(v[0], 1e-5)),
        )
    }),
    ("sum_rows", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (vec![mm(rng, r, c)], Box::new(|t, v| t.sum_rows(v[0])))
    }),
    ("pick_cols", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        (
            vec![mm(rng, r, c)],
            Box::new(move |t, v| t.pick_cols(v[0], idx.clone())),
        )
    }),
    ("sum_mean", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c), mm(rng, r, c)],
            Box::new(|t, v| {
                let a = t.sum(v[0])?;
                let b = t.mean(v[1])?;
                t.add(a, b)
            }),
        )
    }),
    ("concat_cols", |rng| {
        let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
        (
            vec![mm(rng, r, c1), mm(rng, r, c2)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        )
    }),
    ("gather_rows", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let n = dim(rng);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
        (
            vec![mm(rng, r, c)],
            Box::new(move |t, v| t.gather_rows(v[0], idx.clone())),
        )
    }),
    ("slice_rows", |rng| {
        let (r, c) = (rng.gen_range(2..=8), dim(rng));
        let start = rng.gen_range(0..r - 1);
        let end = rng.gen_range(start + 1..=r);
        (
            vec![mm(rng, r, c)],
            Box::new(move |t, v| t.slice_rows(v[0], start, end)),
        )
    }),
    ("reshape", |rng| {
        let (r, c) = (dim(rng), dim(rng));
        (
            vec![mm(rng, r, c)],
            Box::new(move |t, v| t.reshape(v[0], &[1, r * c])),
        )
    }),
    ("attention", |rng| {
        let groups = rng.gen_range(1..=3);
        let (nq, nk, d, dv) = (dim(rng), dim(rng), dim(rng), dim(rng));
        let mask = match rng.gen_range(0..3) {
            0 => AttentionMask::None,
            1 => AttentionMask::Keys(
                (0..groups * nk)
                    .map(|i| i % nk == 0 || rng.gen_bool(0.7))
                    .collect(),
            ),
            _ => AttentionMask::Pairs(
                (0..groups * nq * nk)
                    .map(|i| i % nk == 0 || rng.gen_bool(0.7))
                    .collect(),
            ),
        };
        (
            vec![
                mm(rng, groups * nq, d),
                mm(rng, groups * nk, d),
                mm(rng, groups * nk, dv),
            ],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], groups, &mask)),
        )
    }),
    // a two-layer perceptron followed by a log-softmax pick, the shape of a policy head
    ("mlp_head", |rng| {
        let (b, i, h, o) = (dim(rng), dim(rng), dim(rng), rng.gen_range(2..=8));
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..o)).collect();
        (
            vec![mm(rng, b, i), mm(rng, i, h), mm(rng, 1, h), mm(rng, h, o)],
            Box::new(move |t, v| {
                let z = t.linear(v[0], v[1], v[2])?;
                let z = t.tanh(z)?;
                let logits = t.matmul(z, v[3])?;
                let lp = t.log_softmax_rows(logits)?;
                t.pick_cols(lp, idx.clone())
            }),
        )
    }),
];

/// Worst relative error of `name` over `INSTANCES` random instances.
pub fn worst_error(name: &str) -> f64 {
    let make = CASES.iter().find(|(n, _)| *n == name).expect("known op").1;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (params, f) = make(&mut rng);
        worst = worst.max(max_rel_error(&params, f.as_ref(), &mut rng));
    }
    worst
}
