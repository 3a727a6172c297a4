//! Central finite-difference gradient checks and the kernel case suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;
pub type CaseFn = fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor<f64>>, Box<Build>);

/// Norm-wise relative error per input between analytic and numeric
/// gradients of `sum(f(inputs) ⊙ r)` with a fixed random weighting `r`.
pub fn relative_errors(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let weights = Tensor::<f64>::uniform(g.dims(out), -1.0, 1.0, &mut rng);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("same dims");
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("scalar loss");

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    (0..inputs.len())
        .map(|k| {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].dims()));
            let numeric: Vec<f64> = (0..inputs[k].numel())
                .map(|j| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[j] += EPS;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[j] -= EPS;
                    (eval(&plus) - eval(&minus)) / (2.0 * EPS)
                })
                .collect();
            let diff = analytic
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            diff / (na + nn).max(1e-12)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOL
    }
}

/// Runs one case over seeds `0..seeds`, each with fresh random shapes.
pub fn run_case(name: &'static str, case: CaseFn, seeds: u64) -> CaseReport {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ins, build) = case(&mut rng, seed);
        for e in relative_errors(&ins, build.as_ref(), seed) {
            worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
        }
    }
    CaseReport { name, seeds, worst }
}

pub fn run_suite(seeds: u64) -> Vec<CaseReport> {
    cases().into_iter().map(|(n, c)| run_case(n, c, seeds)).collect()
}

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::uniform(dims, -1.0, 1.0, rng)
}

/// Values bounded away from zero, for kinked activations.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable kernel of the graph, with a random-shape generator.
pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |rng, _| {
            let (n, c) = (rng.random_range(1..4), rng.random_range(1..5));
            (
                vec![rand_t(rng, &[n, c, 3]), rand_t(rng, &[c, 1])],
                Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            )
        }),
        ("sub", |rng, _| {
            let c = rng.random_range(1..5);
            (
                vec![rand_t(rng, &[2, c]), rand_t(rng, &[c])],
                Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
            )
        }),
        ("mul", |rng, _| {
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            (
                vec![rand_t(rng, &[a, 1, b]), rand_t(rng, &[a, 3, b])],
                Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            )
        }),
        ("scale+add_scalar", |rng, _| {
            (
                vec![rand_t(rng, &[3, 2])],
                Box::new(|g, v| {
                    let s = g.scale(v[0], -1.7);
                    g.add_scalar(s, 0.3)
                }),
            )
        }),
        ("silu", |rng, _| {
            (vec![rand_t(rng, &[5])], Box::new(|g, v| g.silu(v[0])))
        }),
        ("relu", |rng, _| {
            (vec![rand_away_from_zero(rng, &[6])], Box::new(|g, v| g.relu(v[0])))
        }),
        ("tanh", |rng, _| {
            (vec![rand_t(rng, &[4])], Box::new(|g, v| g.tanh(v[0])))
        }),
        ("exp", |rng, _| (vec![rand_t(rng, &[4])], Box::new(|g, v| g.exp(v[0])))),
        ("square", |rng, _| {
            (vec![rand_t(rng, &[4])], Box::new(|g, v| g.square(v[0])))
        }),
        ("matmul batched", |rng, _| {
            let (b, m, k, n) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..5),
                rng.random_range(1..4),
            );
            (
                vec![rand_t(rng, &[b, m, k]), rand_t(rng, &[b, k, n])],
                Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            )
        }),
        ("matmul shared rhs", |rng, _| {
            let (b, m, k, n) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..5),
                rng.random_range(1..4),
            );
            (
                vec![rand_t(rng, &[b, m, k]), rand_t(rng, &[k, n]), rand_t(rng, &[n])],
                Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
            )
        }),
        ("transpose", |rng, _| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
            (
                vec![rand_t(rng, &[2, r, c])],
                Box::new(|g, v| g.transpose(v[0]).unwrap()),
            )
        }),
        ("permute", |rng, _| {
            (
                vec![rand_t(rng, &[2, 3, 4])],
                Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
            )
        }),
        ("reshape", |rng, _| {
            (
                vec![rand_t(rng, &[2, 6])],
                Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap()),
            )
        }),
        ("concat", |rng, _| {
            let a = rng.random_range(1..4);
            (
                vec![rand_t(rng, &[2, a, 3]), rand_t(rng, &[2, 2, 3])],
                Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 1).unwrap()),
            )
        }),
        ("narrow", |rng, _| {
            (
                vec![rand_t(rng, &[2, 5, 3])],
                Box::new(|g, v| g.narrow(v[0], 1, 1, 3).unwrap()),
            )
        }),
        ("upsample", |rng, _| {
            (
                vec![rand_t(rng, &[2, 2, 3])],
                Box::new(|g, v| g.upsample_nearest(v[0], 2).unwrap()),
            )
        }),
        ("gather_rows", |rng, _| {
            (
                vec![rand_t(rng, &[4, 3])],
                Box::new(|g, v| g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]).unwrap()),
            )
        }),
        ("sum", |rng, _| {
            (vec![rand_t(rng, &[3, 2])], Box::new(|g, v| g.sum(v[0])))
        }),
        ("mean", |rng, _| {
            (vec![rand_t(rng, &[3, 2])], Box::new(|g, v| g.mean(v[0])))
        }),
        ("mse", |rng, _| {
            (
                vec![rand_t(rng, &[4]), rand_t(rng, &[4])],
                Box::new(|g, v| g.mse(v[0], v[1]).unwrap()),
            )
        }),
        ("softmax", |rng, _| {
            let n = rng.random_range(1..6);
            let mut t = rand_t(rng, &[3, n]);
            t.data_mut().iter_mut().for_each(|x| *x *= 3.0);
            (vec![t], Box::new(|g, v| g.softmax(v[0])))
        }),
        ("conv2d", |rng, seed| {
            let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
            let stride = 1 + (seed as usize % 2);
            let (kh, kw, pad) = match seed % 4 {
                0 => (3, 3, (1, 1)),
                1 => (3, 3, (0, 0)),
                2 => (1, 1, (0, 0)),
                _ => (3, 1, (1, 0)),
            };
            (
                vec![
                    rand_t(rng, &[n, ci, h, w]),
                    rand_t(rng, &[co, ci, kh, kw]),
                    rand_t(rng, &[co]),
                ],
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
            )
        }),
        ("group_norm", |rng, seed| {
            let groups = 1 + (seed as usize % 3);
            let c = groups * rng.random_range(1..3);
            let mut gamma = rand_t(rng, &[c]);
            gamma.data_mut().iter_mut().for_each(|x| *x += 1.0);
            (
                vec![rand_t(rng, &[2, c, 2, 3]), gamma, rand_t(rng, &[c])],
                Box::new(move |g, v| g.group_norm(v[0], v[1], v[2], groups, 1e-5).unwrap()),
            )
        }),
        ("attention", |rng, _| {
            let (b, nq, nk, d, dv) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            (
                vec![
                    rand_t(rng, &[b, nq, d]),
                    rand_t(rng, &[b, nk, d]),
                    rand_t(rng, &[b, nk, dv]),
                ],
                Box::new(|g, v| g.attention(v[0], v[1], v[2]).unwrap()),
            )
        }),
    ]
}
