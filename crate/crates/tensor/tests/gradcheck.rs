//! Central finite-difference checks for every differentiable kernel.

use wm_tensor::gradcheck::{cases, relative_errors, run_case, TOL};
use wm_tensor::{Graph, Tensor};

const SEEDS: u64 = 20;

fn check_group(names: &[&str]) {
    let all = cases();
    for name in names {
        let (n, case) = all
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no case {name}"));
        let r = run_case(n, *case, SEEDS);
        println!(
            "gradcheck {}: worst relative error {:.2e} over {} seeds",
            r.name, r.worst, r.seeds
        );
        assert!(r.passed(), "{}: relative error {:e}", r.name, r.worst);
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    check_group(&["add", "sub", "mul"]);
}

#[test]
fn elementwise_unary() {
    check_group(&["scale+add_scalar", "silu", "relu", "tanh", "exp", "square"]);
}

#[test]
fn matmul_variants() {
    check_group(&["matmul batched", "matmul shared rhs"]);
}

#[test]
fn layout_ops() {
    check_group(&[
        "transpose",
        "permute",
        "reshape",
        "concat",
        "narrow",
        "upsample",
        "gather_rows",
    ]);
}

#[test]
fn reductions() {
    check_group(&["sum", "mean", "mse"]);
}

#[test]
fn softmax_kernel() {
    check_group(&["softmax"]);
}

#[test]
fn conv2d_kernel() {
    check_group(&["conv2d"]);
}

#[test]
fn group_norm_kernel() {
    check_group(&["group_norm"]);
}

#[test]
fn attention_composite() {
    check_group(&["attention"]);
}

#[test]
fn suite_covers_every_case_once() {
    let names: Vec<&str> = cases().iter().map(|(n, _)| *n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(names.len(), 25);
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // exp's value with relu's gradient pattern: the check must notice
    let x = Tensor::<f64>::new(&[3], vec![0.3, -0.4, 0.9]).unwrap();
    let bad = |g: &mut Graph<f64>, v: &[wm_tensor::Var]| {
        let c = g.value(v[0]).map(f64::exp);
        let k = g.constant(c);
        let r = g.relu(v[0]);
        let z = g.scale(r, 0.0);
        g.add(z, k).unwrap()
    };
    let errs = relative_errors(&[x], &bad, 0);
    assert!(errs[0] > TOL, "{errs:?}");
}
