//! Finite-difference checks for every differentiable tape op, ten seeds each.

use mgt_core::gradcheck::{op_catalogue, random_tensor};
use mgt_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const STEP: f64 = 1e-5;

/// matmul and conv3d carry tighter per-op bounds; everything else uses 1e-4.
fn tolerance(name: &str) -> f64 {
    match name {
        "matmul" | "matmul_batched" => 1e-6,
        "conv3d" => 1e-5,
        _ => 1e-4,
    }
}

#[test]
fn every_catalogued_op_matches_finite_differences() {
    let cases = op_catalogue();
    assert!(cases.len() >= 28);
    for case in &cases {
        let rep = case.check(SEEDS, STEP).unwrap();
        assert!(rep.checked > 0, "{}", case.name);
        assert!(
            rep.max_rel_err < tolerance(case.name),
            "{}: rel err {} at {:?} (analytic {}, numeric {})",
            case.name,
            rep.max_rel_err,
            rep.worst,
            rep.analytic_at_worst,
            rep.numeric_at_worst
        );
    }
}

#[test]
fn catalogue_covers_distinct_ops() {
    let mut names: Vec<&str> = op_catalogue().iter().map(|c| c.name).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

/// erf by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_one_matches_series_oracle() {
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
    // frozen from the series oracle
    assert!((phi1 - 0.841_344_746_068_542_9).abs() < 1e-15);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    let y = tape.gelu(x);
    assert!((tape.value(y).item().unwrap() - phi1).abs() < 1e-14);
}

#[test]
fn layer_norm_standardises_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[4, 8], 3.0, &mut rng));
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let m = row.iter().sum::<f64>() / 8.0;
        let v = row.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn shared_parameter_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![2.0]), true);
    let a = tape.scale(x, 3.0);
    let b = tape.mul(x, x).unwrap();
    let s = tape.add(a, b).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0 + 4.0]);
}
