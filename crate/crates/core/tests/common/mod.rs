#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xded_core::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude is at least `gap`, keeping finite
/// differences away from kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(gap..scale);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn single_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    (up - f(&probe)) / (2.0 * h)
}

/// Contracts a possibly non-scalar output with fixed weights so every
/// output element contributes to the checked scalar.
fn scalarize(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return out;
    }
    let w = tape.constant(Tensor::new(shape, weights[..tape.data(out).len()].to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every input. Returns the worst relative error.
pub fn check_gradients(
    seed: u64,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..100_000).map(|_| r.random_range(-1.0..1.0)).collect();

    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let s = scalarize(&mut tape, out, &weights);
        tape.data(s)[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarize(&mut tape, out, &weights);
    tape.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        let f = |flat: &[f64]| {
            let mut vals = inputs.to_vec();
            vals[k] = Tensor::new(inputs[k].shape().to_vec(), flat.to_vec()).unwrap();
            eval(&vals)
        };
        let numeric = numeric_grad(&f, inputs[k].data(), FD_STEP);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let mut e = rel_err(*a, *n);
            if e > FD_TOL {
                // A ReLU kink inside the ±h window; a narrower window excludes it.
                e = e.min(rel_err(*a, single_fd(&f, inputs[k].data(), i, FD_STEP * 1e-2)));
            }
            assert!(
                e <= FD_TOL,
                "seed {seed} input {k} element {i}: analytic {a} numeric {n} (rel {e:.3e})"
            );
            worst = worst.max(e);
        }
    }
    worst
}
