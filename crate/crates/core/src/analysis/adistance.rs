use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dot;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MIN_PER_SIDE: usize = 4;
const EPOCHS: usize = 200;
const LEARNING_RATE: f64 = 0.05;
const L2: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADistance {
    /// `raw_value` clamped to [0, 2].
    pub value: f64,
    /// `2(1 − 2ε)`.
    pub raw_value: f64,
    /// Held-out error ε of the domain classifier.
    pub epsilon_err: f64,
}

fn rows(t: &Tensor, name: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::param(name, format!("expected [n, d] embeddings, got {s:?}"))),
    }
}

/// Proxy A-distance between two embedding sets `[n, d]`.
///
/// The larger side is subsampled to the smaller one so chance error is 0.5.
/// Features are standardised with train-half statistics, then an
/// L2-regularised logistic classifier is trained by per-sample SGD.
pub fn proxy_a_distance(source: &Tensor, target: &Tensor, seed: u64) -> Result<ADistance> {
    let (ns, d) = rows(source, "source")?;
    let (nt, dt) = rows(target, "target")?;
    if d != dt {
        return Err(Error::Dimension {
            op: "proxy_a_distance",
            lhs: source.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let smallest = ns.min(nt);
    if smallest < MIN_PER_SIDE {
        return Err(Error::SampleSize {
            required: MIN_PER_SIDE,
            got: smallest,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(smallest);
        idx
    };
    let src_idx = pick(ns);
    let tgt_idx = pick(nt);
    let mut examples: Vec<(&[f64], f64)> = src_idx
        .iter()
        .map(|&i| (source.row(i), 0.0))
        .chain(tgt_idx.iter().map(|&i| (target.row(i), 1.0)))
        .collect();
    examples.shuffle(&mut rng);
    let (train, test) = examples.split_at(examples.len() / 2);

    let mut mean = vec![0.0; d];
    for (x, _) in train {
        for (m, v) in mean.iter_mut().zip(*x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut scale = vec![0.0; d];
    for (x, _) in train {
        for ((s, v), m) in scale.iter_mut().zip(*x).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for s in scale.iter_mut() {
        let sd = (*s / train.len() as f64).sqrt();
        *s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    }
    let standardise = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (standardise(x), *y)).collect();
    let test: Vec<(Vec<f64>, f64)> = test.iter().map(|(x, y)| (standardise(x), *y)).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..EPOCHS {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &train[i];
            let p = sigmoid(dot(&w, x) + b);
            let err = p - y;
            for (wj, xj) in w.iter_mut().zip(x) {
                *wj -= LEARNING_RATE * (err * xj + L2 * *wj);
            }
            b -= LEARNING_RATE * err;
        }
    }
    let wrong = test
        .iter()
        .filter(|(x, y)| {
            let predicted = if dot(&w, x) + b > 0.0 { 1.0 } else { 0.0 };
            predicted != *y
        })
        .count();
    let epsilon_err = wrong as f64 / test.len() as f64;
    let raw_value = 2.0 * (1.0 - 2.0 * epsilon_err);
    Ok(ADistance {
        value: raw_value.clamp(0.0, 2.0),
        raw_value,
        epsilon_err,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
