//! Diagnostics for trained classifiers: weight-perturbation flatness, proxy
//! A-distance, Hessian-direction loss landscapes and ℓ∞ adversarial attacks.
//!
//! Probes that only need a loss and its gradient work on any [`Objective`],
//! so quadratic fixtures and trained networks share one code path.

mod adistance;
mod attack;
mod flatness;
mod hessian;

pub use adistance::{proxy_a_distance, ADistance};
pub use attack::{attack_report, fgsm_attack, pgd_attack, AttackReport, Classifier, Network, PgdConfig};
pub use flatness::{flatness_probe, FlatnessCurve, FlatnessPoint, DEFAULT_SIGMAS};
pub use hessian::{
    grid_coordinates, hessian_vector_product, loss_landscape, top_hessian_directions, HessianDirections, LandscapeGrid,
    PowerConfig,
};

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, DomainSample};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelSpec, ParameterSet};
use crate::regularizers;

/// A scalar loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `L(θ) = ½ Σ hᵢ θᵢ²`, whose Hessian is `diag(h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub curvatures: Vec<f64>,
}

impl Quadratic {
    /// `L(θ) = Σ cᵢ θᵢ²`.
    pub fn from_coefficients(c: &[f64]) -> Self {
        Self {
            curvatures: c.iter().map(|v| 2.0 * v).collect(),
        }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.curvatures.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta)?;
        Ok(0.5 * self.curvatures.iter().zip(theta).map(|(h, t)| h * t * t).sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta)?;
        Ok(self.curvatures.iter().zip(theta).map(|(h, t)| h * t).collect())
    }
}

fn check_dim(expected: usize, theta: &[f64]) -> Result<()> {
    if theta.len() != expected {
        return Err(Error::Dimension {
            op: "objective",
            lhs: vec![theta.len()],
            rhs: vec![expected],
        });
    }
    Ok(())
}

const CHUNK: usize = 128;

/// Eval-mode cross-entropy of a network over a fixed sample set, as a
/// function of the flattened parameters (name order).
pub struct NetworkLoss<'a> {
    spec: &'a ModelSpec,
    template: &'a ParameterSet,
    images: Tensor,
    labels: Vec<usize>,
}

impl<'a> NetworkLoss<'a> {
    pub fn new(spec: &'a ModelSpec, template: &'a ParameterSet, samples: &[DomainSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("loss over an empty sample set".into()));
        }
        template.check_layout(spec)?;
        Ok(Self {
            spec,
            template,
            images: data::stack_images(samples)?,
            labels: data::labels_of(samples),
        })
    }

    fn rows(&self) -> Vec<usize> {
        (0..self.labels.len()).collect()
    }
}

/// Mean cross-entropy of logit rows, computed with a stable log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .chunks(num_classes)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

impl Objective for NetworkLoss<'_> {
    fn dim(&self) -> usize {
        self.template.num_values()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let params = self.template.with_flat(theta)?;
        let logits = model::eval_logits(&params, self.spec, &self.images)?;
        Ok(cross_entropy_from_logits(logits.data(), self.spec.num_classes, &self.labels))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let params = self.template.with_flat(theta)?;
        let n = self.labels.len() as f64;
        let mut total = vec![0.0; theta.len()];
        for chunk in self.rows().chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = params.attach(&mut tape, true);
            let x = tape.constant(self.images.select(chunk));
            let out = model::forward(&mut tape, &vars, self.spec, x, Mode::Eval)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| self.labels[i]).collect();
            let ce = regularizers::cross_entropy(&mut tape, out.logits, &labels)?;
            tape.backward(ce)?;
            let weight = chunk.len() as f64 / n;
            let mut offset = 0;
            for v in vars.values() {
                let g = tape.grad(*v).unwrap_or_default();
                for (t, gi) in total[offset..offset + g.len()].iter_mut().zip(g) {
                    *t += weight * gi;
                }
                offset += g.len();
            }
        }
        Ok(total)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Header-less CSV writers share this float formatting.
fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}
