use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, Mode, ModelSpec, ParameterSet};
use crate::regularizers;
use crate::training::accuracy_from_logits;

/// Anything that maps images to logits and can differentiate its
/// cross-entropy with respect to the input.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
    /// `∇ₓ Σᵢ CE(xᵢ, yᵢ)`, laid out like `images`.
    fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>>;
}

/// A trained network evaluated in inference mode.
pub struct Network<'a> {
    pub params: &'a ParameterSet,
    pub spec: &'a ModelSpec,
}

const CHUNK: usize = 128;

impl Classifier for Network<'_> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        model::eval_logits(self.params, self.spec, images)
    }

    fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let n = images.shape()[0];
        let rows: Vec<usize> = (0..n).collect();
        let mut grad = Vec::with_capacity(images.numel());
        for chunk in rows.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.params.attach(&mut tape, false);
            let x = tape.variable(images.select(chunk));
            let out = model::forward(&mut tape, &vars, self.spec, x, Mode::Eval)?;
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let ce = regularizers::cross_entropy(&mut tape, out.logits, &chunk_labels)?;
            let total = tape.mul_scalar(ce, chunk.len() as f64);
            tape.backward(total)?;
            grad.extend_from_slice(tape.grad(x).unwrap_or_default());
        }
        Ok(grad)
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project onto the ℓ∞ ball of radius `eps` around `x` and onto [0, 1].
/// The result satisfies `|v − x| ≤ eps` as evaluated in floating point.
fn project(x: f64, candidate: f64, eps: f64) -> f64 {
    let mut v = candidate.clamp(x - eps, x + eps).clamp(0.0, 1.0);
    while (v - x).abs() > eps {
        v = if v > x { v.next_down() } else { v.next_up() };
    }
    v
}

fn check_inputs(model: &dyn Classifier, images: &Tensor, labels: &[usize], eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::param("epsilon", format!("must be >= 0, got {eps}")));
    }
    if images.rank() == 0 || images.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            op: "attack",
            lhs: images.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::param("labels", format!("label {y} out of range")));
    }
    Ok(())
}

fn step(model: &dyn Classifier, origin: &Tensor, current: &Tensor, labels: &[usize], size: f64, eps: f64) -> Result<Tensor> {
    let grad = model.input_gradient(current, labels)?;
    let data = origin
        .data()
        .iter()
        .zip(current.data())
        .zip(&grad)
        .map(|((&x, &c), &g)| project(x, c + size * sign(g), eps))
        .collect();
    Tensor::new(origin.shape().to_vec(), data)
}

/// One signed-gradient step of size `epsilon`, clipped to [0, 1].
pub fn fgsm_attack(model: &dyn Classifier, images: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    check_inputs(model, images, labels, epsilon)?;
    step(model, images, images, labels, epsilon, epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; `epsilon / 4` when absent.
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            steps: 10,
            alpha: None,
            random_start: true,
            seed: 0,
        }
    }
}

impl PgdConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }
}

/// Iterated FGSM with projection after every step.
pub fn pgd_attack(model: &dyn Classifier, images: &Tensor, labels: &[usize], cfg: &PgdConfig) -> Result<Tensor> {
    check_inputs(model, images, labels, cfg.epsilon)?;
    if cfg.steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let alpha = cfg.step_size();
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::param("alpha", format!("must be >= 0, got {alpha}")));
    }
    let eps = cfg.epsilon;
    let mut current = if cfg.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data = images
            .data()
            .iter()
            .map(|&x| project(x, x + rng.random_range(-eps..=eps), eps))
            .collect();
        Tensor::new(images.shape().to_vec(), data)?
    } else {
        images.clone()
    };
    for _ in 0..cfg.steps {
        current = step(model, images, &current, labels, alpha, eps)?;
    }
    Ok(current)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub epsilon: f64,
}

fn accuracy(model: &dyn Classifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.logits(images)?;
    Ok(accuracy_from_logits(logits.data(), model.num_classes(), labels))
}

/// Clean, FGSM and PGD accuracy at `cfg.epsilon`.
pub fn attack_report(model: &dyn Classifier, images: &Tensor, labels: &[usize], cfg: &PgdConfig) -> Result<AttackReport> {
    let fgsm = fgsm_attack(model, images, labels, cfg.epsilon)?;
    let pgd = pgd_attack(model, images, labels, cfg)?;
    Ok(AttackReport {
        clean_acc: accuracy(model, images, labels)?,
        fgsm_acc: accuracy(model, &fgsm, labels)?,
        pgd_acc: accuracy(model, &pgd, labels)?,
        epsilon: cfg.epsilon,
    })
}
