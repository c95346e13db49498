//! Distillation losses and feature-statistics operators.
//!
//! Everything here records onto a caller-owned [`Tape`], so the same code
//! path serves training, gradient checks, and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to student probabilities before taking the log.
pub const KL_FLOOR: f64 = 1e-12;

/// Guard added to channel standard deviations in the style operators.
pub const STYLE_EPS: f64 = 1e-5;

/// How the per-sample distillation terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide the double sum by the batch size.
    #[default]
    Mean,
    /// Plain double sum over groups and members.
    Sum,
}

/// Loss weight and temperature of the cross-domain distillation term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XdedConfig {
    pub lambda: f64,
    pub tau: f64,
    #[serde(alias = "xded_reduction")]
    pub reduction: Reduction,
}

impl Default for XdedConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            tau: 4.0,
            reduction: Reduction::Mean,
        }
    }
}

impl XdedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau", format!("must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// All batch positions sharing one class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroup {
    pub label: usize,
    pub members: Vec<usize>,
}

impl ClassGroup {
    pub fn new(label: usize, members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Contract(format!("class group {label} is empty")));
        }
        Ok(Self { label, members })
    }
}

/// Partition batch positions by label, ordered by label.
pub fn groups_from_labels(labels: &[usize]) -> Vec<ClassGroup> {
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    by_label
        .into_iter()
        .map(|(label, members)| ClassGroup { label, members })
        .collect()
}

/// Check that `groups` partition `0..labels.len()` and agree with the labels.
pub fn validate_groups(groups: &[ClassGroup], labels: &[usize]) -> Result<()> {
    let mut seen = vec![false; labels.len()];
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::Contract(format!("class group {} is empty", g.label)));
        }
        for &i in &g.members {
            if i >= labels.len() || seen[i] {
                return Err(Error::Contract(format!(
                    "batch index {i} missing or repeated across groups"
                )));
            }
            if labels[i] != g.label {
                return Err(Error::Contract(format!(
                    "sample {i} has label {} but sits in group {}",
                    labels[i], g.label
                )));
            }
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Error::Contract(format!("batch index {i} is in no group")));
    }
    Ok(())
}

/// `softmax(z / tau)` along the last axis.
pub fn softmax_temperature(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    tape.softmax_temperature(logits, tau)
}

/// `KL(p ‖ q)` between distributions, summed over rows.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    tape.kl_divergence(p, q, KL_FLOOR)
}

/// Detached mean of the group's logit rows.
pub fn ensemble_logits(tape: &mut Tape, logits: Var, group: &ClassGroup) -> Result<Var> {
    if group.members.is_empty() {
        return Err(Error::Contract(format!("class group {} is empty", group.label)));
    }
    let teacher = tape.detach(logits);
    let rows = tape.select_rows(teacher, &group.members)?;
    tape.mean_rows(rows)
}

/// Cross-domain ensemble distillation loss with a detached teacher.
pub fn xded_loss(
    tape: &mut Tape,
    logits: Var,
    groups: &[ClassGroup],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    xded_loss_with_teacher(tape, logits, logits, groups, tau, reduction)
}

/// As [`xded_loss`], but ensembles are built from `teacher_logits`.
///
/// Passing a detached copy of the student logits must give exactly the same
/// loss and gradients as passing the student logits themselves.
pub fn xded_loss_with_teacher(
    tape: &mut Tape,
    logits: Var,
    teacher_logits: Var,
    groups: &[ClassGroup],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || tape.shape(teacher_logits) != shape.as_slice() {
        return Err(Error::Dimension {
            op: "xded_loss",
            lhs: shape,
            rhs: tape.shape(teacher_logits).to_vec(),
        });
    }
    let (n, classes) = (shape[0], shape[1]);
    let mut total: Option<Var> = None;
    for group in groups {
        let ensemble = ensemble_logits(tape, teacher_logits, group)?;
        let teacher = tape.softmax_temperature(ensemble, tau)?;
        let row = tape.data(teacher).to_vec();
        let mut repeated = Vec::with_capacity(group.members.len() * classes);
        for _ in &group.members {
            repeated.extend_from_slice(&row);
        }
        let target = tape.constant(Tensor::new(vec![group.members.len(), classes], repeated)?);
        let student = tape.select_rows(logits, &group.members)?;
        let kl = tape.softmax_kl(target, student, tau, KL_FLOOR)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::Contract("xded_loss needs at least one group".into())),
    };
    Ok(match reduction {
        Reduction::Mean => tape.mul_scalar(total, 1.0 / n as f64),
        Reduction::Sum => total,
    })
}

/// Mean cross-entropy at temperature 1.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::param("labels", format!("label {bad} outside [0, {})", shape[1])));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// The scalar pieces of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub xded: Option<Var>,
}

/// `CE + λ · XDED`; the distillation term is skipped entirely when λ = 0.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    groups: &[ClassGroup],
    cfg: &XdedConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let ce = cross_entropy(tape, logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(LossTerms {
            total: ce,
            ce,
            xded: None,
        });
    }
    validate_groups(groups, labels)?;
    let xded = xded_loss(tape, logits, groups, cfg.tau, cfg.reduction)?;
    let weighted = tape.mul_scalar(xded, cfg.lambda);
    let total = tape.add(ce, weighted)?;
    Ok(LossTerms {
        total,
        ce,
        xded: Some(xded),
    })
}

/// Per-sample, per-channel standardization to zero mean and unit deviation.
pub fn unistyle(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.standardize(features, STYLE_EPS)
}

/// Beta concentration and application probability of MixStyle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixStyleConfig {
    pub alpha: f64,
    pub prob: f64,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            prob: 0.5,
        }
    }
}

/// What [`mixstyle`] did to a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixOutcome {
    Mixed,
    Identity,
    /// Fewer than two samples: nothing to mix with.
    TooSmall,
}

/// MixStyle baseline: with probability `prob`, re-style every sample with
/// statistics interpolated towards those of a randomly permuted partner.
pub fn mixstyle(
    tape: &mut Tape,
    features: Var,
    rng: &mut dyn RngCore,
    cfg: &MixStyleConfig,
) -> Result<(Var, MixOutcome)> {
    let n = tape.shape(features)[0];
    if n < 2 {
        return Ok((features, MixOutcome::TooSmall));
    }
    if cfg.prob <= 0.0 || rng.random::<f64>() >= cfg.prob {
        return Ok((features, MixOutcome::Identity));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::param("alpha", e.to_string()))?;
    let lambdas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok((mixstyle_with(tape, features, &lambdas, &perm)?, MixOutcome::Mixed))
}

/// Deterministic core of [`mixstyle`] with explicit per-sample mixing
/// weights and partner permutation.
///
/// Output is `σ̃ · (F − μ) / (σ + ε) + μ̃` where `μ̃` mixes the means and `σ̃`
/// mixes the guarded deviations `σ + ε` of each sample and its partner.
pub fn mixstyle_with(tape: &mut Tape, features: Var, lambdas: &[f64], perm: &[usize]) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() < 3 || lambdas.len() != shape[0] || perm.len() != shape[0] {
        return Err(Error::Dimension {
            op: "mixstyle",
            lhs: shape,
            rhs: vec![lambdas.len(), perm.len()],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let mean = tape.channel_mean(features)?;
    let std = tape.channel_std(features)?;
    let normed = tape.standardize(features, STYLE_EPS)?;
    let weight: Vec<f64> = lambdas.iter().flat_map(|&l| std::iter::repeat_n(l, c)).collect();
    let own = tape.constant(Tensor::new(vec![n, c], weight.clone())?);
    let other = tape.constant(Tensor::new(vec![n, c], weight.iter().map(|l| 1.0 - l).collect())?);
    let mix = |tape: &mut Tape, stat: Var| -> Result<Var> {
        let partner = tape.select_rows(stat, perm)?;
        let a = tape.mul(own, stat)?;
        let b = tape.mul(other, partner)?;
        tape.add(a, b)
    };
    // Mixing the guarded deviations σ + ε makes a self-mix an exact identity.
    let guarded = tape.add_scalar(std, STYLE_EPS);
    let mixed_mean = mix(tape, mean)?;
    let mixed_std = mix(tape, guarded)?;
    tape.channel_affine(normed, mixed_std, mixed_mean)
}
