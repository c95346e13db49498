use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{fmt_f64, Objective};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.005, 0.01, 0.02, 0.05];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessPoint {
    pub sigma: f64,
    pub mean_increase: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub std_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCurve {
    pub base_loss: f64,
    pub n_runs: usize,
    pub points: Vec<FlatnessPoint>,
}

impl FlatnessCurve {
    pub fn at(&self, sigma: f64) -> Option<&FlatnessPoint> {
        self.points.iter().find(|p| p.sigma == sigma)
    }

    /// Standard error of the mean increase at `sigma`.
    pub fn standard_error(&self, sigma: f64) -> Option<f64> {
        self.at(sigma).map(|p| p.std_increase / (self.n_runs as f64).sqrt())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,mean_increase,std_increase,base_loss\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(p.sigma),
                fmt_f64(p.mean_increase),
                fmt_f64(p.std_increase),
                fmt_f64(self.base_loss)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Loss increase under i.i.d. Gaussian weight noise.
///
/// Run `r` draws one standard-normal direction `z` from the stream keyed by
/// `(seed, r)` and evaluates `θ + σ·z` for every σ, so σ = 0 is exactly the
/// base loss and results do not depend on evaluation order.
pub fn flatness_probe(
    objective: &dyn Objective,
    theta: &[f64],
    sigmas: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<FlatnessCurve> {
    if n_runs == 0 {
        return Err(Error::param("n_runs", "must be at least 1"));
    }
    if !sigmas.contains(&0.0) {
        return Err(Error::param("sigmas", "must include 0"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::param("sigmas", format!("invalid noise level {s}")));
    }
    let base_loss = objective.loss(theta)?;
    let mut increases = vec![Vec::with_capacity(n_runs); sigmas.len()];
    let mut probe = vec![0.0; theta.len()];
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64);
        let z: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (k, &sigma) in sigmas.iter().enumerate() {
            let inc = if sigma == 0.0 {
                0.0
            } else {
                for ((p, t), zi) in probe.iter_mut().zip(theta).zip(&z) {
                    *p = t + sigma * zi;
                }
                objective.loss(&probe)? - base_loss
            };
            increases[k].push(inc);
        }
    }
    let points = sigmas
        .iter()
        .zip(&increases)
        .map(|(&sigma, inc)| {
            let n = inc.len() as f64;
            let mean = inc.iter().sum::<f64>() / n;
            let var = if inc.len() > 1 {
                inc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            if !mean.is_finite() {
                return Err(Error::NonFinite {
                    what: "perturbed loss",
                    name: format!("sigma {sigma}"),
                });
            }
            Ok(FlatnessPoint {
                sigma,
                mean_increase: mean,
                std_increase: var.sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatnessCurve {
        base_loss,
        n_runs,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Quadratic;

    #[test]
    fn zero_sigma_is_exactly_zero() {
        let q = Quadratic::from_coefficients(&[1.0, 2.0]);
        let c = flatness_probe(&q, &[0.3, -0.1], &[0.0, 0.1], 10, 1).unwrap();
        let p = c.at(0.0).unwrap();
        assert_eq!((p.mean_increase, p.std_increase), (0.0, 0.0));
    }

    #[test]
    fn preconditions() {
        let q = Quadratic::from_coefficients(&[1.0]);
        assert!(flatness_probe(&q, &[0.0], &[0.1], 10, 1).is_err());
        assert!(flatness_probe(&q, &[0.0], &[0.0], 0, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let q = Quadratic::from_coefficients(&[1.0]);
        let c = flatness_probe(&q, &[0.0], &[0.0, 0.5], 3, 1).unwrap();
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sigma,mean_increase,std_increase,base_loss");
        assert_eq!(lines.len(), 3);
    }
}
