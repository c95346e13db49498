use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{dot, fmt_f64, norm, Objective};
use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub k: usize,
    pub iterations: usize,
    /// Relative change of the Ritz value that counts as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            k: 2,
            iterations: 50,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianDirections {
    /// Unit vectors, mutually orthogonal.
    pub directions: Vec<Vec<f64>>,
    pub ritz_values: Vec<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

/// Hessian-vector product by central differences of the gradient.
pub fn hessian_vector_product(objective: &dyn Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let inf_norm = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let h = 1e-4 * (1.0 + inf_norm);
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - h * d).collect();
    let gp = objective.gradient(&plus)?;
    let gm = objective.gradient(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

fn orthogonalise(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

fn normalise(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::NonFinite {
            what: "power iteration",
            name: "direction norm".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Leading Hessian eigenpairs by power iteration with deflation.
///
/// Each later vector is re-orthogonalised against the earlier ones on every
/// iteration. A run that does not settle within `iterations` returns its
/// last iterate with `converged = false`.
pub fn top_hessian_directions(objective: &dyn Objective, theta: &[f64], cfg: &PowerConfig) -> Result<HessianDirections> {
    let dim = objective.dim();
    if theta.len() != dim {
        return Err(Error::Dimension {
            op: "top_hessian_directions",
            lhs: vec![theta.len()],
            rhs: vec![dim],
        });
    }
    if cfg.k == 0 || cfg.k > dim {
        return Err(Error::param("k", format!("must be in 1..={dim}")));
    }
    if cfg.iterations == 0 {
        return Err(Error::param("iterations", "must be at least 1"));
    }
    let mut out = HessianDirections {
        directions: Vec::new(),
        ritz_values: Vec::new(),
        converged: Vec::new(),
        iterations: Vec::new(),
    };
    for j in 0..cfg.k {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(j as u64);
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalise(&mut v, &out.directions);
        normalise(&mut v)?;
        let mut previous = f64::NAN;
        let (mut ritz, mut converged, mut used) = (0.0, false, 0);
        for it in 1..=cfg.iterations {
            let mut w = hessian_vector_product(objective, theta, &v)?;
            orthogonalise(&mut w, &out.directions);
            ritz = dot(&v, &w);
            used = it;
            if (ritz - previous).abs() <= cfg.tolerance * ritz.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
            previous = ritz;
            if it < cfg.iterations {
                normalise(&mut w)?;
                v = w;
            }
        }
        orthogonalise(&mut v, &out.directions);
        normalise(&mut v)?;
        out.directions.push(v);
        out.ritz_values.push(ritz);
        out.converged.push(converged);
        out.iterations.push(used);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub directions: [Vec<f64>; 2],
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` at `(alphas[i], betas[j])`.
    pub losses: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        self.losses[self.alphas.len() / 2][self.betas.len() / 2]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha\\beta");
        for b in &self.betas {
            s.push(',');
            s.push_str(&fmt_f64(*b));
        }
        s.push('\n');
        for (a, row) in self.alphas.iter().zip(&self.losses) {
            s.push_str(&fmt_f64(*a));
            for l in row {
                s.push(',');
                s.push_str(&fmt_f64(*l));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Evenly spaced coordinates over `[−extent, extent]` whose middle entry is
/// exactly zero.
pub fn grid_coordinates(extent: f64, grid: usize) -> Vec<f64> {
    if grid == 1 {
        return vec![0.0];
    }
    let half = (grid - 1) as f64;
    (0..grid).map(|i| extent * (2.0 * i as f64 - half) / half).collect()
}

/// Loss on the plane `θ + α d₁ + β d₂`.
pub fn loss_landscape(
    objective: &dyn Objective,
    theta: &[f64],
    directions: [&[f64]; 2],
    extent: f64,
    grid: usize,
) -> Result<LandscapeGrid> {
    if grid % 2 == 0 {
        return Err(Error::param("grid", format!("must be odd so the centre is a grid point, got {grid}")));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::param("extent", format!("must be > 0, got {extent}")));
    }
    let [d1, d2] = directions;
    for d in [d1, d2] {
        if d.len() != theta.len() {
            return Err(Error::Dimension {
                op: "loss_landscape",
                lhs: vec![d.len()],
                rhs: vec![theta.len()],
            });
        }
        if (norm(d) - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Contract("landscape directions must have unit norm".into()));
        }
    }
    if dot(d1, d2).abs() > ORTHONORMAL_TOL {
        return Err(Error::Contract("landscape directions must be orthogonal".into()));
    }
    let coords = grid_coordinates(extent, grid);
    let mut probe = vec![0.0; theta.len()];
    let mut losses = Vec::with_capacity(grid);
    for &a in &coords {
        let mut row = Vec::with_capacity(grid);
        for &b in &coords {
            for (((p, t), x), y) in probe.iter_mut().zip(theta).zip(d1).zip(d2) {
                *p = t + a * x + b * y;
            }
            row.push(objective.loss(&probe)?);
        }
        losses.push(row);
    }
    Ok(LandscapeGrid {
        directions: [d1.to_vec(), d2.to_vec()],
        alphas: coords.clone(),
        betas: coords,
        losses,
    })
}
