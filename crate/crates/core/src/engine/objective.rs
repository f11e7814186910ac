use super::design::{Design, Standardization};
use super::model::ChartModel;
use super::spec::Observation;
use crate::dist::{
    gg_log_density, gg_row_derivs, st1_batch_derivs, st1_batch_logf, Family, LinkSet,
};
use crate::error::{Error, Result};

/// Penalized negative log-likelihood over the standardized parameter
/// vector `[β_μ | β_σ | β_ν | β_τ | γ per random term]`.
pub(crate) struct Problem<'a> {
    pub design: &'a Design,
    pub family: Family,
    pub links: LinkSet,
    pub y: &'a [f64],
    pub fixed_nu: Option<f64>,
    /// Penalty weight `1/δ²` per random term.
    pub inv_delta2: Vec<f64>,
}

pub(crate) trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

struct Natural {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    nu: f64,
    tau: f64,
}

impl Problem<'_> {
    fn natural(&self, theta: &[f64]) -> Natural {
        let d = self.design;
        let mu = d
            .linear_predictor(0, theta)
            .into_iter()
            .map(|e| self.links.mu.inverse(e))
            .collect();
        let sigma = d
            .linear_predictor(1, theta)
            .into_iter()
            .map(|e| self.links.sigma.inverse(e))
            .collect();
        let nu = match self.fixed_nu {
            Some(v) => v,
            None => self.links.nu.inverse(theta[d.offset(2)]),
        };
        let tau = if self.family == Family::SkewT1 {
            self.links.tau.inverse(theta[d.offset(3)])
        } else {
            f64::NAN
        };
        Natural { mu, sigma, nu, tau }
    }

    fn check_scalars(&self, p: &Natural) -> Result<()> {
        let bad = match self.family {
            Family::GeneralizedGamma => !p.nu.is_finite() || p.nu == 0.0,
            Family::SkewT1 => !p.nu.is_finite() || !(p.tau > 0.0) || !p.tau.is_finite(),
        };
        if bad {
            return Err(Error::NonFiniteLikelihood {
                index: 0,
                detail: format!("shape parameters out of range (nu={}, tau={})", p.nu, p.tau),
            });
        }
        Ok(())
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        let d = self.design;
        self.inv_delta2
            .iter()
            .enumerate()
            .map(|(t, w)| {
                let off = d.random_offset(t);
                0.5 * w
                    * theta[off..off + d.n_groups]
                        .iter()
                        .map(|g| g * g)
                        .sum::<f64>()
            })
            .sum()
    }

    /// Per-row log densities at `theta`.
    pub fn row_logf(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.natural(theta);
        self.check_scalars(&p)?;
        let lf = match self.family {
            Family::GeneralizedGamma => self
                .y
                .iter()
                .zip(&p.mu)
                .zip(&p.sigma)
                .map(|((&y, &m), &s)| gg_log_density(m, s, p.nu, y))
                .collect(),
            Family::SkewT1 => st1_batch_logf(self.y, &p.mu, &p.sigma, p.nu, p.tau),
        };
        Ok(lf)
    }

    pub fn loglik(&self, theta: &[f64]) -> Result<f64> {
        let lf = self.row_logf(theta)?;
        sum_checked(&lf, &self.natural(theta))
    }
}

fn non_finite(i: usize, p: &Natural, what: &str) -> Error {
    Error::NonFiniteLikelihood {
        index: i,
        detail: format!(
            "{what} at mu={}, sigma={}, nu={}, tau={}",
            p.mu[i], p.sigma[i], p.nu, p.tau
        ),
    }
}

fn sum_checked(lf: &[f64], p: &Natural) -> Result<f64> {
    let mut s = 0.0;
    for (i, v) in lf.iter().enumerate() {
        if !v.is_finite() {
            return Err(non_finite(i, p, "log density not finite"));
        }
        s += v;
    }
    Ok(s)
}

impl Objective for Problem<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(-self.loglik(theta)? + self.penalty(theta))
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.design;
        let n = d.n;
        let p = self.natural(theta);
        self.check_scalars(&p)?;
        let mut deta = [vec![0.0; n], vec![0.0; n]];
        let (mut dnu, mut dtau) = (0.0, 0.0);
        let mut ll = 0.0;
        match self.family {
            Family::GeneralizedGamma => {
                for i in 0..n {
                    let (lf, dm, ds, dn) = gg_row_derivs(self.y[i], p.mu[i], p.sigma[i], p.nu);
                    if !(lf.is_finite() && dm.is_finite() && ds.is_finite() && dn.is_finite()) {
                        return Err(non_finite(i, &p, "log density or score not finite"));
                    }
                    ll += lf;
                    deta[0][i] = dm * self.links.mu.dinverse_at(p.mu[i]);
                    deta[1][i] = ds * self.links.sigma.dinverse_at(p.sigma[i]);
                    dnu += dn;
                }
            }
            Family::SkewT1 => {
                let rows = st1_batch_derivs(self.y, &p.mu, &p.sigma, p.nu, p.tau);
                for (i, r) in rows.iter().enumerate() {
                    if !r.iter().all(|v| v.is_finite()) {
                        return Err(non_finite(i, &p, "log density or score not finite"));
                    }
                    ll += r[0];
                    deta[0][i] = r[1] * self.links.mu.dinverse_at(p.mu[i]);
                    deta[1][i] = r[2] * self.links.sigma.dinverse_at(p.sigma[i]);
                    dnu += r[3];
                    dtau += r[4];
                }
            }
        }
        let mut grad = vec![0.0; d.dim()];
        for k in 0..2 {
            let off = d.offset(k);
            for j in 0..d.p(k) {
                let col = &d.cols[k][j * n..(j + 1) * n];
                grad[off + j] = -col.iter().zip(&deta[k]).map(|(x, e)| x * e).sum::<f64>();
            }
        }
        if d.p(2) > 0 {
            grad[d.offset(2)] = -dnu * self.links.nu.dinverse_at(p.nu);
        }
        if d.p(3) > 0 {
            grad[d.offset(3)] = -dtau * self.links.tau.dinverse_at(p.tau);
        }
        for (t, &k) in d.random_params.iter().enumerate() {
            let off = d.random_offset(t);
            for (i, &g) in d.group.iter().enumerate() {
                grad[off + g] -= deta[k][i];
            }
            let w = self.inv_delta2[t];
            for g in 0..d.n_groups {
                grad[off + g] += w * theta[off + g];
            }
        }
        Ok((-ll + self.penalty(theta), grad))
    }
}

fn model_problem<'a>(model: &ChartModel, design: &'a Design, y: &'a [f64]) -> Problem<'a> {
    Problem {
        design,
        family: model.spec.family,
        links: model.spec.links,
        y,
        fixed_nu: model.spec.fixed_nu,
        inv_delta2: model
            .random_effects
            .iter()
            .map(|r| 1.0 / r.variance)
            .collect(),
    }
}

fn raw_design(model: &ChartModel, data: &[Observation]) -> Result<Design> {
    let feats = model.features();
    let identity = Standardization::identity(std::array::from_fn(|k| feats.names(k).len()));
    let design = Design::build(data, &feats, Some(&identity))?;
    if design.dim() != model.parameter_vector().len() {
        return Err(Error::Contract(format!(
            "model has {} coefficients but the data imply {}",
            model.parameter_vector().len(),
            design.dim()
        )));
    }
    Ok(design)
}

/// Penalized negative log-likelihood of `data` at the model's coefficients
/// and its gradient with respect to `ChartModel::parameter_vector`.
pub fn negloglik_grad(model: &ChartModel, data: &[Observation]) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Contract(
            "negative log-likelihood needs at least one observation".into(),
        ));
    }
    let design = raw_design(model, data)?;
    let y: Vec<f64> = data.iter().map(|o| o.y).collect();
    model_problem(model, &design, &y).value_grad(&model.parameter_vector())
}

pub fn negloglik(model: &ChartModel, data: &[Observation]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(
            "negative log-likelihood needs at least one observation".into(),
        ));
    }
    let design = raw_design(model, data)?;
    let y: Vec<f64> = data.iter().map(|o| o.y).collect();
    model_problem(model, &design, &y).value(&model.parameter_vector())
}
