use nalgebra::{DMatrix, DVector};

use super::design::{Design, Encoding, Features, Standardization, PARAM_NAMES};
use super::model::{ChartModel, FitReport, ParameterBlock, RandomEffects};
use super::objective::{Objective, Problem};
use super::optim::{bfgs, inf_norm, newton, Layout, OptOutcome, StructuredHessian};
use super::spec::{ModelSpec, Observation};
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::fp::PowerSet;

/// Gradient tolerance per observation on the standardized scale.
const GRAD_TOL_PER_OBS: f64 = 1e-6;
const DELTA2_FLOOR: f64 = 1e-10;
const DELTA2_CEIL: f64 = 1e6;
const DELTA2_REL_TOL: f64 = 1e-4;
const MAX_OUTER: usize = 200;
const ACCEPT_GRAD: f64 = 1e-5;
const ACCEPT_REL_CHANGE: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    /// Starting values from a related fit (matching terms are reused).
    pub warm_start: Option<&'a ChartModel>,
    pub skip_standard_errors: bool,
    /// Iteration cap for the inner optimizer (0 = default).
    pub max_iter: usize,
    pub(crate) reuse: Option<&'a FitInternals>,
}

/// State of a finished fit that speeds up refits on resampled data.
#[derive(Debug, Clone)]
pub struct FitInternals {
    pub(crate) encoding: Encoding,
    pub(crate) std: Standardization,
    /// Inverse Hessian of the fixed coefficients on the standardized scale.
    pub(crate) inv_hessian: Option<DMatrix<f64>>,
}

/// Fits `spec` with the given FP powers.
pub fn fit(
    data: &[Observation],
    spec: &ModelSpec,
    powers_mu: &PowerSet,
    powers_sigma: &PowerSet,
) -> Result<ChartModel> {
    fit_with(data, spec, powers_mu, powers_sigma, &FitOptions::default()).map(|(m, _)| m)
}

pub fn fit_with(
    data: &[Observation],
    spec: &ModelSpec,
    powers_mu: &PowerSet,
    powers_sigma: &PowerSet,
    opts: &FitOptions<'_>,
) -> Result<(ChartModel, FitInternals)> {
    validate_spec(spec)?;
    let encoding = match opts.reuse {
        Some(r) => r.encoding.clone(),
        None => Encoding::from_data(data, spec)?,
    };
    let feats = Features {
        spec,
        encoding: &encoding,
        powers_mu,
        powers_sigma,
    };
    let design = Design::build(data, &feats, opts.reuse.map(|r| &r.std))?;
    let n = design.n;
    let k = design.n_fixed();
    if n < 10 * k {
        return Err(Error::Contract(format!(
            "{n} observations are too few for {k} coefficients (need at least {})",
            10 * k
        )));
    }
    let y: Vec<f64> = data.iter().map(|o| o.y).collect();
    check_response(spec.family, &y)?;

    let mut delta2 = initial_delta2(&design, spec, &y);
    let mut problem = Problem {
        design: &design,
        family: spec.family,
        links: spec.links,
        y: &y,
        fixed_nu: spec.fixed_nu,
        inv_delta2: delta2.iter().map(|d| 1.0 / d).collect(),
    };
    let x0 = start_vector(&design, spec, &y, opts.warm_start, &encoding);
    let gtol = GRAD_TOL_PER_OBS * n as f64;
    let max_iter = if opts.max_iter == 0 {
        1000
    } else {
        opts.max_iter
    };
    let layout = Layout {
        n_fixed: k,
        n_terms: design.random_params.len(),
        n_groups: design.n_groups,
    };

    let mut variance_trace = Vec::new();
    let mut outer_iterations = 0;
    let mut total_iterations = 0;
    let mut out: OptOutcome;
    if layout.n_terms == 0 {
        let h0 = opts.reuse.and_then(|r| r.inv_hessian.as_ref());
        out = bfgs(&problem, x0, h0, n as f64, gtol, max_iter)?;
        total_iterations += out.iterations;
    } else {
        let mut x = x0;
        loop {
            outer_iterations += 1;
            out = newton(&problem, x, layout, gtol, max_iter.min(200))?;
            total_iterations += out.iterations;
            x = out.x.clone();
            out.converged = out.converged || settled(&out, n);
            if spec.fixed_delta2.is_some() || !out.converged || outer_iterations >= MAX_OUTER {
                break;
            }
            let hess = StructuredHessian::compute(&problem, &x, layout)?;
            let Some(fac) = hess.factor(0.0) else {
                break;
            };
            let mut max_change: f64 = 0.0;
            for t in 0..layout.n_terms {
                let off = design.random_offset(t);
                let ss: f64 = x[off..off + design.n_groups].iter().map(|g| g * g).sum();
                let edf = design.n_groups as f64 - fac.trace_term(t) / delta2[t];
                let next = if edf > 1e-8 {
                    (ss / edf).clamp(DELTA2_FLOOR, DELTA2_CEIL)
                } else {
                    DELTA2_FLOOR
                };
                max_change = max_change.max((next - delta2[t]).abs() / delta2[t]);
                delta2[t] = next;
            }
            variance_trace.push(delta2.clone());
            problem.inv_delta2 = delta2.iter().map(|d| 1.0 / d).collect();
            if max_change < DELTA2_REL_TOL {
                out = newton(&problem, x, layout, gtol, max_iter.min(200))?;
                total_iterations += out.iterations;
                break;
            }
        }
    }

    // Standard errors and a final Newton polish from the same Hessian.
    let mut cov_std = None;
    if !opts.skip_standard_errors || !out.converged {
        let hess = StructuredHessian::compute(&problem, &out.x, layout)?;
        if let Some(fac) = hess.factor(0.0) {
            let step = fac.solve(&out.grad);
            let xn: Vec<f64> = out.x.iter().zip(&step).map(|(a, b)| a - b).collect();
            if let Ok((fv, gv)) = problem.value_grad(&xn) {
                if fv <= out.value && inf_norm(&gv) <= inf_norm(&out.grad) {
                    out.trace.push(fv);
                    out.x = xn;
                    out.value = fv;
                    out.grad = gv;
                    out.converged = out.converged || inf_norm(&out.grad) <= gtol;
                }
            }
            cov_std = Some(fac.cov_fixed().clone());
        }
    }

    let loglik = problem.loglik(&out.x)?;
    let rel_change = relative_change(&out.trace);
    out.converged = out.converged || settled(&out, n);
    let report = FitReport {
        n,
        n_coefficients: k,
        log_likelihood: loglik,
        bic: k as f64 * (n as f64).ln() - 2.0 * loglik,
        objective: out.value,
        converged: out.converged,
        iterations: total_iterations,
        outer_iterations,
        gradient_norm: inf_norm(&out.grad) / n as f64,
        relative_objective_change: rel_change,
        variance_trace,
    };
    let model = assemble(
        spec,
        powers_mu,
        powers_sigma,
        encoding.clone(),
        &design,
        &out.x,
        cov_std.as_ref().filter(|_| !opts.skip_standard_errors),
        &delta2,
        report,
    );
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: total_iterations,
            gradient_norm: inf_norm(&out.grad) / n as f64,
            best: Some(Box::new(model)),
        });
    }
    let internals = FitInternals {
        encoding: model.encoding.clone(),
        std: design.std.clone(),
        inv_hessian: cov_std.filter(|_| layout.n_terms == 0),
    };
    Ok((model, internals))
}

fn relative_change(trace: &[f64]) -> f64 {
    match trace.len() {
        0 | 1 => 0.0,
        m => (trace[m - 2] - trace[m - 1]).abs() / trace[m - 1].abs().max(1.0),
    }
}

/// A line search stalled at machine precision still counts as converged
/// when both reported criteria hold.
fn settled(out: &OptOutcome, n: usize) -> bool {
    inf_norm(&out.grad) / (n as f64) < ACCEPT_GRAD
        && relative_change(&out.trace) < ACCEPT_REL_CHANGE
}

fn validate_spec(spec: &ModelSpec) -> Result<()> {
    if spec.family == Family::SkewT1 && spec.mu_contrast {
        return Err(Error::Contract(
            "attenuation models are fitted per contrast state and take no contrast covariate"
                .into(),
        ));
    }
    if let Some(nu) = spec.fixed_nu {
        if !nu.is_finite() || (spec.family == Family::GeneralizedGamma && nu == 0.0) {
            return Err(Error::ParameterDomain(format!(
                "fixed nu must be finite and nonzero, got {nu}"
            )));
        }
    }
    if let Some(d) = spec.fixed_delta2 {
        if !(d > 0.0) {
            return Err(Error::Contract(format!(
                "fixed random-effect variance must be positive, got {d}"
            )));
        }
    }
    if !(spec.age_divisor > 0.0) {
        return Err(Error::Contract(format!(
            "age divisor must be positive, got {}",
            spec.age_divisor
        )));
    }
    Ok(())
}

fn check_response(family: Family, y: &[f64]) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        let ok = match family {
            Family::GeneralizedGamma => v > 0.0 && v.is_finite(),
            Family::SkewT1 => v.is_finite(),
        };
        if !ok {
            return Err(Error::Domain(format!(
                "response {v} at record {i} is outside the {family} support"
            )));
        }
    }
    Ok(())
}

/// Response on the μ link scale.
fn link_response(spec: &ModelSpec, y: &[f64]) -> Vec<f64> {
    y.iter().map(|&v| spec.links.mu.apply(v)).collect()
}

fn initial_delta2(design: &Design, spec: &ModelSpec, y: &[f64]) -> Vec<f64> {
    if let Some(d) = spec.fixed_delta2 {
        return vec![d; design.random_params.len()];
    }
    let z = link_response(spec, y);
    let (beta, _) = least_squares(design, 0, &z);
    let fitted = design.linear_predictor(0, &pad_mu(design, &beta));
    let mut sums = vec![(0.0, 0usize); design.n_groups];
    for (i, &g) in design.group.iter().enumerate() {
        sums[g].0 += z[i] - fitted[i];
        sums[g].1 += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .filter(|s| s.1 > 0)
        .map(|s| s.0 / s.1 as f64)
        .collect();
    let m = means.iter().sum::<f64>() / means.len().max(1) as f64;
    let var_between =
        means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len().max(1) as f64;
    design
        .random_params
        .iter()
        .map(|&k| if k == 0 { var_between.max(1e-4) } else { 0.01 })
        .collect()
}

fn pad_mu(design: &Design, beta: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; design.dim()];
    x[..beta.len()].copy_from_slice(beta);
    x
}

/// OLS of `z` on the standardized block `k`; returns coefficients and residuals.
fn least_squares(design: &Design, k: usize, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = design.n;
    let p = design.p(k);
    let x = DMatrix::from_column_slice(n, p, &design.cols[k]);
    let zv = DVector::from_column_slice(z);
    let xtx = x.transpose() * &x;
    let xtz = x.transpose() * &zv;
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xtz),
        None => xtx
            .svd(true, true)
            .solve(&xtz, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(p)),
    };
    let resid = zv - &x * &beta;
    (
        beta.iter().copied().collect(),
        resid.iter().copied().collect(),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn start_vector(
    design: &Design,
    spec: &ModelSpec,
    y: &[f64],
    warm: Option<&ChartModel>,
    encoding: &Encoding,
) -> Vec<f64> {
    let mut x = vec![0.0; design.dim()];
    let z = link_response(spec, y);
    let (beta_mu, resid) = least_squares(design, 0, &z);
    x[..beta_mu.len()].copy_from_slice(&beta_mu);
    let off_s = design.offset(1);
    match spec.family {
        Family::GeneralizedGamma => {
            let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64)
                .sqrt()
                .max(1e-3);
            // E[ln y] sits about σ²/2 below ln μ when ν = 1.
            x[0] += 0.5 * sd * sd;
            x[off_s] = sd.ln();
            if design.p(2) > 0 {
                x[design.offset(2)] = spec.links.nu.apply(1.0);
            }
        }
        Family::SkewT1 => {
            let mut abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
            let mad = 1.4826 * median(&mut abs);
            let scale = if mad > 0.0 {
                mad
            } else {
                (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64)
                    .sqrt()
                    .max(1e-3)
            };
            x[off_s] = spec.links.sigma.apply(scale);
            if design.p(2) > 0 {
                x[design.offset(2)] = spec.links.nu.apply(0.0);
            }
            x[design.offset(3)] = spec.links.tau.apply(10.0);
        }
    }
    if let Some(w) = warm {
        for k in 0..4 {
            let Some(raw) = w.raw_fixed(k) else { continue };
            if w.parameters[k].terms != design.names[k] {
                continue;
            }
            let std = design.std.to_std(k, raw);
            let off = design.offset(k);
            x[off..off + std.len()].copy_from_slice(&std);
        }
        for (t, &k) in design.random_params.iter().enumerate() {
            let Some(re) = w
                .random_effects
                .iter()
                .find(|r| r.parameter == PARAM_NAMES[k])
            else {
                continue;
            };
            for (level, est) in re.levels.iter().zip(&re.estimates) {
                if let Some(g) = encoding.group_index(level) {
                    x[design.random_offset(t) + g] = *est;
                }
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: &ModelSpec,
    powers_mu: &PowerSet,
    powers_sigma: &PowerSet,
    encoding: Encoding,
    design: &Design,
    theta: &[f64],
    cov_std: Option<&DMatrix<f64>>,
    delta2: &[f64],
    fit: FitReport,
) -> ChartModel {
    let links = [
        spec.links.mu,
        spec.links.sigma,
        spec.links.nu,
        spec.links.tau,
    ];
    let mut parameters = Vec::new();
    for k in 0..spec.family.n_params() {
        let p = design.p(k);
        let off = design.offset(k);
        if p == 0 {
            parameters.push(ParameterBlock {
                parameter: PARAM_NAMES[k].to_string(),
                link: links[k],
                terms: Vec::new(),
                estimates: Vec::new(),
                std_errors: None,
                fixed_value: spec.fixed_nu,
            });
            continue;
        }
        let raw = design.std.to_raw(k, &theta[off..off + p]);
        let std_errors = cov_std.map(|c| {
            let jac = design.std.jacobian(k);
            let block = c.view((off, off), (p, p)).into_owned();
            let cov = &jac * block * jac.transpose();
            (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect()
        });
        parameters.push(ParameterBlock {
            parameter: PARAM_NAMES[k].to_string(),
            link: links[k],
            terms: design.names[k].clone(),
            estimates: raw,
            std_errors,
            fixed_value: None,
        });
    }
    let random_effects = design
        .random_params
        .iter()
        .enumerate()
        .map(|(t, &k)| {
            let off = design.random_offset(t);
            RandomEffects {
                parameter: PARAM_NAMES[k].to_string(),
                link: links[k],
                levels: encoding.group_levels.clone(),
                estimates: theta[off..off + design.n_groups].to_vec(),
                variance: delta2[t],
            }
        })
        .collect();
    ChartModel {
        spec: spec.clone(),
        powers_mu: powers_mu.clone(),
        powers_sigma: powers_sigma.clone(),
        encoding,
        parameters,
        random_effects,
        fit,
    }
}
