//! Baseline-age decomposition and longitudinal mixed models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::MeasurementRecord;
use crate::dist::{Family, LinkSet};
use crate::engine::{
    fit_with, ChartModel, Design, Encoding, Features, FitOptions, ModelSpec, Observation, Response,
    StudyEffectMode,
};
use crate::error::{Error, Result};
use crate::fp::PowerSet;
use crate::special::normal_cdf;

/// A measurement with age split into baseline age and time since baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    pub record: MeasurementRecord,
    pub age_b: f64,
    pub time_b: f64,
}

impl LongitudinalRecord {
    /// Observation with the subject as group, `age = age_b`, `time = time_b`.
    pub fn observation(&self, response: Response) -> Option<Observation> {
        let mut o = self.record.observation(response)?;
        o.age = self.age_b;
        o.time = self.time_b;
        o.group = self.record.subject_id.clone();
        Some(o)
    }
}

fn valid_date(d: &str) -> bool {
    let b = d.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

/// `age − age_b`, nudged so that `age_b + time_b == age` holds exactly.
fn exact_difference(age: f64, age_b: f64) -> f64 {
    let mut t = age - age_b;
    for _ in 0..4 {
        let s = age_b + t;
        if s == age {
            break;
        }
        t = if s < age { t.next_up() } else { t.next_down() };
    }
    t
}

/// Splits every record's age into `age_b` (age at the subject's earliest
/// scan) and `time_b = age − age_b`.
///
/// Scans are ordered by acquisition date when every scan of the subject
/// has one, otherwise by age. Output keeps the input order.
pub fn decompose_age(records: &[MeasurementRecord]) -> Result<Vec<LongitudinalRecord>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(d) = &r.date {
            if !valid_date(d) {
                return Err(Error::Parse(format!(
                    "scan {}: date {d:?} is not YYYY-MM-DD",
                    r.scan_id
                )));
            }
        }
        by_subject.entry(r.subject_id.as_str()).or_default().push(i);
    }
    let mut age_b = vec![f64::NAN; records.len()];
    let mut inconsistent = Vec::new();
    for (subject, rows) in &by_subject {
        let dated = rows.iter().all(|&i| records[i].date.is_some());
        let first = *rows
            .iter()
            .min_by(|&&a, &&b| {
                let (ra, rb) = (&records[a], &records[b]);
                let by_date = if dated {
                    ra.date.cmp(&rb.date)
                } else {
                    std::cmp::Ordering::Equal
                };
                by_date
                    .then(ra.age.total_cmp(&rb.age))
                    .then(ra.scan_id.cmp(&rb.scan_id))
            })
            .expect("nonempty group");
        let base = records[first].age;
        if rows.iter().any(|&i| records[i].age < base) {
            inconsistent.push(subject.to_string());
        }
        for &i in rows {
            age_b[i] = base;
        }
    }
    if !inconsistent.is_empty() {
        return Err(Error::Contract(format!(
            "negative time since baseline (ages inconsistent with scan dates) for subjects {inconsistent:?}"
        )));
    }
    Ok(records
        .iter()
        .zip(age_b)
        .map(|(r, b)| LongitudinalRecord {
            record: r.clone(),
            age_b: b,
            time_b: exact_difference(r.age, b),
        })
        .collect())
}

fn long_observations(data: &[LongitudinalRecord], response: Response) -> Vec<Observation> {
    data.iter()
        .filter_map(|r| r.observation(response))
        .collect()
}

/// Longitudinal GG volume model: the cross-sectional specification with
/// age replaced by baseline age, the three time terms in μ, a penalized
/// subject intercept on μ and ν frozen at the cross-sectional estimate.
pub fn fit_long_volume(data: &[LongitudinalRecord], cross: &ChartModel) -> Result<ChartModel> {
    if cross.spec.family != Family::GeneralizedGamma {
        return Err(Error::Contract(
            "longitudinal volume models need a GG cross-sectional model".into(),
        ));
    }
    let nu_block = cross
        .block("nu")
        .ok_or_else(|| Error::Contract("cross-sectional model has no nu".into()))?;
    let nu = nu_block
        .fixed_value
        .unwrap_or_else(|| nu_block.link.inverse(nu_block.estimates[0]));
    let spec = ModelSpec {
        mu_time: true,
        study_mu: true,
        study_sigma: false,
        study_effect_mode: StudyEffectMode::PenalizedRandom,
        fixed_nu: Some(nu),
        fixed_delta2: None,
        ..cross.spec.clone()
    };
    let obs = long_observations(data, Response::VolumeMl);
    let opts = FitOptions {
        warm_start: Some(cross),
        ..FitOptions::default()
    };
    Ok(fit_with(&obs, &spec, &cross.powers_mu, &cross.powers_sigma, &opts)?.0)
}

/// Fixed-effect estimate of a longitudinal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    /// `exp(estimate)` for log-link models, otherwise the estimate itself.
    pub transformed: f64,
    /// Two-sided Wald p-value.
    pub p_value: f64,
}

fn wald_p(est: f64, se: f64) -> f64 {
    if se > 0.0 {
        2.0 * (1.0 - normal_cdf((est / se).abs()))
    } else {
        f64::NAN
    }
}

/// Gaussian mixed mean model for attenuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongHuFit {
    pub contrast: bool,
    pub powers: PowerSet,
    pub encoding: Encoding,
    pub coefficients: Vec<Coefficient>,
    pub subjects: Vec<String>,
    pub subject_effects: Vec<f64>,
    pub subject_variance: f64,
    pub residual_variance: f64,
    pub n: usize,
    pub iterations: usize,
}

impl LongHuFit {
    pub fn coefficient(&self, term: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.term == term)
    }
}

const LMM_MAX_ITER: usize = 5000;
const LMM_TOL: f64 = 1e-7;

/// Fits `y = Xβ + b_subject + ε` for one contrast state by penalized least
/// squares (Henderson's equations), updating both variance components
/// until they settle.
pub fn fit_long_hu(
    data: &[LongitudinalRecord],
    powers: &PowerSet,
    contrast: bool,
) -> Result<LongHuFit> {
    let rows: Vec<&LongitudinalRecord> = data
        .iter()
        .filter(|r| r.record.contrast == contrast)
        .collect();
    let obs: Vec<Observation> = rows
        .iter()
        .filter_map(|r| r.observation(Response::MeanHu))
        .collect();
    if obs.is_empty() {
        return Err(Error::Contract(format!(
            "no attenuation records with contrast = {contrast}"
        )));
    }
    let spec = ModelSpec {
        family: Family::SkewT1,
        response: Response::MeanHu,
        links: LinkSet::default_for(Family::SkewT1),
        mu_time: true,
        study_mu: false,
        study_sigma: false,
        study_effect_mode: StudyEffectMode::None,
        ..ModelSpec::attenuation()
    }
    .adapted_to(&obs);
    let encoding = Encoding::from_data(&obs, &spec)?;
    let null = PowerSet::null();
    let feats = Features {
        spec: &spec,
        encoding: &encoding,
        powers_mu: powers,
        powers_sigma: &null,
    };
    let design = Design::build(&obs, &feats, None)?;
    let n = obs.len();
    let p = design.p(0);
    if n < 10 * p {
        return Err(Error::Contract(format!(
            "{n} observations are too few for {p} coefficients"
        )));
    }
    let x = DMatrix::from_column_slice(n, p, &design.cols[0]);
    let y = DVector::from_iterator(n, obs.iter().map(|o| o.y));

    let subjects: Vec<String> = obs
        .iter()
        .map(|o| o.group.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let g_of: Vec<usize> = obs
        .iter()
        .map(|o| subjects.binary_search(&o.group).expect("collected"))
        .collect();
    let ng = subjects.len();
    let mut counts = vec![0.0; ng];
    let mut xg = DMatrix::<f64>::zeros(p, ng);
    let mut yg = vec![0.0; ng];
    for i in 0..n {
        let g = g_of[i];
        counts[g] += 1.0;
        yg[g] += y[i];
        for j in 0..p {
            xg[(j, g)] += x[(i, j)];
        }
    }
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;

    // Start from OLS: residual variance split evenly between the components.
    let ols = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular normal equations".into()))?;
    let r0 = &y - &x * ols.solve(&xty);
    let v0 = r0.norm_squared() / n as f64;
    let (mut s2b, mut s2e) = (0.5 * v0, 0.5 * v0);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let lambda = s2e / s2b;
        let d: Vec<f64> = counts.iter().map(|c| c + lambda).collect();
        let mut s = xtx.clone();
        let mut rhs = xty.clone();
        for g in 0..ng {
            let col = xg.column(g);
            s -= (col * col.transpose()) / d[g];
            rhs -= col * (yg[g] / d[g]);
        }
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numerical("mixed-model equations are singular".into()))?;
        let beta = chol.solve(&rhs);
        let s_inv = chol.inverse();
        let xb = &x * &beta;
        let mut resid_g = vec![0.0; ng];
        for i in 0..n {
            resid_g[g_of[i]] += y[i] - xb[i];
        }
        let b: Vec<f64> = (0..ng).map(|g| resid_g[g] / d[g]).collect();
        let mut tr = 0.0;
        for g in 0..ng {
            let col = xg.column(g);
            tr += 1.0 / d[g] + (col.transpose() * &s_inv * col)[(0, 0)] / (d[g] * d[g]);
        }
        let edf_b = ng as f64 - lambda * tr;
        let rss: f64 = (0..n).map(|i| (y[i] - xb[i] - b[g_of[i]]).powi(2)).sum();
        let ss_b: f64 = b.iter().map(|v| v * v).sum();
        let next_b = if edf_b > 1e-8 {
            (ss_b / edf_b).max(1e-12 * v0)
        } else {
            1e-12 * v0
        };
        let next_e = rss / (n as f64 - p as f64 - edf_b).max(1.0);
        let change = (next_b - s2b).abs().max((next_e - s2e).abs()) / (s2b + s2e);
        s2b = next_b;
        s2e = next_e;
        if change < LMM_TOL || iterations >= LMM_MAX_ITER {
            if change >= LMM_TOL {
                return Err(Error::NonConvergence {
                    iterations,
                    gradient_norm: change,
                    best: None,
                });
            }
            let raw = design.std.to_raw(0, beta.as_slice());
            let jac = design.std.jacobian(0);
            let cov = &jac * (s_inv * s2e) * jac.transpose();
            let coefficients = design.names[0]
                .iter()
                .enumerate()
                .map(|(j, term)| {
                    let se = cov[(j, j)].max(0.0).sqrt();
                    Coefficient {
                        term: term.clone(),
                        estimate: raw[j],
                        std_error: se,
                        transformed: raw[j],
                        p_value: wald_p(raw[j], se),
                    }
                })
                .collect();
            return Ok(LongHuFit {
                contrast,
                powers: powers.clone(),
                encoding,
                coefficients,
                subjects,
                subject_effects: b,
                subject_variance: s2b,
                residual_variance: s2e,
                n,
                iterations,
            });
        }
    }
}

/// μ coefficients of a fitted chart model in reporting form.
pub fn model_coefficients(model: &ChartModel) -> Vec<Coefficient> {
    let Some(block) = model.block("mu") else {
        return Vec::new();
    };
    let log = block.link == crate::dist::Link::Log;
    block
        .terms
        .iter()
        .enumerate()
        .map(|(j, term)| {
            let est = block.estimates[j];
            let se = block.std_errors.as_ref().map_or(f64::NAN, |s| s[j]);
            Coefficient {
                term: term.clone(),
                estimate: est,
                std_error: se,
                transformed: if log { est.exp() } else { est },
                p_value: wald_p(est, se),
            }
        })
        .collect()
}

/// Coefficient table as CSV: `term,estimate,transformed,std_error,p_value,significant`.
/// `significant` marks p below `alpha / family_size` (Bonferroni).
pub fn coefficients_csv(coefs: &[Coefficient], alpha: f64, family_size: usize) -> Result<String> {
    let threshold = alpha / family_size.max(1) as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "term",
        "estimate",
        "transformed",
        "std_error",
        "p_value",
        "significant",
    ])?;
    for c in coefs {
        w.write_record([
            c.term.clone(),
            c.estimate.to_string(),
            c.transformed.to_string(),
            c.std_error.to_string(),
            c.p_value.to_string(),
            (c.p_value < threshold).to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}
