//! Synthetic cohorts drawn from known chart models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sex;
use crate::dist::{Family, FamilyParams, LinkSet};
use crate::engine::{Covariates, Observation};
use crate::error::Result;
use crate::fp::{fp_design, PowerSet};

/// Link-scale predictor of one distribution parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub intercept: f64,
    pub sex: f64,
    pub powers: PowerSet,
    pub fp: Vec<f64>,
    /// Effect per manufacturer level (same order as `Truth::manufacturers`).
    pub manufacturer: Vec<f64>,
    /// Per unit of `kvp − 120`.
    pub kvp: f64,
    pub contrast: f64,
    /// Effect per study (same order as `Truth::studies`).
    pub study: Vec<f64>,
}

impl Predictor {
    pub fn constant(intercept: f64) -> Self {
        Self {
            intercept,
            sex: 0.0,
            powers: PowerSet::null(),
            fp: Vec::new(),
            manufacturer: Vec::new(),
            kvp: 0.0,
            contrast: 0.0,
            study: Vec::new(),
        }
    }
}

/// A data-generating chart model with covariate distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub family: Family,
    pub mu: Predictor,
    pub sigma: Predictor,
    pub nu: f64,
    /// ST1 only.
    pub tau: f64,
    pub age_divisor: f64,
    pub age_range: (f64, f64),
    pub studies: Vec<String>,
    pub manufacturers: Vec<String>,
    pub kvps: Vec<f64>,
    pub contrast_rate: f64,
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{}", i + 1)).collect()
}

impl Truth {
    /// Liver-like volume generator: log μ with FP powers (0.5, 2) in age/10,
    /// male-to-female ratio 1.25.
    pub fn volume_demo() -> Self {
        Self {
            family: Family::GeneralizedGamma,
            mu: Predictor {
                intercept: 6.6,
                sex: 1.25f64.ln(),
                powers: PowerSet::new(&[0.5, 2.0]).expect("standard powers"),
                fp: vec![0.5, -0.012],
                manufacturer: Vec::new(),
                kvp: 0.0,
                contrast: 0.0,
                study: Vec::new(),
            },
            sigma: Predictor {
                sex: -0.05,
                ..Predictor::constant(0.18f64.ln())
            },
            nu: 0.6,
            tau: f64::NAN,
            age_divisor: 10.0,
            age_range: (20.0, 90.0),
            studies: labels("study", 1),
            manufacturers: vec!["Siemens".into()],
            kvps: vec![120.0],
            contrast_rate: 0.0,
        }
    }

    /// Attenuation generator: identity μ in HU falling with age.
    pub fn attenuation_demo() -> Self {
        Self {
            family: Family::SkewT1,
            mu: Predictor {
                intercept: 62.0,
                sex: 2.0,
                powers: PowerSet::new(&[1.0]).expect("standard powers"),
                fp: vec![-2.5],
                manufacturer: Vec::new(),
                kvp: 0.0,
                contrast: 0.0,
                study: Vec::new(),
            },
            sigma: Predictor {
                sex: 0.05,
                ..Predictor::constant(8f64.ln())
            },
            nu: -1.5,
            tau: 8.0,
            age_divisor: 10.0,
            age_range: (20.0, 90.0),
            studies: labels("study", 1),
            manufacturers: vec!["Siemens".into()],
            kvps: vec![120.0],
            contrast_rate: 0.0,
        }
    }

    pub fn links(&self) -> LinkSet {
        LinkSet::default_for(self.family)
    }

    fn eta<C: Covariates + ?Sized>(&self, p: &Predictor, c: &C) -> Result<f64> {
        let mut eta = p.intercept;
        if c.sex() == Sex::M {
            eta += p.sex;
        }
        if p.powers.degree() > 0 {
            let x = fp_design(c.age() / self.age_divisor, &p.powers)?;
            eta += x.iter().zip(&p.fp).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(i) = self
            .manufacturers
            .iter()
            .position(|m| m == c.manufacturer())
        {
            eta += p.manufacturer.get(i).copied().unwrap_or(0.0);
        }
        if c.kvp().is_finite() {
            eta += p.kvp * (c.kvp() - 120.0);
        }
        if c.contrast() {
            eta += p.contrast;
        }
        if let Some(i) = c
            .group()
            .and_then(|g| self.studies.iter().position(|s| s == g))
        {
            eta += p.study.get(i).copied().unwrap_or(0.0);
        }
        Ok(eta)
    }

    /// True distribution at covariates `c`.
    pub fn params<C: Covariates + ?Sized>(&self, c: &C) -> Result<FamilyParams> {
        let links = self.links();
        let mu = links.mu.inverse(self.eta(&self.mu, c)?);
        let sigma = links.sigma.inverse(self.eta(&self.sigma, c)?);
        match self.family {
            Family::GeneralizedGamma => FamilyParams::gg(mu, sigma, self.nu),
            Family::SkewT1 => FamilyParams::st1(mu, sigma, self.nu, self.tau),
        }
    }

    /// Random covariates: uniform age, balanced sex, uniform study,
    /// manufacturer and kvp choices.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Observation {
        let (lo, hi) = self.age_range;
        let pick = |rng: &mut R, v: &[String]| v[rng.random_range(0..v.len())].clone();
        Observation {
            y: f64::NAN,
            age: rng.random_range(lo..hi),
            sex: if rng.random_bool(0.5) { Sex::M } else { Sex::F },
            manufacturer: pick(rng, &self.manufacturers),
            kvp: self.kvps[rng.random_range(0..self.kvps.len())],
            contrast: rng.random_bool(self.contrast_rate.clamp(0.0, 1.0)),
            group: pick(rng, &self.studies),
            time: 0.0,
        }
    }

    pub fn sample_at<R: Rng + ?Sized>(&self, rng: &mut R, c: &Observation) -> Result<f64> {
        Ok(self.params(c)?.sample_with(rng, 1)[0])
    }

    /// `n` observations with a fixed seed.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Observation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut o = self.draw_covariates(&mut rng);
                o.y = self.sample_at(&mut rng, &o)?;
                Ok(o)
            })
            .collect()
    }
}

/// Longitudinal cohort generator around a cross-sectional truth.
///
/// Volume: `log μ = η(age_b) + time·t + time_age·t·age_b/10 + time_sex·t·male + b_subject`
/// with GG noise from `base`. Attenuation: the same mean on the identity
/// scale plus Gaussian noise with `residual_sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalTruth {
    pub base: Truth,
    pub time: f64,
    pub time_age: f64,
    pub time_sex: f64,
    pub subject_sd: f64,
    pub residual_sd: f64,
    /// Inclusive range of scans per subject.
    pub scans: (usize, usize),
    /// Range of years between consecutive scans.
    pub gap: (f64, f64),
}

impl LongitudinalTruth {
    pub fn generate(
        &self,
        subjects: usize,
        seed: u64,
    ) -> Result<Vec<crate::data::MeasurementRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let links = self.base.links();
        for s in 0..subjects {
            let mut cov = self.base.draw_covariates(&mut rng);
            let age_b = cov.age;
            let b = self.subject_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let k = rng.random_range(self.scans.0..=self.scans.1);
            let mut t = 0.0;
            for j in 0..k {
                if j > 0 {
                    t += rng.random_range(self.gap.0..self.gap.1);
                }
                cov.age = age_b;
                let male = if cov.sex == Sex::M { 1.0 } else { 0.0 };
                let shift =
                    self.time * t + self.time_age * t * age_b / 10.0 + self.time_sex * t * male + b;
                let eta = self.base.eta(&self.base.mu, &cov)? + shift;
                let sigma = links.sigma.inverse(self.base.eta(&self.base.sigma, &cov)?);
                let y = match self.base.family {
                    Family::GeneralizedGamma => {
                        FamilyParams::gg(links.mu.inverse(eta), sigma, self.base.nu)?
                            .sample_with(&mut rng, 1)[0]
                    }
                    Family::SkewT1 => {
                        eta + self.residual_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    }
                };
                let (volume_ml, mean_hu) = match self.base.family {
                    Family::GeneralizedGamma => (Some(y), None),
                    Family::SkewT1 => (None, Some(y)),
                };
                out.push(crate::data::MeasurementRecord {
                    scan_id: format!("sub{s}-scan{j}"),
                    subject_id: format!("sub{s}"),
                    study: cov.group.clone(),
                    date: None,
                    age: age_b + t,
                    sex: cov.sex,
                    manufacturer: cov.manufacturer.clone(),
                    kvp: Some(cov.kvp),
                    contrast: cov.contrast,
                    structure_id: "structure".into(),
                    volume_ml,
                    mean_hu,
                });
            }
        }
        Ok(out)
    }
}
