use serde::{Deserialize, Serialize};

use super::design::{Covariates, Encoding, Features, RowWarnings, PARAM_NAMES};
use super::spec::{ModelSpec, StudyEffectMode};
use crate::dist::{FamilyParams, Link};
use crate::error::{Error, Result};
use crate::fp::PowerSet;

/// Coefficients of one distribution parameter on its link scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub parameter: String,
    pub link: Link,
    pub terms: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    /// Natural-scale value when the parameter was held fixed.
    pub fixed_value: Option<f64>,
}

/// Penalized group intercepts of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub parameter: String,
    pub link: Link,
    pub levels: Vec<String>,
    pub estimates: Vec<f64>,
    /// Estimated (or fixed) variance δ².
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    /// Unpenalized coefficient count entering BIC.
    pub n_coefficients: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    /// Penalized objective at the optimum.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Max-norm of the objective gradient divided by `n`.
    pub gradient_norm: f64,
    pub relative_objective_change: f64,
    /// δ² per random term after each outer update.
    pub variance_trace: Vec<Vec<f64>>,
}

/// A fitted distributional regression model for one structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartModel {
    pub spec: ModelSpec,
    pub powers_mu: PowerSet,
    pub powers_sigma: PowerSet,
    pub encoding: Encoding,
    pub parameters: Vec<ParameterBlock>,
    pub random_effects: Vec<RandomEffects>,
    pub fit: FitReport,
}

impl ChartModel {
    pub fn features(&self) -> Features<'_> {
        Features {
            spec: &self.spec,
            encoding: &self.encoding,
            powers_mu: &self.powers_mu,
            powers_sigma: &self.powers_sigma,
        }
    }

    pub fn block(&self, parameter: &str) -> Option<&ParameterBlock> {
        self.parameters.iter().find(|b| b.parameter == parameter)
    }

    /// Estimate and standard error of a named coefficient.
    pub fn coefficient(&self, parameter: &str, term: &str) -> Option<(f64, Option<f64>)> {
        let b = self.block(parameter)?;
        let j = b.terms.iter().position(|t| t == term)?;
        Some((b.estimates[j], b.std_errors.as_ref().map(|s| s[j])))
    }

    fn group_effect<C: Covariates + ?Sized>(&self, k: usize, c: &C, warn: &mut RowWarnings) -> f64 {
        if self.spec.study_effect_mode != StudyEffectMode::PenalizedRandom {
            return 0.0;
        }
        let Some(re) = self
            .random_effects
            .iter()
            .find(|r| r.parameter == PARAM_NAMES[k])
        else {
            return 0.0;
        };
        let Some(label) = c.group() else {
            return 0.0;
        };
        match re.levels.iter().position(|l| l == label) {
            Some(i) => re.estimates[i],
            None => {
                warn.unseen_group = true;
                0.0
            }
        }
    }

    /// Linear predictors `η_k` (NaN for absent parameters).
    pub fn linear_predictors<C: Covariates + ?Sized>(&self, c: &C) -> ([f64; 4], RowWarnings) {
        let feats = self.features();
        let mut warn = RowWarnings::default();
        let mut eta = [f64::NAN; 4];
        let mut row = Vec::new();
        for (k, block) in self.parameters.iter().enumerate() {
            if block.fixed_value.is_some() {
                continue;
            }
            row.clear();
            feats.row(k, c, &mut row, &mut warn);
            eta[k] = row
                .iter()
                .zip(&block.estimates)
                .map(|(x, b)| x * b)
                .sum::<f64>()
                + self.group_effect(k, c, &mut warn);
        }
        (eta, warn)
    }

    /// Natural-scale parameters at covariates `c`.
    pub fn predict<C: Covariates + ?Sized>(&self, c: &C) -> Result<(FamilyParams, RowWarnings)> {
        let (eta, warn) = self.linear_predictors(c);
        let values: Vec<f64> = self
            .parameters
            .iter()
            .enumerate()
            .map(|(k, b)| b.fixed_value.unwrap_or_else(|| b.link.inverse(eta[k])))
            .collect();
        Ok((FamilyParams::from_slice(self.spec.family, &values)?, warn))
    }

    /// d η_k / d age at covariates `c`.
    pub fn linear_predictor_dage<C: Covariates + ?Sized>(&self, k: usize, c: &C) -> f64 {
        let block = &self.parameters[k];
        if block.fixed_value.is_some() {
            return 0.0;
        }
        let d = self.features().row_dage(k, c);
        d.iter().zip(&block.estimates).map(|(a, b)| a * b).sum()
    }

    /// Reassembles the raw coefficient vector (fixed part only).
    pub(crate) fn raw_fixed(&self, k: usize) -> Option<&[f64]> {
        let b = self.parameters.get(k)?;
        (b.fixed_value.is_none()).then_some(b.estimates.as_slice())
    }

    /// Estimated fixed coefficients (raw scale, parameter order) followed by
    /// the random intercepts of each term.
    pub fn parameter_vector(&self) -> Vec<f64> {
        let fixed = self
            .parameters
            .iter()
            .filter(|b| b.fixed_value.is_none())
            .flat_map(|b| b.estimates.iter().copied());
        fixed
            .chain(
                self.random_effects
                    .iter()
                    .flat_map(|r| r.estimates.iter().copied()),
            )
            .collect()
    }

    /// Copy with coefficients replaced from a `parameter_vector` layout.
    pub fn with_parameter_vector(&self, theta: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        let expected = self.parameter_vector().len();
        if theta.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} coefficients, got {}",
                theta.len()
            )));
        }
        let mut it = theta.iter().copied();
        for b in m.parameters.iter_mut().filter(|b| b.fixed_value.is_none()) {
            b.estimates
                .iter_mut()
                .for_each(|v| *v = it.next().expect("length checked"));
        }
        for r in &mut m.random_effects {
            r.estimates
                .iter_mut()
                .for_each(|v| *v = it.next().expect("length checked"));
        }
        Ok(m)
    }
}
