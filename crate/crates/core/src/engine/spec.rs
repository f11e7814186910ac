use serde::{Deserialize, Serialize};

use crate::data::Sex;
use crate::dist::{Family, LinkSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    VolumeMl,
    MeanHu,
}

/// How group-level intercepts (studies, or subjects in longitudinal fits)
/// enter the predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyEffectMode {
    PenalizedRandom,
    Fixed,
    None,
}

/// Which terms enter each distribution parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub response: Response,
    pub links: LinkSet,
    pub mu_sex: bool,
    pub mu_manufacturer: bool,
    pub mu_kvp: bool,
    pub mu_contrast: bool,
    /// `time_b`, `time_b·age_b/10` and `time_b·sex` in μ.
    pub mu_time: bool,
    pub sigma_sex: bool,
    pub study_mu: bool,
    pub study_sigma: bool,
    pub study_effect_mode: StudyEffectMode,
    /// Holds ν at this natural-scale value instead of estimating it.
    pub fixed_nu: Option<f64>,
    /// Holds the random-intercept variances at this value instead of
    /// estimating them.
    pub fixed_delta2: Option<f64>,
    pub age_divisor: f64,
    pub kvp_center: f64,
}

impl ModelSpec {
    /// ST1 attenuation model for one contrast state.
    pub fn attenuation() -> Self {
        Self {
            family: Family::SkewT1,
            response: Response::MeanHu,
            links: LinkSet::default_for(Family::SkewT1),
            mu_sex: true,
            mu_manufacturer: true,
            mu_kvp: true,
            mu_contrast: false,
            mu_time: false,
            sigma_sex: true,
            study_mu: true,
            study_sigma: true,
            study_effect_mode: StudyEffectMode::PenalizedRandom,
            fixed_nu: None,
            fixed_delta2: None,
            age_divisor: 10.0,
            kvp_center: 120.0,
        }
    }

    /// GG volume model across contrast states.
    pub fn volume() -> Self {
        Self {
            family: Family::GeneralizedGamma,
            response: Response::VolumeMl,
            links: LinkSet::default_for(Family::GeneralizedGamma),
            mu_contrast: true,
            ..Self::attenuation()
        }
    }

    /// Only intercept, sex and age terms; no acquisition or group effects.
    pub fn minimal(family: Family) -> Self {
        let base = match family {
            Family::SkewT1 => Self::attenuation(),
            Family::GeneralizedGamma => Self::volume(),
        };
        Self {
            mu_manufacturer: false,
            mu_kvp: false,
            mu_contrast: false,
            study_mu: false,
            study_sigma: false,
            study_effect_mode: StudyEffectMode::None,
            ..base
        }
    }

    pub fn with_study_mode(mut self, mode: StudyEffectMode) -> Self {
        self.study_effect_mode = mode;
        self
    }

    /// Drops terms that `data` cannot identify: covariates without
    /// variation and group effects with fewer than two groups.
    pub fn adapted_to(mut self, data: &[Observation]) -> Self {
        let distinct = |f: &dyn Fn(&Observation) -> String| {
            data.iter()
                .map(f)
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        };
        let both_sexes = distinct(&|o| format!("{:?}", o.sex)) > 1;
        self.mu_sex &= both_sexes;
        self.sigma_sex &= both_sexes;
        self.mu_manufacturer &= distinct(&|o| o.manufacturer.clone()) > 1;
        self.mu_kvp &=
            distinct(&|o| o.kvp.to_string()) > 1 && data.iter().all(|o| o.kvp.is_finite());
        self.mu_contrast &= distinct(&|o| o.contrast.to_string()) > 1;
        if distinct(&|o| o.group.clone()) < 2 {
            self.study_mu = false;
            self.study_sigma = false;
            self.study_effect_mode = StudyEffectMode::None;
        }
        self
    }

    pub(crate) fn has_random(&self) -> bool {
        self.study_effect_mode == StudyEffectMode::PenalizedRandom
            && (self.study_mu || self.study_sigma)
    }
}

/// One response value with the covariates every model may use.
///
/// `group` carries the study label in cross-sectional fits and the subject
/// label in longitudinal fits. `age` is baseline age and `time` the years
/// since baseline in longitudinal fits; cross-sectional fits use `time = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub age: f64,
    pub sex: Sex,
    pub manufacturer: String,
    pub kvp: f64,
    pub contrast: bool,
    pub group: String,
    pub time: f64,
}
