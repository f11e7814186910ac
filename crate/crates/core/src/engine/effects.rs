use serde::{Deserialize, Serialize};

use super::model::ChartModel;
use super::spec::StudyEffectMode;
use crate::dist::Link;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectUnit {
    /// `100 · (exp(γ) − 1)` for log-link parameters.
    Percent,
    /// `γ` itself for identity-link parameters.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEffect {
    pub parameter: String,
    pub study: String,
    /// Link-scale intercept.
    pub estimate: f64,
    pub deviation: f64,
    pub unit: EffectUnit,
}

pub fn deviation(link: Link, gamma: f64) -> (f64, EffectUnit) {
    match link {
        Link::Log => (100.0 * gamma.exp_m1(), EffectUnit::Percent),
        Link::Identity => (gamma, EffectUnit::Native),
    }
}

/// Per-study deviations from the population reference. With fixed study
/// effects the reference study reports 0.
pub fn study_effects(model: &ChartModel) -> Result<Vec<StudyEffect>> {
    let mut out = Vec::new();
    let mut push = |parameter: &str, link: Link, study: &str, estimate: f64| {
        let (deviation, unit) = deviation(link, estimate);
        out.push(StudyEffect {
            parameter: parameter.into(),
            study: study.into(),
            estimate,
            deviation,
            unit,
        });
    };
    match model.spec.study_effect_mode {
        StudyEffectMode::None => {
            return Err(Error::Contract(
                "model was fitted without study effects".into(),
            ));
        }
        StudyEffectMode::PenalizedRandom => {
            for re in &model.random_effects {
                for (level, &g) in re.levels.iter().zip(&re.estimates) {
                    push(&re.parameter, re.link, level, g);
                }
            }
        }
        StudyEffectMode::Fixed => {
            for block in &model.parameters {
                if !block.terms.iter().any(|t| t.starts_with("group[")) {
                    continue;
                }
                for level in &model.encoding.group_levels {
                    let term = format!("group[{level}]");
                    let g = block
                        .terms
                        .iter()
                        .position(|t| *t == term)
                        .map_or(0.0, |j| block.estimates[j]);
                    push(&block.parameter, block.link, level, g);
                }
            }
        }
    }
    Ok(out)
}
