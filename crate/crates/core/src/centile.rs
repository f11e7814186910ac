//! Centile scores, chart grids, median growth rates and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::data::Sex;
use crate::engine::{ChartModel, Covariates};
use crate::error::{Error, Result};
use crate::special::normal_cdf;

/// Centiles drawn on the reference charts (5th..95th ribbons and median).
pub const DEFAULT_CENTILES: [f64; 7] = [5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0];

/// Covariates of one scan to be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    pub age: f64,
    pub sex: Sex,
    pub manufacturer: String,
    pub kvp: f64,
    pub contrast: bool,
    /// Training study, if the scan comes from one; otherwise the
    /// population-level reference is used.
    pub study: Option<String>,
}

impl CovariateProfile {
    /// Reference manufacturer, centered kvp, no contrast, no study.
    pub fn reference(model: &ChartModel, age: f64, sex: Sex) -> Self {
        Self {
            age,
            sex,
            manufacturer: model
                .encoding
                .manufacturer_levels
                .first()
                .cloned()
                .unwrap_or_default(),
            kvp: model.encoding.kvp_center,
            contrast: false,
            study: None,
        }
    }

    pub fn at_age(&self, age: f64) -> Self {
        Self {
            age,
            ..self.clone()
        }
    }
}

impl Covariates for CovariateProfile {
    fn age(&self) -> f64 {
        self.age
    }
    fn sex(&self) -> Sex {
        self.sex
    }
    fn manufacturer(&self) -> &str {
        &self.manufacturer
    }
    fn kvp(&self) -> f64 {
        self.kvp
    }
    fn contrast(&self) -> bool {
        self.contrast
    }
    fn group(&self) -> Option<&str> {
        self.study.as_deref()
    }
    fn time(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// In [0, 100].
    pub centile: f64,
    pub warnings: Vec<String>,
}

/// `100 · F(y)` under the covariate-conditional fitted distribution.
pub fn score(model: &ChartModel, profile: &CovariateProfile, y: f64) -> Result<Score> {
    let (params, warn) = model.predict(profile)?;
    let f = params.cdf(y)?;
    Ok(Score {
        centile: 100.0 * f,
        warnings: warn.messages(),
    })
}

/// Scores attenuation with the model matching the scan's contrast state.
pub fn score_attenuation(
    non_contrast: &ChartModel,
    contrast: &ChartModel,
    profile: &CovariateProfile,
    y: f64,
) -> Result<Score> {
    score(
        if profile.contrast {
            contrast
        } else {
            non_contrast
        },
        profile,
        y,
    )
}

/// Fitted centile curves on an age grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentileTable {
    pub structure_id: String,
    pub profile: CovariateProfile,
    pub ages: Vec<f64>,
    pub centiles: Vec<f64>,
    /// `values[i][j]` is centile `j` at age `i`.
    pub values: Vec<Vec<f64>>,
}

impl CentileTable {
    /// Long format with columns `age,centile,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["age", "centile", "value"])?;
        for (age, row) in self.ages.iter().zip(&self.values) {
            for (c, v) in self.centiles.iter().zip(row) {
                w.write_record([age.to_string(), c.to_string(), v.to_string()])?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Inclusive grid `from, from + step, ..., to`.
pub fn age_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(to >= from) {
        return Err(Error::Contract(format!(
            "invalid age grid {from}..{to} step {step}"
        )));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| from + i as f64 * step).collect())
}

pub fn chart_grid(
    model: &ChartModel,
    structure_id: &str,
    template: &CovariateProfile,
    ages: &[f64],
    centiles: &[f64],
) -> Result<CentileTable> {
    if centiles.is_empty() || centiles.iter().any(|c| !(*c > 0.0 && *c < 100.0)) {
        return Err(Error::Contract(
            "centiles must lie strictly between 0 and 100".into(),
        ));
    }
    if centiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "centiles must be strictly increasing".into(),
        ));
    }
    let mut values = Vec::with_capacity(ages.len());
    for &age in ages {
        let (params, _) = model.predict(&template.at_age(age))?;
        values.push(
            centiles
                .iter()
                .map(|c| params.quantile(c / 100.0))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(CentileTable {
        structure_id: structure_id.to_string(),
        profile: template.clone(),
        ages: ages.to_vec(),
        centiles: centiles.to_vec(),
        values,
    })
}

/// d median / d age in response units per year.
pub fn median_rate(model: &ChartModel, profile: &CovariateProfile, age: f64) -> Result<f64> {
    let p = profile.at_age(age);
    let (params, _) = model.predict(&p)?;
    let (_, dq_dmu, dq_dsigma) = params.quantile_partials(0.5)?;
    let links = model.spec.links;
    let dmu = links.mu.dinverse_at(params.mu()) * model.linear_predictor_dage(0, &p);
    let dsigma = links.sigma.dinverse_at(params.sigma()) * model.linear_predictor_dage(1, &p);
    Ok(dq_dmu * dmu + dq_dsigma * dsigma)
}

/// Mann–Whitney AUC (ties count one half) and the two-sided rank-sum p-value
/// from the tie-corrected normal approximation.
pub fn rank_auc(cases: &[f64], controls: &[f64]) -> Result<(f64, f64)> {
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::Contract(
            "rank AUC needs at least one case and one control".into(),
        ));
    }
    if cases.iter().chain(controls).any(|v| v.is_nan()) {
        return Err(Error::Domain("rank AUC scores must not be NaN".into()));
    }
    let (n1, n2) = (cases.len() as f64, controls.len() as f64);
    let mut all: Vec<(f64, bool)> = cases
        .iter()
        .map(|&v| (v, true))
        .chain(controls.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    let auc = u / (n1 * n2);
    let nf = n as f64;
    let var = n1 * n2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)).max(1.0));
    let p = if var > 0.0 {
        let z = (u - n1 * n2 / 2.0).abs() / var.sqrt();
        (2.0 * (1.0 - normal_cdf(z))).min(1.0)
    } else {
        1.0
    };
    Ok((auc, p))
}
