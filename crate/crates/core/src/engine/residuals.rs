use serde::{Deserialize, Serialize};

use super::model::ChartModel;
use super::spec::Observation;
use crate::error::Result;
use crate::special::{normal_cdf, normal_quantile};

const CLAMP: f64 = 1e-12;

/// Ordered residuals against normal plotting positions.
///
/// This is a detrended QQ summary, not a transformed Owen plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqSummary {
    pub ordered: Vec<f64>,
    /// `Φ⁻¹((i − 0.5) / n)` for `i = 1..n`.
    pub theoretical: Vec<f64>,
    /// `ordered − theoretical`.
    pub detrended: Vec<f64>,
}

impl QqSummary {
    pub fn new(residuals: &[f64]) -> Self {
        let mut ordered = residuals.to_vec();
        ordered.sort_by(f64::total_cmp);
        let theoretical = normal_positions(ordered.len());
        let detrended = ordered
            .iter()
            .zip(&theoretical)
            .map(|(a, b)| a - b)
            .collect();
        Self {
            ordered,
            theoretical,
            detrended,
        }
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.detrended.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

pub fn normal_positions(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| normal_quantile((i as f64 - 0.5) / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub residuals: Vec<f64>,
    /// Records whose CDF value hit 0 or 1 and was clamped.
    pub clamped: usize,
    pub qq: QqSummary,
}

/// Normalized quantile residuals `Φ⁻¹(F(y_i))`.
pub fn quantile_residuals(model: &ChartModel, data: &[Observation]) -> Result<Residuals> {
    let mut clamped = 0;
    let mut residuals = Vec::with_capacity(data.len());
    for o in data {
        let (params, _) = model.predict(o)?;
        let u = params.cdf(o.y)?;
        let uc = u.clamp(CLAMP, 1.0 - CLAMP);
        if uc != u {
            clamped += 1;
        }
        residuals.push(normal_quantile(uc));
    }
    let qq = QqSummary::new(&residuals);
    Ok(Residuals {
        residuals,
        clamped,
        qq,
    })
}

/// Kolmogorov–Smirnov distance between the sample and N(0, 1).
pub fn ks_normal(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = normal_cdf(x);
        d.max((f - i as f64 / n).abs())
            .max(((i + 1) as f64 / n - f).abs())
    })
}
