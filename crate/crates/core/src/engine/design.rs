use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, Observation, StudyEffectMode};
use crate::data::Sex;
use crate::error::{Error, Result};
use crate::fp::{fp_design_into, AgeScaling, PowerSet};

pub const PARAM_NAMES: [&str; 4] = ["mu", "sigma", "nu", "tau"];

/// Read access to the covariates a predictor row needs.
pub trait Covariates {
    fn age(&self) -> f64;
    fn sex(&self) -> Sex;
    fn manufacturer(&self) -> &str;
    fn kvp(&self) -> f64;
    fn contrast(&self) -> bool;
    fn group(&self) -> Option<&str>;
    fn time(&self) -> f64;
}

impl Covariates for Observation {
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
        Some(&self.group)
    }
    fn time(&self) -> f64 {
        self.time
    }
}

/// Categorical levels and numeric centering learned from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    /// Reference level first, then the rest in lexical order.
    pub manufacturer_levels: Vec<String>,
    /// Group labels in lexical order; with fixed group effects the
    /// reference is `fixed_group_reference`.
    pub group_levels: Vec<String>,
    pub fixed_group_reference: Option<String>,
    pub age_scaling: AgeScaling,
    pub kvp_center: f64,
}

/// Most frequent label, ties broken lexically.
fn most_frequent<'a>(labels: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(l, _)| l.to_string())
}

impl Encoding {
    pub fn from_data(data: &[Observation], spec: &ModelSpec) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract(
                "cannot fit a model to an empty dataset".into(),
            ));
        }
        let reference =
            most_frequent(data.iter().map(|o| o.manufacturer.as_str())).expect("nonempty");
        let mut manufacturer_levels = vec![reference.clone()];
        let others: BTreeSet<&str> = data
            .iter()
            .map(|o| o.manufacturer.as_str())
            .filter(|m| *m != reference)
            .collect();
        manufacturer_levels.extend(others.into_iter().map(str::to_string));

        let group_levels: Vec<String> = data
            .iter()
            .map(|o| o.group.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let fixed_group_reference = (spec.study_effect_mode == StudyEffectMode::Fixed)
            .then(|| most_frequent(data.iter().map(|o| o.group.as_str())))
            .flatten();

        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                (lo.min(o.age), hi.max(o.age))
            });
        Ok(Self {
            manufacturer_levels,
            group_levels,
            fixed_group_reference,
            age_scaling: AgeScaling::new(spec.age_divisor, lo, hi)?,
            kvp_center: spec.kvp_center,
        })
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.group_levels
            .binary_search_by(|g| g.as_str().cmp(label))
            .ok()
    }

    fn fixed_groups(&self) -> impl Iterator<Item = &String> {
        let reference = self.fixed_group_reference.as_deref();
        self.group_levels
            .iter()
            .filter(move |g| Some(g.as_str()) != reference)
    }
}

/// Builds raw (unstandardized) predictor rows for every distribution
/// parameter.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    pub spec: &'a ModelSpec,
    pub encoding: &'a Encoding,
    pub powers_mu: &'a PowerSet,
    pub powers_sigma: &'a PowerSet,
}

/// Non-fatal issues met while building a prediction row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowWarnings {
    pub unseen_manufacturer: bool,
    pub unseen_group: bool,
    pub age_outside_domain: bool,
}

impl RowWarnings {
    pub fn any(&self) -> bool {
        self.unseen_manufacturer || self.unseen_group || self.age_outside_domain
    }

    pub fn messages(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.age_outside_domain {
            out.push("age outside the fitted range; extrapolated".to_string());
        }
        if self.unseen_manufacturer {
            out.push(
                "manufacturer not seen in training; scored at the reference level".to_string(),
            );
        }
        if self.unseen_group {
            out.push("group not seen in training; group effect set to 0".to_string());
        }
        out
    }
}

impl Features<'_> {
    pub fn n_params(&self) -> usize {
        self.spec.family.n_params()
    }

    /// Whether parameter `k` has estimated coefficients.
    pub fn is_estimated(&self, k: usize) -> bool {
        !(k == 2 && self.spec.fixed_nu.is_some()) && k < self.n_params()
    }

    fn fixed_groups_in(&self, k: usize) -> bool {
        self.spec.study_effect_mode == StudyEffectMode::Fixed
            && ((k == 0 && self.spec.study_mu) || (k == 1 && self.spec.study_sigma))
    }

    pub fn names(&self, k: usize) -> Vec<String> {
        if !self.is_estimated(k) {
            return Vec::new();
        }
        let s = self.spec;
        let mut names = vec!["(Intercept)".to_string()];
        if k == 0 {
            if s.mu_sex {
                names.push("sex[M]".into());
            }
            if s.mu_manufacturer {
                names.extend(
                    self.encoding.manufacturer_levels[1..]
                        .iter()
                        .map(|m| format!("manufacturer[{m}]")),
                );
            }
            if s.mu_kvp {
                names.push("kvp".into());
            }
            if s.mu_contrast {
                names.push("contrast".into());
            }
            names.extend(
                self.powers_mu
                    .column_labels()
                    .into_iter()
                    .map(|l| format!("age:{l}")),
            );
            if s.mu_time {
                names.extend([
                    "time_b".to_string(),
                    "time_b:age_b/10".to_string(),
                    "time_b:sex[M]".to_string(),
                ]);
            }
        } else if k == 1 {
            if s.sigma_sex {
                names.push("sex[M]".into());
            }
            names.extend(
                self.powers_sigma
                    .column_labels()
                    .into_iter()
                    .map(|l| format!("age:{l}")),
            );
        }
        if self.fixed_groups_in(k) {
            names.extend(self.encoding.fixed_groups().map(|g| format!("group[{g}]")));
        }
        names
    }

    /// Appends the raw row for parameter `k` to `out`.
    pub fn row<C: Covariates + ?Sized>(
        &self,
        k: usize,
        c: &C,
        out: &mut Vec<f64>,
        warn: &mut RowWarnings,
    ) {
        if !self.is_estimated(k) {
            return;
        }
        let s = self.spec;
        out.push(1.0);
        let male = if c.sex() == Sex::M { 1.0 } else { 0.0 };
        let x = self.encoding.age_scaling.scale(c.age());
        if !self.encoding.age_scaling.contains(c.age()) {
            warn.age_outside_domain = true;
        }
        let push_fp = |powers: &PowerSet, out: &mut Vec<f64>| {
            let start = out.len();
            out.resize(start + powers.degree(), 0.0);
            fp_design_into(x, powers, &mut out[start..]);
        };
        if k == 0 {
            if s.mu_sex {
                out.push(male);
            }
            if s.mu_manufacturer {
                let levels = &self.encoding.manufacturer_levels;
                if !levels.iter().any(|m| m == c.manufacturer()) {
                    warn.unseen_manufacturer = true;
                }
                out.extend(
                    levels[1..]
                        .iter()
                        .map(|m| if m == c.manufacturer() { 1.0 } else { 0.0 }),
                );
            }
            if s.mu_kvp {
                out.push(c.kvp() - self.encoding.kvp_center);
            }
            if s.mu_contrast {
                out.push(if c.contrast() { 1.0 } else { 0.0 });
            }
            push_fp(self.powers_mu, out);
            if s.mu_time {
                let t = c.time();
                out.extend([t, t * c.age() / 10.0, t * male]);
            }
        } else if k == 1 {
            if s.sigma_sex {
                out.push(male);
            }
            push_fp(self.powers_sigma, out);
        }
        if self.fixed_groups_in(k) {
            let g = c.group();
            if g.is_some_and(|g| self.encoding.group_index(g).is_none()) {
                warn.unseen_group = true;
            }
            out.extend(self.encoding.fixed_groups().map(|l| {
                if Some(l.as_str()) == g {
                    1.0
                } else {
                    0.0
                }
            }));
        }
    }

    /// d(row)/d(age) for parameter `k` with `time` held fixed.
    pub fn row_dage<C: Covariates + ?Sized>(&self, k: usize, c: &C) -> Vec<f64> {
        let mut v = Vec::new();
        self.row(k, c, &mut v, &mut RowWarnings::default());
        let mut d = vec![0.0; v.len()];
        let x = self.encoding.age_scaling.scale(c.age());
        let div = self.encoding.age_scaling.divisor;
        let names = self.names(k);
        let powers = if k == 0 {
            self.powers_mu
        } else {
            self.powers_sigma
        };
        if let Some(first) = names.iter().position(|n| n.starts_with("age:")) {
            for (j, dv) in crate::fp::fp_design_dx(x, powers).into_iter().enumerate() {
                d[first + j] = dv / div;
            }
        }
        if let Some(j) = names.iter().position(|n| n == "time_b:age_b/10") {
            d[j] = c.time() / 10.0;
        }
        d
    }
}

/// Centering and scaling applied to the non-intercept design columns.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Standardization {
    pub center: [Vec<f64>; 4],
    pub scale: [Vec<f64>; 4],
}

impl Standardization {
    pub fn identity(sizes: [usize; 4]) -> Self {
        Self {
            center: sizes.map(|p| vec![0.0; p]),
            scale: sizes.map(|p| vec![1.0; p]),
        }
    }

    /// Standardized coefficients → raw coefficients.
    pub fn to_raw(&self, k: usize, b: &[f64]) -> Vec<f64> {
        let (m, s) = (&self.center[k], &self.scale[k]);
        let mut raw: Vec<f64> = b.iter().zip(s).map(|(v, s)| v / s).collect();
        if !raw.is_empty() {
            raw[0] = b[0] - (1..b.len()).map(|j| b[j] * m[j] / s[j]).sum::<f64>();
        }
        raw
    }

    pub fn to_std(&self, k: usize, raw: &[f64]) -> Vec<f64> {
        let (m, s) = (&self.center[k], &self.scale[k]);
        let mut b: Vec<f64> = raw.iter().zip(s).map(|(v, s)| v * s).collect();
        if !b.is_empty() {
            b[0] = raw[0] + (1..raw.len()).map(|j| raw[j] * m[j]).sum::<f64>();
        }
        b
    }

    /// Jacobian d(raw)/d(std) for block `k`.
    pub fn jacobian(&self, k: usize) -> nalgebra::DMatrix<f64> {
        let (m, s) = (&self.center[k], &self.scale[k]);
        let p = m.len();
        let mut a = nalgebra::DMatrix::zeros(p, p);
        for j in 0..p {
            a[(j, j)] = 1.0 / s[j];
        }
        for j in 1..p {
            a[(0, j)] = -m[j] / s[j];
        }
        a
    }
}

/// Standardized column-major design blocks plus random-effect indexing.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub n: usize,
    pub names: [Vec<String>; 4],
    /// Column-major `n × p_k`.
    pub cols: [Vec<f64>; 4],
    pub std: Standardization,
    pub group: Vec<usize>,
    pub n_groups: usize,
    /// Parameters (0 = μ, 1 = σ) carrying penalized group intercepts.
    pub random_params: Vec<usize>,
}

impl Design {
    pub fn build(
        data: &[Observation],
        feats: &Features<'_>,
        fixed_std: Option<&Standardization>,
    ) -> Result<Self> {
        let n = data.len();
        let mut names: [Vec<String>; 4] = Default::default();
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut center: [Vec<f64>; 4] = Default::default();
        let mut scale: [Vec<f64>; 4] = Default::default();
        let mut row = Vec::new();
        let mut warn = RowWarnings::default();
        let mut collinear = Vec::new();
        for k in 0..4 {
            names[k] = feats.names(k);
            let p = names[k].len();
            if p == 0 {
                continue;
            }
            let mut c = vec![0.0; n * p];
            for (i, obs) in data.iter().enumerate() {
                row.clear();
                feats.row(k, obs, &mut row, &mut warn);
                debug_assert_eq!(row.len(), p);
                for j in 0..p {
                    c[j * n + i] = row[j];
                }
            }
            let (m, s) = match fixed_std {
                Some(st) => (st.center[k].clone(), st.scale[k].clone()),
                None => {
                    let mut m = vec![0.0; p];
                    let mut s = vec![1.0; p];
                    for j in 1..p {
                        let col = &c[j * n..(j + 1) * n];
                        let mean = col.iter().sum::<f64>() / n as f64;
                        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                        m[j] = mean;
                        if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
                            collinear.push(format!("{}:{}", PARAM_NAMES[k], names[k][j]));
                        } else {
                            s[j] = var.sqrt();
                        }
                    }
                    (m, s)
                }
            };
            for j in 1..p {
                for v in &mut c[j * n..(j + 1) * n] {
                    *v = (*v - m[j]) / s[j];
                }
            }
            center[k] = m;
            scale[k] = s;
            cols[k] = c;
        }
        if !collinear.is_empty() {
            return Err(Error::RankDeficient { columns: collinear });
        }
        let design_names = names.clone();
        for k in 0..4 {
            let p = design_names[k].len();
            let bad = gram_schmidt_dependent(&cols[k], n, p);
            collinear.extend(
                bad.into_iter()
                    .map(|j| format!("{}:{}", PARAM_NAMES[k], design_names[k][j])),
            );
        }
        if !collinear.is_empty() {
            return Err(Error::RankDeficient { columns: collinear });
        }

        let spec = feats.spec;
        let mut random_params = Vec::new();
        if spec.has_random() {
            if spec.study_mu {
                random_params.push(0);
            }
            if spec.study_sigma {
                random_params.push(1);
            }
        }
        let group = data
            .iter()
            .map(|o| feats.encoding.group_index(&o.group).unwrap_or(0))
            .collect();
        Ok(Self {
            n,
            names,
            cols,
            std: Standardization { center, scale },
            group,
            n_groups: feats.encoding.group_levels.len(),
            random_params,
        })
    }

    pub fn p(&self, k: usize) -> usize {
        self.names[k].len()
    }

    pub fn offset(&self, k: usize) -> usize {
        (0..k).map(|j| self.p(j)).sum()
    }

    pub fn n_fixed(&self) -> usize {
        (0..4).map(|k| self.p(k)).sum()
    }

    pub fn n_random(&self) -> usize {
        self.random_params.len() * self.n_groups
    }

    pub fn dim(&self) -> usize {
        self.n_fixed() + self.n_random()
    }

    /// Start of the γ block for random term `t`.
    pub fn random_offset(&self, t: usize) -> usize {
        self.n_fixed() + t * self.n_groups
    }

    /// `X_k β` for block `k` of the full parameter vector.
    pub fn linear_predictor(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let p = self.p(k);
        let off = self.offset(k);
        let mut eta = vec![0.0; n];
        for j in 0..p {
            let b = theta[off + j];
            if b == 0.0 {
                continue;
            }
            for (e, x) in eta.iter_mut().zip(&self.cols[k][j * n..(j + 1) * n]) {
                *e += b * x;
            }
        }
        if let Some(t) = self.random_params.iter().position(|&r| r == k) {
            let g = &theta[self.random_offset(t)..self.random_offset(t) + self.n_groups];
            for (e, &gi) in eta.iter_mut().zip(&self.group) {
                *e += g[gi];
            }
        }
        eta
    }
}

/// Indices of columns (by position) that are numerically in the span of the
/// preceding ones.
fn gram_schmidt_dependent(cols: &[f64], n: usize, p: usize) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..p {
        let mut v = cols[j * n..(j + 1) * n].to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= d * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-7 * norm0.max(1e-300) {
            bad.push(j);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    bad
}
