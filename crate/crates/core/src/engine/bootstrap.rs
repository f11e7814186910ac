use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_with, FitOptions};
use super::spec::{ModelSpec, Observation};
use crate::centile::CovariateProfile;
use crate::data::Sex;
use crate::error::{Error, Result};
use crate::fp::PowerSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub ages: Vec<f64>,
    /// Largest tolerated fraction of failed replicate fits.
    pub max_failure_rate: f64,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, seed: u64, ages: Vec<f64>) -> Self {
        Self {
            replicates,
            seed,
            ages,
            max_failure_rate: 0.10,
        }
    }
}

/// Pointwise 2.5 / 50 / 97.5 percentiles of a natural-scale parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub parameter: String,
    pub sex: Sex,
    pub age: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub bands: Vec<BandPoint>,
    pub succeeded: usize,
    pub failures: Vec<ReplicateFailure>,
}

impl BootstrapResult {
    pub fn band(&self, parameter: &str, sex: Sex, age: f64) -> Option<&BandPoint> {
        self.bands
            .iter()
            .find(|b| b.parameter == parameter && b.sex == sex && b.age == age)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `b`, independent of scheduling order.
pub fn replicate_seed(master: u64, b: usize) -> u64 {
    splitmix64(master ^ splitmix64(b as u64))
}

/// Row indices of one resample drawn with replacement inside every
/// (group, sex) stratum, keeping each stratum's size.
pub fn stratified_resample(data: &[Observation], seed: u64) -> Vec<usize> {
    let mut strata: BTreeMap<(&str, Sex), Vec<usize>> = BTreeMap::new();
    for (i, o) in data.iter().enumerate() {
        strata.entry((o.group.as_str(), o.sex)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(data.len());
    for rows in strata.values() {
        out.extend((0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]));
    }
    out
}

/// Linear-interpolation percentile of sorted data (`q` in [0, 1]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const PARAMS: [&str; 2] = ["mu", "sigma"];
const SEXES: [Sex; 2] = [Sex::F, Sex::M];

/// Stratified bootstrap bands for μ(age) and σ(age) by sex at the
/// reference acquisition profile.
pub fn bootstrap_ci(
    data: &[Observation],
    spec: &ModelSpec,
    powers_mu: &PowerSet,
    powers_sigma: &PowerSet,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if opts.replicates < 2 {
        return Err(Error::Contract(format!(
            "bootstrap needs at least 2 replicates, got {}",
            opts.replicates
        )));
    }
    let fit_opts = FitOptions {
        skip_standard_errors: false,
        ..FitOptions::default()
    };
    let (full, internals) = fit_with(data, spec, powers_mu, powers_sigma, &fit_opts)?;
    let profiles: Vec<CovariateProfile> = SEXES
        .iter()
        .flat_map(|&s| opts.ages.iter().map(move |&a| (a, s)))
        .map(|(a, s)| CovariateProfile::reference(&full, a, s))
        .collect();

    let outcomes: Vec<std::result::Result<Vec<[f64; 2]>, String>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let idx = stratified_resample(data, replicate_seed(opts.seed, b));
            let sample: Vec<Observation> = idx.iter().map(|&i| data[i].clone()).collect();
            let ropts = FitOptions {
                warm_start: Some(&full),
                skip_standard_errors: true,
                reuse: Some(&internals),
                ..FitOptions::default()
            };
            let (m, _) = fit_with(&sample, spec, powers_mu, powers_sigma, &ropts)
                .map_err(|e| e.to_string())?;
            profiles
                .iter()
                .map(|p| {
                    m.predict(p)
                        .map(|(fp, _)| [fp.mu(), fp.sigma()])
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();

    let mut failures = Vec::new();
    let mut draws: Vec<Vec<[f64; 2]>> = Vec::new();
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => draws.push(v),
            Err(error) => failures.push(ReplicateFailure {
                replicate: b,
                error,
            }),
        }
    }
    if failures.len() as f64 > opts.max_failure_rate * opts.replicates as f64 {
        return Err(Error::Numerical(format!(
            "{} of {} bootstrap replicates failed to fit",
            failures.len(),
            opts.replicates
        )));
    }
    let mut bands = Vec::new();
    for (k, name) in PARAMS.iter().enumerate() {
        for (j, p) in profiles.iter().enumerate() {
            let mut v: Vec<f64> = draws.iter().map(|d| d[j][k]).collect();
            v.sort_by(f64::total_cmp);
            bands.push(BandPoint {
                parameter: name.to_string(),
                sex: p.sex,
                age: p.age,
                lower: percentile(&v, 0.025),
                median: percentile(&v, 0.5),
                upper: percentile(&v, 0.975),
            });
        }
    }
    Ok(BootstrapResult {
        bands,
        succeeded: draws.len(),
        failures,
    })
}
