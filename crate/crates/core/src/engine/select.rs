use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_with, FitOptions};
use super::model::ChartModel;
use super::spec::{ModelSpec, Observation};
use crate::error::{Error, Result};
use crate::fp::{enumerate_power_sets, PowerSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub max_degree_mu: usize,
    pub max_degree_sigma: usize,
    /// Re-select the μ powers once the σ powers are known.
    pub refine: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            max_degree_mu: 2,
            max_degree_sigma: 2,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Mu,
    Sigma,
    Refine,
}

/// One visited candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub stage: SearchStage,
    pub powers_mu: PowerSet,
    pub powers_sigma: PowerSet,
    pub n_coefficients: Option<usize>,
    pub bic: Option<f64>,
    /// Why the candidate was skipped, if it failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub powers_mu: PowerSet,
    pub powers_sigma: PowerSet,
    pub bic_table: Vec<BicEntry>,
    /// Refit of the winning pair with standard errors.
    pub model: ChartModel,
}

/// Lower BIC wins; exact ties go to the smaller model.
pub(crate) fn prefer(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

type Key = (Vec<u64>, Vec<u64>);

fn key(mu: &PowerSet, sigma: &PowerSet) -> Key {
    let bits = |p: &PowerSet| p.powers().iter().map(|v| v.to_bits()).collect();
    (bits(mu), bits(sigma))
}

type Outcome = std::result::Result<(f64, usize), String>;

struct Search<'a> {
    data: &'a [Observation],
    spec: &'a ModelSpec,
    cache: HashMap<Key, Outcome>,
    table: Vec<BicEntry>,
}

impl Search<'_> {
    /// Fits every candidate pair not seen before and returns the best by
    /// (BIC, coefficient count).
    fn stage(
        &mut self,
        stage: SearchStage,
        pairs: Vec<(PowerSet, PowerSet)>,
    ) -> Option<(PowerSet, PowerSet)> {
        let todo: Vec<&(PowerSet, PowerSet)> = pairs
            .iter()
            .filter(|(m, s)| !self.cache.contains_key(&key(m, s)))
            .collect();
        let (data, spec) = (self.data, self.spec);
        let results: Vec<Outcome> = todo
            .par_iter()
            .map(|(m, s)| {
                let opts = FitOptions {
                    skip_standard_errors: true,
                    ..FitOptions::default()
                };
                fit_with(data, spec, m, s, &opts)
                    .map(|(model, _)| (model.fit.bic, model.fit.n_coefficients))
                    .map_err(|e| e.to_string())
            })
            .collect();
        for ((m, s), r) in todo.into_iter().zip(results) {
            self.cache.insert(key(m, s), r);
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, (m, s)) in pairs.iter().enumerate() {
            let r = &self.cache[&key(m, s)];
            self.table.push(BicEntry {
                stage,
                powers_mu: m.clone(),
                powers_sigma: s.clone(),
                n_coefficients: r.as_ref().ok().map(|v| v.1),
                bic: r.as_ref().ok().map(|v| v.0),
                error: r.as_ref().err().cloned(),
            });
            if let Ok((bic, k)) = r {
                let better = match best {
                    None => true,
                    Some((b, bk, _)) => prefer((*bic, *k), (b, bk)),
                };
                if better {
                    best = Some((*bic, *k, i));
                }
            }
        }
        best.map(|(_, _, i)| pairs[i].clone())
    }
}

/// Selects FP powers for μ and σ by BIC.
pub fn select_fp(data: &[Observation], spec: &ModelSpec) -> Result<Selection> {
    select_fp_with(data, spec, &SelectOptions::default())
}

pub fn select_fp_with(
    data: &[Observation],
    spec: &ModelSpec,
    opts: &SelectOptions,
) -> Result<Selection> {
    let mu_sets = enumerate_power_sets(opts.max_degree_mu);
    let sigma_sets = enumerate_power_sets(opts.max_degree_sigma);
    let mut search = Search {
        data,
        spec,
        cache: HashMap::new(),
        table: Vec::new(),
    };
    let no_fit = || Error::Numerical("no FP candidate could be fitted".into());

    let pairs = mu_sets
        .iter()
        .map(|m| (m.clone(), PowerSet::null()))
        .collect();
    let (mut mu, _) = search.stage(SearchStage::Mu, pairs).ok_or_else(no_fit)?;
    let pairs = sigma_sets.iter().map(|s| (mu.clone(), s.clone())).collect();
    let (_, sigma) = search.stage(SearchStage::Sigma, pairs).ok_or_else(no_fit)?;
    if opts.refine {
        let pairs = mu_sets.iter().map(|m| (m.clone(), sigma.clone())).collect();
        mu = search
            .stage(SearchStage::Refine, pairs)
            .ok_or_else(no_fit)?
            .0;
    }
    let model = fit_with(data, spec, &mu, &sigma, &FitOptions::default())?.0;
    Ok(Selection {
        powers_mu: mu,
        powers_sigma: sigma,
        bic_table: search.table,
        model,
    })
}
