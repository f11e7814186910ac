use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::extract::AbnormalitySet;
use super::registry::TargetId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    pub report_id: String,
    pub unanimous_abnormal: BTreeSet<TargetId>,
    pub disputed: BTreeSet<TargetId>,
    pub unflagged: BTreeSet<TargetId>,
}

fn same_report(sets: &[AbnormalitySet]) -> Result<&str> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Contract("at least one abnormality set is required".into()))?;
    if let Some(other) = sets.iter().find(|s| s.report_id != first.report_id) {
        return Err(Error::Contract(format!(
            "abnormality sets refer to different reports ({} and {})",
            first.report_id, other.report_id
        )));
    }
    Ok(&first.report_id)
}

fn counts(sets: &[AbnormalitySet]) -> BTreeMap<TargetId, usize> {
    let mut c = BTreeMap::new();
    for id in sets.iter().flat_map(|s| &s.targets) {
        *c.entry(*id).or_insert(0) += 1;
    }
    c
}

/// Splits `universe` by how many of the sets flag each target.
pub fn consensus_partition(
    sets: &[AbnormalitySet],
    universe: impl IntoIterator<Item = TargetId>,
) -> Result<Consensus> {
    let report_id = same_report(sets)?.to_string();
    let n = sets.len();
    let c = counts(sets);
    let mut out = Consensus {
        report_id,
        unanimous_abnormal: BTreeSet::new(),
        disputed: BTreeSet::new(),
        unflagged: BTreeSet::new(),
    };
    let mut all: BTreeSet<TargetId> = universe.into_iter().collect();
    all.extend(c.keys());
    for id in all {
        match c.get(&id).copied().unwrap_or(0) {
            0 => out.unflagged.insert(id),
            k if k == n => out.unanimous_abnormal.insert(id),
            _ => out.disputed.insert(id),
        };
    }
    Ok(out)
}

/// Targets flagged by strictly more than half of the sets.
pub fn majority_vote(sets: &[AbnormalitySet]) -> Result<AbnormalitySet> {
    let report_id = same_report(sets)?.to_string();
    let n = sets.len();
    let targets = counts(sets)
        .into_iter()
        .filter(|&(_, k)| 2 * k > n)
        .map(|(id, _)| id)
        .collect();
    Ok(AbnormalitySet { report_id, targets })
}

/// |A∩B| / |A∪B|, with two empty sets agreeing perfectly.
pub fn jaccard(a: &BTreeSet<TargetId>, b: &BTreeSet<TargetId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    /// Mean per-report Jaccard against the manual sets.
    pub jaccard: f64,
    /// Pooled over reports: Σ|P∩M| / Σ|P| (NaN when nothing was predicted).
    pub precision: f64,
    /// Pooled over reports: Σ|P∩M| / Σ|M| (NaN when nothing was labelled).
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMetrics {
    pub reports: usize,
    pub pairwise_jaccard_mean: f64,
    pub exact_set_agreement: f64,
    pub per_method: Vec<MethodScore>,
}

fn index<'a>(
    sets: &'a [AbnormalitySet],
    who: &str,
) -> Result<BTreeMap<&'a str, &'a BTreeSet<TargetId>>> {
    let mut m = BTreeMap::new();
    for s in sets {
        if m.insert(s.report_id.as_str(), &s.targets).is_some() {
            return Err(Error::Contract(format!(
                "{who} has two sets for report {}",
                s.report_id
            )));
        }
    }
    Ok(m)
}

/// Inter-model agreement over the reports every method covers, plus
/// per-method scores against manual labels on the labelled subset.
pub fn agreement_metrics(
    methods: &[(String, Vec<AbnormalitySet>)],
    manual: Option<&[AbnormalitySet]>,
) -> Result<AgreementMetrics> {
    if methods.len() < 2 {
        return Err(Error::Contract(
            "inter-model metrics need at least two methods".into(),
        ));
    }
    let indexed: Vec<BTreeMap<&str, &BTreeSet<TargetId>>> = methods
        .iter()
        .map(|(name, sets)| index(sets, name))
        .collect::<Result<_>>()?;
    let reports: Vec<&str> = indexed[0]
        .keys()
        .copied()
        .filter(|r| indexed.iter().all(|m| m.contains_key(r)))
        .collect();
    let (mut jac_sum, mut exact) = (0.0, 0usize);
    for r in &reports {
        let sets: Vec<&BTreeSet<TargetId>> = indexed.iter().map(|m| m[r]).collect();
        let (mut s, mut pairs) = (0.0, 0usize);
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                s += jaccard(sets[i], sets[j]);
                pairs += 1;
            }
        }
        jac_sum += s / pairs as f64;
        if sets.iter().all(|s| *s == sets[0]) {
            exact += 1;
        }
    }
    let denom = reports.len() as f64;
    let mut per_method = Vec::new();
    if let Some(manual) = manual {
        let truth = index(manual, "manual labels")?;
        for ((name, _), m) in methods.iter().zip(&indexed) {
            let (mut j, mut hit, mut pred, mut lab, mut k) = (0.0, 0usize, 0usize, 0usize, 0usize);
            for (r, t) in &truth {
                let Some(p) = m.get(r) else { continue };
                j += jaccard(p, t);
                hit += p.intersection(t).count();
                pred += p.len();
                lab += t.len();
                k += 1;
            }
            let ratio = |a: usize, b: usize| {
                if b == 0 {
                    f64::NAN
                } else {
                    a as f64 / b as f64
                }
            };
            per_method.push(MethodScore {
                method: name.clone(),
                jaccard: if k == 0 { f64::NAN } else { j / k as f64 },
                precision: ratio(hit, pred),
                recall: ratio(hit, lab),
            });
        }
    }
    Ok(AgreementMetrics {
        reports: reports.len(),
        pairwise_jaccard_mean: if reports.is_empty() {
            f64::NAN
        } else {
            jac_sum / denom
        },
        exact_set_agreement: if reports.is_empty() {
            f64::NAN
        } else {
            exact as f64 / denom
        },
        per_method,
    })
}
