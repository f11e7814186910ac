//! Fractional-polynomial age terms.
//!
//! Age enters as `x = age / divisor`. A power `p` contributes `x^p`
//! (`ln x` for `p = 0`); each repetition of a power multiplies the previous
//! column of that power by `ln x`, so `(1, 1)` is `x + x ln x`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STANDARD_POWERS: [f64; 8] = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];
pub const MAX_DEGREE: usize = 3;

/// Sorted multiset of FP powers. The empty set means "no age term".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PowerSet {
    powers: Vec<f64>,
}

impl PowerSet {
    pub fn new(powers: &[f64]) -> Result<Self> {
        if powers.len() > MAX_DEGREE {
            return Err(Error::Contract(format!(
                "FP degree {} exceeds {MAX_DEGREE}",
                powers.len()
            )));
        }
        for &p in powers {
            if !STANDARD_POWERS.contains(&p) {
                return Err(Error::Contract(format!(
                    "FP power {p} is not in the standard set"
                )));
            }
        }
        let mut powers = powers.to_vec();
        powers.sort_by(f64::total_cmp);
        Ok(Self { powers })
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn degree(&self) -> usize {
        self.powers.len()
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    /// `(power, exponent of ln x)` for each column.
    fn terms(&self) -> impl Iterator<Item = (f64, i32)> + '_ {
        self.powers.iter().enumerate().map(|(i, &p)| {
            let reps = self.powers[..i].iter().filter(|&&q| q == p).count() as i32;
            (p, if p == 0.0 { reps + 1 } else { reps })
        })
    }

    /// Human-readable column labels, e.g. `x^0.5`, `x log(x)`.
    pub fn column_labels(&self) -> Vec<String> {
        self.terms().map(|(p, m)| term_label(p, m)).collect()
    }
}

fn term_label(p: f64, m: i32) -> String {
    let base = if p == 0.0 {
        String::new()
    } else if p == 1.0 {
        "x".to_string()
    } else {
        format!("x^{p}")
    };
    let log = match m {
        0 => String::new(),
        1 => "log(x)".to_string(),
        k => format!("log(x)^{k}"),
    };
    match (base.is_empty(), log.is_empty()) {
        (true, _) => log,
        (false, true) => base,
        (false, false) => format!("{base} {log}"),
    }
}

impl TryFrom<Vec<f64>> for PowerSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        PowerSet::new(&v)
    }
}

impl From<PowerSet> for Vec<f64> {
    fn from(p: PowerSet) -> Self {
        p.powers
    }
}

impl fmt::Display for PowerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.powers.is_empty() {
            return f.write_str("-");
        }
        f.write_str(&self.column_labels().join(" + "))
    }
}

/// Age rescaling applied before the powers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeScaling {
    pub divisor: f64,
    pub min_age: f64,
    pub max_age: f64,
}

impl AgeScaling {
    pub fn new(divisor: f64, min_age: f64, max_age: f64) -> Result<Self> {
        if !(divisor > 0.0) || !(min_age > 0.0) || !(max_age >= min_age) {
            return Err(Error::Contract(format!(
                "invalid age scaling: divisor {divisor}, domain [{min_age}, {max_age}]"
            )));
        }
        Ok(Self {
            divisor,
            min_age,
            max_age,
        })
    }

    pub fn scale(&self, age: f64) -> f64 {
        age / self.divisor
    }

    pub fn contains(&self, age: f64) -> bool {
        age >= self.min_age && age <= self.max_age
    }
}

/// Basis values at scaled age `x`.
pub fn fp_design(x: f64, powers: &PowerSet) -> Result<Vec<f64>> {
    check_x(x)?;
    let mut out = vec![0.0; powers.degree()];
    fp_design_into(x, powers, &mut out);
    Ok(out)
}

/// Unchecked variant writing into `out`; `x` must be positive.
pub(crate) fn fp_design_into(x: f64, powers: &PowerSet, out: &mut [f64]) {
    let lx = x.ln();
    for (slot, (p, m)) in out.iter_mut().zip(powers.terms()) {
        let base = if p == 0.0 { 1.0 } else { x.powf(p) };
        *slot = base * lx.powi(m);
    }
}

/// d/dx of each basis column at scaled age `x`.
pub(crate) fn fp_design_dx(x: f64, powers: &PowerSet) -> Vec<f64> {
    let lx = x.ln();
    powers
        .terms()
        .map(|(p, m)| {
            let xp1 = x.powf(p - 1.0);
            let mut d = p * xp1 * lx.powi(m);
            if m > 0 {
                d += f64::from(m) * xp1 * lx.powi(m - 1);
            }
            d
        })
        .collect()
}

/// Derivative with respect to age of `Σ coeffs_j · basis_j(age / divisor)`.
pub fn fp_derivative(powers: &PowerSet, coeffs: &[f64], x: f64, divisor: f64) -> Result<f64> {
    if coeffs.len() != powers.degree() {
        return Err(Error::Contract(format!(
            "FP derivative needs {} coefficients, got {}",
            powers.degree(),
            coeffs.len()
        )));
    }
    check_x(x)?;
    let d: f64 = fp_design_dx(x, powers)
        .iter()
        .zip(coeffs)
        .map(|(a, b)| a * b)
        .sum();
    Ok(d / divisor)
}

fn check_x(x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!(
            "FP terms need a positive scaled age, got {x}"
        )));
    }
    Ok(())
}

/// Every power multiset of degree `0..=max_degree`, null set first.
pub fn enumerate_power_sets(max_degree: usize) -> Vec<PowerSet> {
    fn rec(start: usize, left: usize, cur: &mut Vec<f64>, out: &mut Vec<PowerSet>) {
        if left == 0 {
            out.push(PowerSet {
                powers: cur.clone(),
            });
            return;
        }
        for i in start..STANDARD_POWERS.len() {
            cur.push(STANDARD_POWERS[i]);
            rec(i, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for degree in 0..=max_degree.min(MAX_DEGREE) {
        rec(0, degree, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ps(p: &[f64]) -> PowerSet {
        PowerSet::new(p).unwrap()
    }

    #[test]
    fn basis_values() {
        assert_eq!(
            fp_design(std::f64::consts::E, &ps(&[0.0])).unwrap(),
            vec![1.0]
        );
        let v = fp_design(2.0, &ps(&[1.0, 1.0])).unwrap();
        assert_eq!(v[0], 2.0);
        assert!((v[1] - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(fp_design(2.0, &ps(&[3.0, -2.0])).unwrap(), vec![0.25, 8.0]);
        let v = fp_design(3.0, &ps(&[0.0, 0.0, 0.0])).unwrap();
        let l = 3f64.ln();
        assert!((v[2] - l.powi(3)).abs() < 1e-14);
        assert!(matches!(fp_design(0.0, &ps(&[1.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn power_validation() {
        assert!(PowerSet::new(&[0.25]).is_err());
        assert!(PowerSet::new(&[1.0, 2.0, 3.0, 3.0]).is_err());
        assert_eq!(ps(&[2.0, 0.5]).powers(), &[0.5, 2.0]);
        assert_eq!(ps(&[1.0, 1.0]).to_string(), "x + x log(x)");
        assert_eq!(ps(&[-2.0, -2.0]).to_string(), "x^-2 + x^-2 log(x)");
        assert_eq!(PowerSet::null().to_string(), "-");
    }

    #[test]
    fn derivative_special_cases() {
        assert!((fp_derivative(&ps(&[1.0]), &[2.5], 4.2, 10.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((fp_derivative(&ps(&[0.0]), &[3.0], 2.0, 1.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(
            fp_derivative(&ps(&[1.0]), &[1.0, 2.0], 1.0, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn candidate_counts() {
        let sets = enumerate_power_sets(2);
        assert_eq!(sets.len(), 45);
        assert_eq!(sets.iter().filter(|s| s.degree() == 1).count(), 8);
        assert_eq!(sets.iter().filter(|s| s.degree() == 2).count(), 36);
        assert_eq!(
            enumerate_power_sets(3)
                .iter()
                .filter(|s| s.degree() == 3)
                .count(),
            120
        );
        assert_eq!(sets[0].degree(), 0);
    }

    #[test]
    fn columns_are_independent_on_a_grid() {
        for set in enumerate_power_sets(3)
            .into_iter()
            .filter(|s| s.degree() > 0)
        {
            let xs: Vec<f64> = (0..=set.degree()).map(|i| 1.8 + 0.9 * i as f64).collect();
            let mut m = DMatrix::zeros(xs.len(), set.degree() + 1);
            for (r, &x) in xs.iter().enumerate() {
                m[(r, 0)] = 1.0;
                for (c, v) in fp_design(x, &set).unwrap().into_iter().enumerate() {
                    m[(r, c + 1)] = v;
                }
            }
            assert_eq!(m.rank(1e-10), set.degree() + 1, "{set}");
        }
    }

    #[test]
    fn serde_round_trip() {
        let s = ps(&[0.5, 2.0]);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, "[0.5,2.0]");
        assert_eq!(serde_json::from_str::<PowerSet>(&j).unwrap(), s);
        assert!(serde_json::from_str::<PowerSet>("[0.3]").is_err());
    }

    proptest! {
        #[test]
        fn derivative_matches_central_difference(
            idx in proptest::collection::vec(0usize..8, 1..=3),
            coeffs in proptest::collection::vec(-3.0f64..3.0, 3),
            x in 1.5f64..10.0,
        ) {
            let powers: Vec<f64> = idx.iter().map(|&i| STANDARD_POWERS[i]).collect();
            let set = ps(&powers);
            let c = &coeffs[..set.degree()];
            let divisor = 10.0;
            let eval = |age: f64| -> f64 {
                fp_design(age / divisor, &set).unwrap().iter().zip(c).map(|(a, b)| a * b).sum()
            };
            let age = x * divisor;
            let h = 1e-4 * age;
            let fd = (eval(age - 2.0 * h) - 8.0 * eval(age - h) + 8.0 * eval(age + h) - eval(age + 2.0 * h)) / (12.0 * h);
            let an = fp_derivative(&set, c, x, divisor).unwrap();
            prop_assert!((an - fd).abs() <= 1e-6 * an.abs().max(1e-3), "{} vs {}", an, fd);
        }
    }
}
